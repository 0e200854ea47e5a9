"""Asynchronous distributed solver (BLADRBF) as a deterministic event simulation.

Every base station runs the centralized primal-dual iteration on its own copy
of the variables, generates cuts from its own iterate, and at each
of its cut-management events merges the cut sets received from its
in-neighbours and sends its current set to its out-neighbours.  Time is
logical: a seeded schedule decides when nodes step and when messages arrive,
so every interleaving is reproducible.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import centralized as bl
from . import cutting_planes as cp
from .errors import NumericalError, ProtocolError

SCHEDULE_MODES = ("round-robin", "randomized", "adversarial-lag")
EVENT_KINDS = ("step", "send", "recv", "drop", "add_power", "add_g", "converged")


# ----------------------------------------------------------------- graph


@dataclass(frozen=True)
class CommGraph:
    """Directed communication graph on nodes ``0 .. M-1``."""

    M: int
    edges: tuple

    def __post_init__(self):
        if int(self.M) < 1:
            raise ValueError("a graph needs at least one node")
        edges = tuple(sorted({(int(u), int(v)) for u, v in self.edges}))
        for u, v in edges:
            if not (0 <= u < self.M and 0 <= v < self.M):
                raise ValueError(f"edge ({u}, {v}) references a node outside 0..{self.M - 1}")
            if u == v:
                raise ValueError(f"self-loop at node {u}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "edges", edges)

    def out_neighbors(self, i):
        return tuple(v for u, v in self.edges if u == i)

    def in_neighbors(self, i):
        return tuple(u for u, v in self.edges if v == i)

    @classmethod
    def ring(cls, M):
        return cls(M, tuple((i, (i + 1) % M) for i in range(M)) if M > 1 else ())

    @classmethod
    def complete(cls, M):
        return cls(M, tuple((i, j) for i in range(M) for j in range(M) if i != j))

    @classmethod
    def random_strongly_connected(cls, M, seed, p=0.3):
        """A ring through a random permutation plus random extra edges."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(M)
        edges = {(int(order[i]), int(order[(i + 1) % M])) for i in range(M)} if M > 1 else set()
        for i in range(M):
            for j in range(M):
                if i != j and rng.random() < p:
                    edges.add((i, j))
        return cls(M, tuple(edges))


def _reachable(graph, start):
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in graph.out_neighbors(u):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def validate_graph(graph: CommGraph):
    """``(True, None)`` if strongly connected, else ``(False, (i, j))`` with ``j`` unreachable from ``i``."""
    for i in range(graph.M):
        seen = _reachable(graph, i)
        for j in range(graph.M):
            if j not in seen:
                return False, (i, j)
    return True, None


def read_graph(path) -> CommGraph:
    """Edge-list file: node count on the first line, then one ``u v`` pair (1-based) per line."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"{path}: empty graph file")
    M = int(lines[0])
    edges = []
    for ln in lines[1:]:
        u, v = ln.split()
        edges.append((int(u) - 1, int(v) - 1))
    return CommGraph(M, tuple(edges))


def write_graph(path, graph: CommGraph):
    Path(path).write_text(f"{graph.M}\n" + "".join(f"{u + 1} {v + 1}\n" for u, v in graph.edges))


# ----------------------------------------------------------- node state


@dataclass(frozen=True)
class CutMessage:
    sender: int
    cuts: tuple
    timestamp: float


@dataclass
class NodeState(bl.SolverState):
    """A solver state plus the node's identity and its pending messages."""

    node: int = 0
    inbox: list = field(default_factory=list)
    known: frozenset = frozenset()  # ids of every cut this node has ever held

    def copy(self) -> "NodeState":
        return replace(super().copy(), inbox=list(self.inbox))


def init_node(config, node, seed, own_budget_only=False) -> NodeState:
    """Node ``l`` starts from its own seed ``seed + l``.

    With ``own_budget_only`` the node generates power cuts for budget ``l``
    alone; otherwise for every budget its own iterate violates.
    """
    owned = (node,) if own_budget_only else None
    base = bl.init_state(config, seed + node, owned_budgets=owned, ids=cp.IdAllocator(node, config.M))
    return NodeState(**{f: getattr(base, f) for f in base.__dataclass_fields__}, node=node)


def node_local_step(node: NodeState, cfg: bl.SolverConfig, config, channels) -> NodeState:
    """One primal-dual step and, when due, the node's own cut management."""
    return bl.iterate(node, cfg, config, channels)


def _import_tag(sender, cut):
    return f"received({sender}):{cut.origin.rsplit(':', 1)[-1]}"


def exchange(node: NodeState, inbox, graph: CommGraph, timestamp=0.0):
    """Merge received cut sets into the node's set and emit its own snapshot.

    Returns ``(node, message, log)`` where ``log`` lists ``(sender, offered,
    imported)`` per merged message.  Imported cuts keep their id, enter with
    a zero dual and are tagged with the sender.  A cut the node already
    holds, or once held and dropped as inactive, is not imported again.
    """
    allowed = set(graph.in_neighbors(node.node))
    cuts = node.cuts.copy()
    imported = dict(node.imported)
    known = set(node.known) | set(cuts.ids)
    log = []
    for msg in sorted(inbox, key=lambda m: (m.timestamp, m.sender)):
        if msg.sender not in allowed:
            raise ProtocolError(f"node {node.node} received a message from non-in-neighbour {msg.sender}")
        count = 0
        for c in msg.cuts:
            if c.id in known:
                continue
            known.add(c.id)
            if cuts.contains(c):
                continue
            cuts.add(c.relabel(origin=_import_tag(msg.sender, c)), 0.0)
            imported[c.id] = node.t
            count += 1
        log.append((msg.sender, len(msg.cuts), count))
    node = replace(node, cuts=cuts, imported=imported, inbox=[], known=frozenset(known))
    return node, CutMessage(node.node, cuts.snapshot(), float(timestamp)), log


def consensus_gap(results) -> float:
    """``max_ij |F_i - F_j| / max(1, |F_1|)`` over the per-node objectives."""
    values = np.array([r.objective if hasattr(r, "objective") else float(r) for r in results], dtype=float)
    if values.size == 0:
        raise ValueError("consensus_gap needs at least one result")
    return float((values.max() - values.min()) / max(1.0, abs(values[0])))


# -------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Schedule:
    """When nodes step and how messages travel.

    * ``round-robin``: node ``l`` steps every ``1 / speeds[l]`` time units,
      staggered by node index; every message takes ``delay``.
    * ``randomized``: exponential step intervals with mean ``1 / speeds[l]``
      and message delays uniform on ``[0, 2 * delay]``.
    * ``adversarial-lag``: round-robin timing, messages take ``lag``, and
      the first ``drop_first`` messages on every edge are lost.
    """

    mode: str = "round-robin"
    speeds: tuple | None = None
    delay: float = 1.0
    lag: float = 50.0
    drop_first: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}; expected one of {SCHEDULE_MODES}")
        if self.speeds is not None:
            object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
            if any(not s > 0 for s in self.speeds):
                raise ValueError("speeds must be > 0")
        if not (np.isfinite(self.delay) and self.delay >= 0 and np.isfinite(self.lag) and self.lag >= 0):
            raise ValueError("delays must be finite and >= 0")
        if self.drop_first < 0:
            raise ValueError("drop_first must be >= 0")

    def speed(self, node):
        return 1.0 if self.speeds is None else self.speeds[node % len(self.speeds)]


class _Clock:
    """Seeded source of step intervals and message delays."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.rng = np.random.default_rng(schedule.seed)
        self.sent = {}

    def first_step(self, node, M):
        return node / (M * self.schedule.speed(node))

    def interval(self, node):
        mean = 1.0 / self.schedule.speed(node)
        if self.schedule.mode == "randomized":
            return float(self.rng.exponential(mean))
        return mean

    def delay(self, edge):
        """Delay of the next message on ``edge``, or ``None`` if it is dropped."""
        s = self.schedule
        count = self.sent.get(edge, 0)
        self.sent[edge] = count + 1
        if s.mode == "randomized":
            return float(self.rng.uniform(0.0, 2.0 * s.delay))
        if s.mode == "adversarial-lag":
            return None if count < s.drop_first else s.lag
        return s.delay


# ------------------------------------------------------------ simulation


@dataclass
class DistributedRun:
    results: list
    events: list
    nodes: list


def run_bladrbf(config, channels, graph: CommGraph, schedule: Schedule = Schedule(), cfg=bl.SolverConfig(),
                seed=0, evaluate=True, max_events=None, own_budget_only=False) -> DistributedRun:
    """Simulate the asynchronous distributed solver.

    Returns one :class:`~robustbf.centralized.SolveResult` per node together
    with the event log ``(logical_time, node, event, detail)``.

    ``own_budget_only`` restricts node ``l`` to cutting budget ``l``.  Every
    node optimises all beamformers, and a received power cut only bounds
    the receiver's block in the direction of the sender's iterate; since
    the rate is invariant to beam phases, the receiver's copy of a foreign
    block can then slide along that cut without bound.  The default lets
    each node cut every budget its own iterate violates.
    """
    channels.check(config)
    if graph.M != config.M:
        raise ValueError(f"graph has {graph.M} nodes but the network has {config.M} base stations")
    ok, cert = validate_graph(graph)
    if not ok:
        raise ValueError(f"communication graph is not strongly connected: node {cert[1]} unreachable from {cert[0]}")
    clock = _Clock(schedule)
    nodes = [init_node(config, l, seed, own_budget_only) for l in range(config.M)]
    done = [False] * config.M
    termination = ["max_iters"] * config.M
    log = []
    heap = []
    seq = 0

    def push(time, kind, node, payload=None):
        nonlocal seq
        heapq.heappush(heap, (time, seq, kind, node, payload))
        seq += 1

    for l in range(config.M):
        push(clock.first_step(l, config.M), "step", l)
    budget = max_events if max_events is not None else 4 * config.M * cfg.max_iters * (1 + len(graph.edges))
    processed = 0
    while heap and processed < budget:
        time, _, kind, l, payload = heapq.heappop(heap)
        processed += 1
        if kind == "deliver":
            nodes[l].inbox.append(payload)
            continue
        node = nodes[l]
        due = node.t % cfg.k_pre == 0
        n_events = len(node.events)
        try:
            node = node_local_step(node, cfg, config, channels)
        except NumericalError as exc:
            raise NumericalError(
                f"node {l} diverged: {exc.args[0]}",
                iteration=node.t,
                history=node.history,
                node=l,
                logical_time=time,
            ) from exc
        log.append((time, l, "step", str(node.t)))
        for ev, cid in node.events[n_events:]:
            log.append((time, l, ev, str(cid)))
        if due:
            node, msg, merged = exchange(node, node.inbox, graph, time)
            for sender, offered, imported in merged:
                log.append((time, l, "recv", f"from={sender} cuts={offered} new={imported}"))
            for j in graph.out_neighbors(l):
                d = clock.delay((l, j))
                if d is None:
                    log.append((time, l, "send", f"to={j} cuts={len(msg.cuts)} dropped"))
                else:
                    log.append((time, l, "send", f"to={j} cuts={len(msg.cuts)}"))
                    push(time + d, "deliver", j, msg)
        nodes[l] = node
        if bl.converged(node.history, cfg):
            done[l] = True
            termination[l] = "converged"
            log.append((time, l, "converged", str(node.t)))
        elif node.t >= cfg.max_iters:
            done[l] = True
        if not done[l]:
            push(time + clock.interval(l), "step", l)
        if all(done):
            break
    results = [
        bl.finish(nodes[l], cfg, config, channels, termination[l], seed + l, evaluate) for l in range(config.M)
    ]
    return DistributedRun(results, log, nodes)


def write_event_log(path, events):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["logical_time", "node", "event", "detail"])
        for time, node, kind, detail in events:
            writer.writerow([repr(float(time)), node, kind, detail])
