"""Centralized bilevel cutting-plane solver (BLRBF).

Simultaneous primal-dual gradient iterations on the Lagrangian of the
cut-approximated problem, with cut management every ``k_pre`` iterations:
inactive cuts are dropped, the worst-case error is refreshed, violated power
budgets and a violated coupling constraint each contribute one new cut.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import cutting_planes as cp
from . import evaluator
from . import lower_solver as ls
from . import model
from .errors import NumericalError

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("t", "f", "lagrangian", "max_power_violation", "g", "num_cuts")


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes, cut-management period and stopping rule.

    The primal step descends the augmented Lagrangian of the cut set, where
    each cut enters with penalty ``rho``: a plain linear cut gives the
    primal-dual iteration no damping along the cut normal when the objective
    is flat there, and the penalty supplies that curvature.  ``rho = 0``
    recovers the plain Lagrangian.

    The step sizes are tuning knobs.  With ``scaled_steps`` they are measured
    against the curvature of the objective: with the interference floor
    ``I = min(sigma2) + max(P) * max(eps)**2`` the beamformer step is
    multiplied by ``I / min(sigma2)`` and the error step by
    ``I / (min(sigma2) + max(P))``.  Power-cut residuals are measured in
    units of power, so their dual steps and penalties are divided by
    ``P_m**2``.

    Constant steps leave the iterate circling: the rate is invariant to
    beam phases, so it slides along the faces of the tangent power cuts
    and never settles.  After ``decay_start`` iterations every step is
    multiplied by ``1 / (1 + (t - decay_start) / step_decay)``;
    ``step_decay = 0`` keeps the steps constant.
    """

    eta_v: float = 5e-2
    eta_delta: float = 1e-3
    eta_lambda: float = 1.0
    rho: float = 1.0
    k_pre: int = 20
    eps_tol: float = 1e-4
    max_iters: int = 3000
    conv_tol: float = 1e-6
    conv_window: int = 50
    inner: ls.AlmConfig = ls.AlmConfig()
    reset_delta: bool = False
    scaled_steps: bool = True
    report_starts: int = evaluator.HEADLINE_STARTS
    report_k_inner: int = evaluator.HEADLINE_K_INNER
    report_samples: int = 256
    step_decay: float = 100.0
    decay_start: int = 1000

    def __post_init__(self):
        for name in ("eta_v", "eta_delta", "eta_lambda", "rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.k_pre < 1:
            raise ValueError("k_pre must be >= 1")
        if not self.eps_tol > 0:
            raise ValueError("eps_tol must be > 0")
        if self.conv_window < 2:
            raise ValueError("conv_window must be >= 2")
        if self.step_decay < 0 or self.decay_start < 0:
            raise ValueError("step_decay and decay_start must be >= 0")

    def steps(self, config, channels):
        """Effective ``(eta_v, eta_delta)`` for a network and uncertainty level."""
        if not self.scaled_steps:
            return self.eta_v, self.eta_delta
        eps = float(np.max(channels.radii)) if np.size(channels.radii) else 0.0
        noise, power = float(np.min(config.sigma2)), float(np.max(config.P))
        floor = noise + power * eps ** 2
        return self.eta_v * floor / noise, self.eta_delta * floor / (noise + power)

    def cut_scales(self, config, cuts):
        """Per-cut multiplier of ``eta_lambda`` and ``rho``; ``1 / P_m**2`` for power cuts of BS ``m``."""
        scales = np.ones(len(cuts))
        if self.scaled_steps:
            for i, c in enumerate(cuts):
                m = power_budget_of(c)
                if m is not None:
                    scales[i] /= float(config.P[m]) ** 2
        return scales

    def decay(self, t) -> float:
        """Step multiplier at iteration ``t``."""
        if self.step_decay <= 0:
            return 1.0
        return 1.0 / (1.0 + max(t - self.decay_start, 0) / self.step_decay)


def power_budget_of(cut):
    """BS index of a power cut (also after it was forwarded), else ``None``."""
    tag = cut.origin.rsplit(":", 1)[-1]
    if tag.startswith("power(") and tag.endswith(")"):
        return int(tag[6:-1])
    return None


class HistoryRecord(NamedTuple):
    t: int
    f: float
    lagrangian: float
    max_power_violation: float
    g: float
    num_cuts: int


@dataclass
class SolverState:
    V: np.ndarray
    delta: np.ndarray
    cuts: cp.CutSet
    t: int = 0
    phi_cache: np.ndarray | None = None
    history: list = field(default_factory=list)
    new_ids: cp.IdAllocator = field(default_factory=cp.IdAllocator)
    owned_budgets: tuple | None = None  # BS indices whose power cuts this solver generates
    events: list = field(default_factory=list)
    imported: dict = field(default_factory=dict)  # cut id -> local t at import

    def copy(self) -> "SolverState":
        return replace(
            self,
            cuts=self.cuts.copy(),
            history=list(self.history),
            events=list(self.events),
            imported=dict(self.imported),
        )


@dataclass
class SolveResult:
    """Outcome of a solve.

    ``V_final`` is the last iterate shrunk onto the power budgets (the
    iterate itself may overshoot a budget by the cut tolerance); the raw
    iterate is kept as ``V_iterate``.
    """

    V_final: np.ndarray
    delta_final: np.ndarray
    objective: float
    history: list
    termination: str
    iterations: int
    report: evaluator.WorstCaseReport | None = None
    events: list = field(default_factory=list)
    V_iterate: np.ndarray | None = None


def init_state(config, seed, owned_budgets=None, ids=None) -> SolverState:
    """Random half-power beamformers, zero error iterate and no cuts."""
    V = model.random_beamformers(config, np.random.default_rng(seed), power_fraction=0.5)
    return SolverState(
        V=V,
        delta=np.zeros(config.n_delta),
        cuts=cp.CutSet(),
        new_ids=ids if ids is not None else cp.IdAllocator(),
        owned_budgets=owned_budgets,
    )


def _cut_terms(duals, r, penalty):
    """Effective multipliers and Lagrangian contribution of the cuts.

    With ``penalty`` zero this is the plain ``duals @ r``; otherwise each cut
    enters through the augmented term
    ``(max(0, lam + c r)**2 - lam**2) / (2 c)``, whose gradient is
    ``max(0, lam + c r)`` times the cut normal.
    """
    if not np.any(penalty):
        return duals, float(duals @ r)
    pen = np.where(penalty > 0, penalty, 1.0)
    eff = np.where(penalty > 0, np.maximum(duals + penalty * r, 0.0), duals)
    value = np.where(penalty > 0, (eff ** 2 - duals ** 2) / (2.0 * pen), duals * r)
    return eff, float(np.sum(value))


def lagrangian(state: SolverState, cfg: SolverConfig, config, channels) -> float:
    """``-f(V, Delta)`` plus the (augmented) cut terms."""
    f = model.wsr(config, channels, state.V, state.delta)
    r = state.cuts.residuals(state.V, state.delta)
    penalty = cfg.rho * cfg.cut_scales(config, state.cuts)
    return -f + _cut_terms(state.cuts.duals, r, penalty)[1]


def _current_g(state):
    if state.phi_cache is None:
        return float("nan")
    return float(ls.g_value(state.delta, state.phi_cache))


def primal_dual_step(state: SolverState, cfg: SolverConfig, config, channels) -> SolverState:
    """One Jacobi update of ``V``, ``Delta`` and the duals from the incoming state."""
    eta_v, eta_d = cfg.steps(config, channels)
    decay = cfg.decay(state.t)
    eta_v, eta_d = decay * eta_v, decay * eta_d
    f, gV, gD = model.wsr_and_grads(config, channels, state.V, state.delta)
    cuts = state.cuts
    A, B, kappa = cuts.matrices()
    if A is None:
        r = np.zeros(0)
        L = -f
        grad_v, grad_d = -gV, -gD
    else:
        scales = cuts.cached("scales", lambda: cfg.cut_scales(config, cuts))
        r = A @ state.V + B @ state.delta + kappa
        eff, terms = _cut_terms(cuts.duals, r, cfg.rho * scales)
        L = -f + terms
        grad_v = -gV + eff @ A
        grad_d = -gD + eff @ B
    viol = float(np.max(model.power_violation(config, state.V)))
    if not (np.isfinite(f) and np.isfinite(L) and np.isfinite(viol)):
        raise NumericalError("objective became non-finite", iteration=state.t, history=state.history)
    state.history.append(HistoryRecord(state.t, f, L, viol, _current_g(state), len(cuts)))

    V = state.V - eta_v * grad_v
    delta = state.delta - eta_d * grad_d
    duals = cuts.duals
    if len(cuts):
        duals = np.maximum(duals + decay * cfg.eta_lambda * scales * r, 0.0)
    finite = np.all(np.isfinite(V)) and np.all(np.isfinite(delta)) and np.all(np.isfinite(duals))
    if not (finite and np.all(np.isfinite(model.block_power(config, V)))):
        raise NumericalError("primal-dual iterate diverged", iteration=state.t, history=state.history)
    return replace(state, V=V, delta=delta, cuts=cuts.with_duals(duals), t=state.t + 1)


def _protected_imports(state, cfg):
    """Imported cuts that have not yet had a chance to become active."""
    if not state.imported:
        return set()
    horizon = 5 * cfg.k_pre
    return {cid for cid, t0 in state.imported.items() if state.t - t0 < horizon}


def _add_power_cuts(state, cuts, config):
    budgets = range(config.M) if state.owned_budgets is None else state.owned_budgets
    viol = model.power_violation(config, state.V)
    for m in budgets:
        if viol[m] > 0:
            cut = cp.power_cut(config, state.V, state.delta, m, state.new_ids())
            cuts.add(cut, 0.0)
            state.events.append(("add_power", cut.id))


def manage_cuts(state: SolverState, cfg: SolverConfig, config, channels) -> SolverState:
    """Drop inactive cuts, refresh the worst case and add violated-constraint cuts."""
    state = replace(state, events=list(state.events))
    before = set(state.cuts.ids)
    cuts = cp.drop_inactive(state.cuts, protect=_protected_imports(state, cfg))
    dropped = before - set(cuts.ids)
    for cid in sorted(dropped):
        state.events.append(("drop", cid))
        state.imported.pop(cid, None)
    # imports that carried a positive dual become ordinary knowledge
    for c, lam in zip(cuts.cuts, cuts.duals):
        if lam > cp.INACTIVE_DUAL:
            state.imported.pop(c.id, None)

    inner = cfg.inner.at(state.V)
    init = ls.initial_state(config, channels, state.phi_cache)
    phi_v = ls.phi(config, channels, state.V, inner, init)

    _add_power_cuts(state, cuts, config)

    g = float(ls.g_value(state.delta, phi_v))
    if g > cfg.eps_tol:
        grad = ls.grad_g(config, channels, state.V, state.delta, inner, init, phi_of_v=phi_v)
        cut = cp.g_cut(state.V, state.delta, g, grad, cfg.eps_tol, state.new_ids())
        if cut.degenerate:
            logger.warning("skipping degenerate g-cut at t=%d", state.t)
        else:
            cuts.add(cut, 0.0)
            state.events.append(("add_g", cut.id))

    delta = phi_v.copy() if cfg.reset_delta else state.delta
    return replace(state, cuts=cuts, phi_cache=phi_v, delta=delta)


def converged(history, cfg: SolverConfig) -> bool:
    """Total variation of the trailing Lagrangian window below ``conv_tol``."""
    if len(history) < cfg.conv_window:
        return False
    L = np.array([h.lagrangian for h in history[-cfg.conv_window :]])
    return float(np.sum(np.abs(np.diff(L)))) < cfg.conv_tol


def iterate(state, cfg, config, channels) -> SolverState:
    """One outer iteration: a primal-dual step and, when due, cut management."""
    due = state.t % cfg.k_pre == 0
    state = primal_dual_step(state, cfg, config, channels)
    if due:
        state = manage_cuts(state, cfg, config, channels)
    return state


def report(config, channels, V, cfg: SolverConfig, seed=0) -> evaluator.WorstCaseReport:
    return evaluator.worst_case_wsr(
        config,
        channels,
        V,
        starts=cfg.report_starts,
        samples=cfg.report_samples,
        inner_cfg=replace(cfg.inner, k_inner=cfg.report_k_inner, taylor_point=None),
        seed=seed,
    )


def finish(state, cfg, config, channels, termination, seed=0, evaluate=True) -> SolveResult:
    """Package the final state; the worst case is evaluated at the budget-feasible beamformers."""
    V = model.scale_to_budget(config, state.V)
    rep = report(config, channels, V, cfg, seed) if evaluate else None
    return SolveResult(
        V_final=V,
        delta_final=state.delta,
        objective=rep.value if evaluate else float("nan"),
        history=state.history,
        termination=termination,
        iterations=state.t,
        report=rep,
        events=state.events,
        V_iterate=state.V,
    )


def run_blrbf(config, channels, cfg: SolverConfig = SolverConfig(), seed=0, evaluate=True) -> SolveResult:
    """Solve the robust beamforming problem from a seeded random start."""
    channels.check(config)
    state = init_state(config, seed)
    termination = "max_iters"
    try:
        while state.t < cfg.max_iters:
            state = iterate(state, cfg, config, channels)
            if converged(state.history, cfg):
                termination = "converged"
                break
    except NumericalError as exc:
        exc.history = state.history
        raise
    return finish(state, cfg, config, channels, termination, seed, evaluate)


def harvest_cuts(config, channels, cfg: SolverConfig = SolverConfig(), seed=0):
    """Run the solver and return ``(cut, V_query, delta_query)`` for every generated cut."""
    state = init_state(config, seed)
    out = []
    while state.t < cfg.max_iters:
        known = set(state.cuts.ids)
        state = iterate(state, cfg, config, channels)
        for cut in state.cuts:
            if cut.id not in known:
                out.append((cut, state.V.copy(), state.delta.copy()))
    return out


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec.t] + [repr(float(x)) for x in rec[1:5]] + [rec.num_cuts])
