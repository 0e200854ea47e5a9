"""Command-line experiment runner.

Subcommands
-----------
``run``            solve every (SNR, epsilon, algorithm, seed, realization) cell
``sweep-snr``      the same over an SNR list, plus per-epsilon plot data
``check``          self-check batteries (gradients, convexity, cuts, consensus)
``dump-channels``  write the channel realizations of a config

SNR convention: ``P_m = 10**(snr_db / 10) * sigma2`` with ``sigma2 = 1``
unless configured, equal for every BS.  Rates are in the configured log
base (bits for base 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import centralized as bl
from . import cutting_planes as cp
from . import distributed as dist
from . import evaluator
from . import lower_solver as ls
from . import model
from .errors import ConfigurationError, NumericalError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SUMMARY_FIELDS = ("snr_db", "epsilon", "algorithm", "seed", "realization", "worst_case_wsr", "iters", "wallclock_s")
PLOT_FIELDS = ("snr_db", "median_wsr", "mean_wsr", "min_wsr", "max_wsr")
ALGORITHMS = ("blrbf", "bladrbf", "wmmse")
GRAPH_KINDS = ("ring", "complete", "random")

EXIT_OK, EXIT_FAIL, EXIT_DIVERGED = 0, 1, 2


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Validated experiment grid.

    Exactly one of ``snr_db`` (a list) and ``P`` is set; with ``snr_db``
    every cell uses ``P_m = 10**(snr/10) * sigma2``.
    """

    M: int
    N: int
    K: int
    snr_db: list | None = None
    P: float | None = None
    alpha: float | list = 1.0
    sigma2: float = 1.0
    log_base: float = 2.0
    epsilon: list = field(default_factory=lambda: [0.0])
    algorithms: list = field(default_factory=lambda: ["blrbf"])
    graph: str = "ring"
    schedule: str = "round-robin"
    solver: bl.SolverConfig = field(default_factory=bl.SolverConfig)
    wmmse_max_iters: int = 500
    wmmse_tol: float = 1e-9
    seeds: list = field(default_factory=lambda: [0])
    realizations: int = 1
    out: str = "results"
    base_dir: Path = field(default_factory=Path.cwd)

    def network(self, snr_db=None) -> model.NetworkConfig:
        P = self.P if snr_db is None else 10.0 ** (snr_db / 10.0) * self.sigma2
        return model.NetworkConfig(self.M, self.N, self.K, P, self.alpha, self.sigma2, self.log_base)

    def snr_points(self):
        """SNR values of the grid; ``None`` stands for the fixed-power cell."""
        return [None] if self.snr_db is None else list(self.snr_db)

    def comm_graph(self, seed=0) -> dist.CommGraph:
        if self.graph == "ring":
            return dist.CommGraph.ring(self.M)
        if self.graph == "complete":
            return dist.CommGraph.complete(self.M)
        if self.graph == "random":
            return dist.CommGraph.random_strongly_connected(self.M, seed)
        path = Path(self.graph)
        if not path.is_absolute():
            path = self.base_dir / path
        return dist.read_graph(path)


_SCHEMA = {
    "network": {"M": int, "N": int, "K": int, "snr_db": list, "P": float, "alpha": (float, list),
                "sigma2": float, "log_base": float},
    "uncertainty": {"epsilon": (float, list)},
    "algorithm": {"names": list, "graph": str, "schedule": str, "solver": dict, "alm": dict, "wmmse": dict},
    "run": {"seeds": list, "realizations": int, "out": str},
}
_SOLVER_TYPES = {f.name: type(f.default) for f in fields(bl.SolverConfig) if f.name != "inner"}
_ALM_KEYS = {"rho", "eta_delta", "eta_s", "eta_mu", "k_inner"}
_WMMSE_KEYS = {"max_iters", "tol"}


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_type(value, expected, path):
    kinds = expected if isinstance(expected, tuple) else (expected,)
    for kind in kinds:
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return
        if kind is float and _is_number(value):
            return
        if kind in (str, list, dict) and isinstance(value, kind):
            return
    names = " or ".join(k.__name__ for k in kinds)
    raise ConfigurationError(f"expected {names}, got {type(value).__name__}", path)


def _numbers(values, path, integer=False):
    out = []
    for i, x in enumerate(values):
        if integer:
            _check_type(x, int, f"{path}[{i}]")
            out.append(int(x))
        else:
            _check_type(x, float, f"{path}[{i}]")
            if not math.isfinite(x):
                raise ConfigurationError("must be finite", f"{path}[{i}]")
            out.append(float(x))
    return out


def _sub_table(table, allowed, path):
    for key in table:
        if key not in allowed:
            raise ConfigurationError("unknown key", f"{path}.{key}")
    return dict(table)


def parse_config(data: dict, base_dir=None) -> ExperimentConfig:
    """Validate a parsed TOML document; unknown keys are errors."""
    for section, body in data.items():
        if section not in _SCHEMA:
            raise ConfigurationError("unknown section", section)
        if not isinstance(body, dict):
            raise ConfigurationError("expected a table", section)
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigurationError("unknown key", f"{section}.{key}")
            _check_type(value, _SCHEMA[section][key], f"{section}.{key}")

    net = data.get("network")
    if net is None:
        raise ConfigurationError("missing section", "network")
    for key in ("M", "N", "K"):
        if key not in net:
            raise ConfigurationError("missing key", f"network.{key}")
    has_snr, has_p = "snr_db" in net, "P" in net
    if has_snr == has_p:
        raise ConfigurationError("give exactly one of snr_db and P", "network")
    kw = dict(M=net["M"], N=net["N"], K=net["K"])
    if has_snr:
        kw["snr_db"] = _numbers(net["snr_db"], "network.snr_db")
    else:
        kw["P"] = float(net["P"])
    if "alpha" in net:
        alpha = net["alpha"]
        kw["alpha"] = _numbers(alpha, "network.alpha") if isinstance(alpha, list) else float(alpha)
    for key in ("sigma2", "log_base"):
        if key in net:
            kw[key] = float(net[key])

    eps = data.get("uncertainty", {}).get("epsilon", [0.0])
    eps = _numbers(eps, "uncertainty.epsilon") if isinstance(eps, list) else [float(eps)]
    for i, e in enumerate(eps):
        if e < 0:
            raise ConfigurationError("must be >= 0", f"uncertainty.epsilon[{i}]")
    kw["epsilon"] = eps

    alg = data.get("algorithm", {})
    names = alg.get("names", ["blrbf"])
    for i, name in enumerate(names):
        if name not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {name!r}, expected one of {ALGORITHMS}", f"algorithm.names[{i}]")
    kw["algorithms"] = list(names)
    if "graph" in alg:
        kw["graph"] = alg["graph"]
    if alg.get("schedule", "round-robin") not in dist.SCHEDULE_MODES:
        raise ConfigurationError(f"expected one of {dist.SCHEDULE_MODES}", "algorithm.schedule")
    kw["schedule"] = alg.get("schedule", "round-robin")

    solver = _sub_table(alg.get("solver", {}), _SOLVER_TYPES, "algorithm.solver")
    alm = _sub_table(alg.get("alm", {}), _ALM_KEYS, "algorithm.alm")
    wmmse = _sub_table(alg.get("wmmse", {}), _WMMSE_KEYS, "algorithm.wmmse")
    for key, value in solver.items():
        kind = _SOLVER_TYPES[key]
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigurationError("expected bool", f"algorithm.solver.{key}")
        else:
            _check_type(value, kind, f"algorithm.solver.{key}")
    for key, value in alm.items():
        _check_type(value, int if key == "k_inner" else float, f"algorithm.alm.{key}")
    try:
        inner = ls.AlmConfig(**alm)
    except ValueError as exc:
        raise ConfigurationError(str(exc), "algorithm.alm") from None
    try:
        kw["solver"] = bl.SolverConfig(inner=inner, **solver)
    except ValueError as exc:
        raise ConfigurationError(str(exc), "algorithm.solver") from None
    if "max_iters" in wmmse:
        _check_type(wmmse["max_iters"], int, "algorithm.wmmse.max_iters")
        kw["wmmse_max_iters"] = wmmse["max_iters"]
    if "tol" in wmmse:
        _check_type(wmmse["tol"], float, "algorithm.wmmse.tol")
        kw["wmmse_tol"] = float(wmmse["tol"])

    run = data.get("run", {})
    if "seeds" in run:
        kw["seeds"] = _numbers(run["seeds"], "run.seeds", integer=True)
    if "realizations" in run:
        if run["realizations"] < 0:
            raise ConfigurationError("must be >= 0", "run.realizations")
        kw["realizations"] = run["realizations"]
    if "out" in run:
        kw["out"] = run["out"]
    kw["base_dir"] = Path(base_dir) if base_dir is not None else Path.cwd()

    cfg = ExperimentConfig(**kw)
    try:
        for snr in cfg.snr_points():
            cfg.network(snr)
    except ConfigurationError as exc:
        raise ConfigurationError(exc.args[0], f"network.{exc.key_path}" if exc.key_path else "network") from None
    if "bladrbf" in cfg.algorithms:
        if cfg.graph not in GRAPH_KINDS and not (cfg.base_dir / cfg.graph).exists() and not Path(cfg.graph).exists():
            raise ConfigurationError(f"graph file {cfg.graph!r} not found", "algorithm.graph")
        graph = cfg.comm_graph()
        if graph.M != cfg.M:
            raise ConfigurationError(f"graph has {graph.M} nodes, network has M = {cfg.M}", "algorithm.graph")
        ok, cert = dist.validate_graph(graph)
        if not ok:
            raise ConfigurationError(
                f"graph is not strongly connected: node {cert[1]} is unreachable from node {cert[0]}",
                "algorithm.graph",
            )
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    return parse_config(data, base_dir=path.parent)


# ---------------------------------------------------------------- cells


def channel_seed(seed, realization) -> int:
    return int(np.random.SeedSequence([int(seed), int(realization)]).generate_state(1)[0])


def realization_channels(cfg: ExperimentConfig, seed, realization, epsilon) -> model.ChannelSet:
    """One Rayleigh draw per (seed, realization), shared by every SNR and epsilon.

    The draw serves as the estimate and ``epsilon`` sets the ball radius
    around it, so sweeps over epsilon compare nested uncertainty sets.
    """
    dims = model.NetworkConfig(cfg.M, cfg.N, cfg.K)
    base = model.generate_rayleigh_channels(dims, channel_seed(seed, realization), 0.0)
    return base.with_radii(epsilon)


@dataclass
class CellResult:
    row: dict
    paths: list
    diverged: bool = False


def _fmt(x):
    return repr(float(x))


def _cell_name(algorithm, snr, epsilon, seed, realization):
    snr_txt = "P" if snr is None else f"{snr:g}"
    return f"{algorithm}_snr{snr_txt}_eps{epsilon:g}_seed{seed}_r{realization}"


def run_cell(cfg: ExperimentConfig, algorithm, snr, epsilon, seed, realization, cell_dir: Path,
             timing=True) -> CellResult:
    """Solve one grid cell and write its history (and event log).

    With ``timing`` off the ``wallclock_s`` field is left empty so that
    repeated runs produce byte-identical summaries.
    """
    net = cfg.network(snr)
    channels = realization_channels(cfg, seed, realization, epsilon)
    cell_dir.mkdir(parents=True, exist_ok=True)
    name = _cell_name(algorithm, snr, epsilon, seed, realization)
    row = {
        "snr_db": "" if snr is None else _fmt(snr),
        "epsilon": _fmt(epsilon),
        "algorithm": algorithm,
        "seed": str(seed),
        "realization": str(realization),
    }
    paths = []
    start = time.perf_counter()

    def clock():
        return f"{time.perf_counter() - start:.3f}" if timing else ""
    try:
        if algorithm == "blrbf":
            res = bl.run_blrbf(net, channels, cfg.solver, seed=seed)
            value, iters = res.objective, res.iterations
            path = cell_dir / f"{name}_history.csv"
            bl.write_history(path, res.history)
            paths.append(path)
        elif algorithm == "bladrbf":
            graph = cfg.comm_graph(seed)
            schedule = dist.Schedule(mode=cfg.schedule, seed=seed)
            run = dist.run_bladrbf(net, channels, graph, schedule, cfg.solver, seed=seed)
            # the least favourable node is the headline
            value = min(r.objective for r in run.results)
            iters = max(r.iterations for r in run.results)
            for l, r in enumerate(run.results):
                path = cell_dir / f"{name}_node{l}_history.csv"
                bl.write_history(path, r.history)
                paths.append(path)
            path = cell_dir / f"{name}_events.csv"
            dist.write_event_log(path, run.events)
            paths.append(path)
        else:
            res = evaluator.wmmse_baseline(net, channels.perfect(), cfg.wmmse_max_iters, cfg.wmmse_tol, seed=seed)
            rep = bl.report(net, channels, res.V, cfg.solver, seed)
            value, iters = rep.value, res.iterations
            path = cell_dir / f"{name}_history.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "f"])
                for t, f in enumerate(res.history):
                    writer.writerow([t, _fmt(f)])
            paths.append(path)
    except NumericalError as exc:
        print(f"cell {name} diverged: {exc}", file=sys.stderr)
        if exc.history:
            path = cell_dir / f"{name}_history.csv"
            bl.write_history(path, exc.history)
            paths.append(path)
        row.update(worst_case_wsr="nan", iters=str(exc.iteration if exc.iteration is not None else ""),
                   wallclock_s=clock())
        return CellResult(row, paths, diverged=True)
    row.update(worst_case_wsr=_fmt(value), iters=str(iters), wallclock_s=clock())
    return CellResult(row, paths)


def grid(cfg: ExperimentConfig):
    for snr in cfg.snr_points():
        for eps in cfg.epsilon:
            for algorithm in cfg.algorithms:
                for seed in cfg.seeds:
                    for r in range(cfg.realizations):
                        yield algorithm, snr, eps, seed, r


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SUMMARY_FIELDS})


def units_note(cfg: ExperimentConfig) -> str:
    unit = "bits" if cfg.log_base == 2.0 else ("nats" if abs(cfg.log_base - math.e) < 1e-12 else f"log base {cfg.log_base:g}")
    return (
        f"P_m = 10^(snr_db/10) * sigma2 with sigma2 = {cfg.sigma2:g} for every BS; "
        f"WSR in {unit}/s/Hz (log base {cfg.log_base:g})"
    )


def write_plot_data(out_dir: Path, rows, cfg: ExperimentConfig):
    """One ``wsr_vs_snr_<eps>.csv`` per algorithm and epsilon; median is the headline."""
    paths = []
    for algorithm in cfg.algorithms:
        for eps in cfg.epsilon:
            sub = out_dir / "plot_data" / algorithm
            sub.mkdir(parents=True, exist_ok=True)
            path = sub / f"wsr_vs_snr_{eps:g}.csv"
            with open(path, "w", newline="") as fh:
                fh.write(f"# {units_note(cfg)}\n")
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(PLOT_FIELDS)
                for snr in cfg.snr_points():
                    vals = np.array([
                        float(r["worst_case_wsr"]) for r in rows
                        if r["algorithm"] == algorithm and r["epsilon"] == _fmt(eps)
                        and r["snr_db"] == ("" if snr is None else _fmt(snr))
                    ])
                    vals = vals[np.isfinite(vals)]
                    if vals.size == 0:
                        stats = ["nan"] * 4
                    else:
                        stats = [_fmt(np.median(vals)), _fmt(np.mean(vals)), _fmt(vals.min()), _fmt(vals.max())]
                    writer.writerow(["" if snr is None else _fmt(snr)] + stats)
            paths.append(path)
    return paths


def execute(cfg: ExperimentConfig, out_dir: Path, plot=False, echo=print, timing=True) -> int:
    """Run the whole grid; returns the exit code."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cell_dir = out_dir / "cells"
    rows, diverged = [], False
    for algorithm, snr, eps, seed, r in grid(cfg):
        res = run_cell(cfg, algorithm, snr, eps, seed, r, cell_dir, timing)
        rows.append(res.row)
        diverged |= res.diverged
        for path in res.paths:
            echo(str(path))
    summary = out_dir / "summary.csv"
    write_summary(summary, rows)
    echo(str(summary))
    if plot:
        for path in write_plot_data(out_dir, rows, cfg):
            echo(str(path))
    print(units_note(cfg), file=sys.stderr)
    return EXIT_DIVERGED if diverged else EXIT_OK


# ---------------------------------------------------------------- checks


def _emit(record, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(record, sort_keys=True) + "\n")
    stream.flush()


def _rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_gradients(seed=0, instances=5):
    """Analytic gradients of the WSR against central differences."""
    rng = np.random.default_rng(seed)
    shapes = [(2, 2, 2), (2, 3, 1), (3, 2, 2), (1, 2, 3), (3, 1, 1)]
    for i in range(instances):
        M, N, K = shapes[i % len(shapes)]
        net = model.NetworkConfig(M, N, K, P=10.0 ** rng.uniform(0, 2))
        ch = model.generate_rayleigh_channels(net, int(rng.integers(1 << 30)), 0.1)
        V = model.random_beamformers(net, rng)
        D = model.pack_errors(net, model.sample_error_array(ch.radii, N, rng))
        gV = model.grad_wsr_V(net, ch, V, D)
        gD = model.grad_wsr_delta(net, ch, V, D)
        fdV = evaluator.finite_diff_grad(lambda v: model.wsr(net, ch, v, D), V)
        fdD = evaluator.finite_diff_grad(lambda d: model.wsr(net, ch, V, d), D)
        errs = {"V": _rel_err(gV, fdV), "delta": _rel_err(gD, fdD)}
        yield {"check": f"instance {i}", "shape": [M, N, K], "rel_err": errs,
               "passed": max(errs.values()) <= 1e-5}


def _convexity_instance(seed=0, pairs=20, k_inner=1000, flip=False):
    net = model.NetworkConfig(2, 2, 1, P=10.0)
    ch = model.generate_rayleigh_channels(net, seed, 0.1)
    inner = ls.AlmConfig(k_inner=k_inner)
    sign = -1.0 if flip else 1.0

    def g(x):
        V, D = x[: net.n_v], x[net.n_v:]
        return sign * float(ls.g_value(D, ls.phi(net, ch, V, inner)))

    rng = np.random.default_rng(seed + 1)
    out = []
    for _ in range(pairs):
        pts = []
        for _ in range(2):
            V = model.random_beamformers(net, rng, power_fraction=rng.uniform(0.25, 1.0))
            D = model.pack_errors(net, model.sample_error_array(ch.radii, net.N, rng))
            pts.append(np.concatenate([V, D]))
        out.append(tuple(pts))
    return g, out


def check_convexity(seed=0, pairs=20, flip=False):
    """Chord test of ``g`` on a single-user-per-cell instance."""
    g, pair_list = _convexity_instance(seed, pairs, flip=flip)
    rep = evaluator.convexity_probe(g, pair_list)
    rec = {"check": "chord inequality", "checks": rep.checks, "violations": rep.violations,
           "worst_excess": rep.worst, "passed": rep.ok}
    if not rep.ok:
        rec["worst_location"] = {"pair": rep.worst_location[0], "t": rep.worst_location[1]}
    yield rec


def sample_feasible(config, channels, count, eps_tol, rng, inner):
    """Points with every budget met and ``g <= eps_tol`` under ``inner``."""
    shape = (count,) + config.beam_shape
    W = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    norms = np.sqrt(np.sum(np.abs(W) ** 2, axis=(-2, -1)))
    dim = 2 * config.N * config.K
    radius = np.sqrt(config.P) * rng.uniform(size=(count, config.M)) ** (1.0 / dim)
    W = W * (radius / norms)[..., None, None]
    V = model.pack_beamformers(config, W)
    init = ls.initial_state(config, channels)
    batch = ls.AlmState(*(np.broadcast_to(x, (count,) + x.shape) for x in (init.delta_prime, init.s, init.mu)))
    phis = ls.phi(config, channels, V, inner, batch)
    direction = rng.standard_normal(phis.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = np.sqrt(eps_tol) * rng.uniform(size=(count, 1)) ** (1.0 / phis.shape[1])
    return V, phis + r * direction


def check_cuts(seed=0, iters=200, samples=1000):
    """Every harvested cut separates its query point and admits sampled feasible points."""
    net = model.NetworkConfig(2, 2, 1, P=10.0)
    ch = model.generate_rayleigh_channels(net, seed, 0.1)
    solver = bl.SolverConfig(max_iters=iters)
    harvest = bl.harvest_cuts(net, ch, solver, seed)
    V, D = sample_feasible(net, ch, samples, solver.eps_tol, np.random.default_rng(seed + 7),
                           replace(solver.inner, k_inner=1000))
    for cut, Vq, Dq in harvest:
        at_query = cp.evaluate_cut(cut, Vq, Dq)
        worst = float(np.max(cp.evaluate_cut(cut, V, D)))
        yield {"check": f"cut {cut.id}", "origin": cut.origin, "query_residual": at_query,
               "worst_feasible_residual": worst, "passed": bool(at_query > 0 and worst <= 1e-9)}


def check_consensus(seed=0, graph=None, schedule="round-robin"):
    """Distributed run on a small instance; the per-node values must agree."""
    if graph is None:
        graph = dist.CommGraph.ring(3)
    ok, cert = dist.validate_graph(graph)
    if not ok:
        yield {"check": "graph", "passed": False, "certificate": {"from": cert[0], "unreachable": cert[1]},
               "reason": "communication graph is not strongly connected"}
        return
    net = model.NetworkConfig(graph.M, 2, 1, P=1.0)
    ch = model.generate_rayleigh_channels(net, seed, 0.0)
    run = dist.run_bladrbf(net, ch, graph, dist.Schedule(mode=schedule, seed=seed), bl.SolverConfig(), seed=seed)
    gap = dist.consensus_gap(run.results)
    yield {"check": "consensus gap", "values": [r.objective for r in run.results], "gap": gap,
           "passed": gap <= 1e-3}


SUITES = {
    "gradients": check_gradients,
    "convexity": check_convexity,
    "cuts": check_cuts,
    "consensus": check_consensus,
}


def run_check(suite, stream=None, **kwargs) -> int:
    passed = True
    count = 0
    for rec in SUITES[suite](**kwargs):
        rec = {"suite": suite, **rec}
        passed &= bool(rec["passed"])
        count += 1
        _emit(rec, stream)
    _emit({"suite": suite, "check": "summary", "checks": count, "passed": passed}, stream)
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- main


def _snr_list(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustbf", description="Robust multi-cell beamforming experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="solve every cell of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--seed", type=int, help="single seed (overrides run.seeds)")
    p.add_argument("--no-timing", action="store_true", help="leave wallclock_s empty (byte-reproducible summary)")

    p = sub.add_parser("sweep-snr", help="SNR sweep with plot data")
    p.add_argument("--config", required=True)
    p.add_argument("--snr", required=True, type=_snr_list, help="comma-separated SNR values in dB")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-timing", action="store_true")

    p = sub.add_parser("check", help="self-check batteries (JSON lines on stdout)")
    p.add_argument("suite", choices=sorted(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph", help="graph file for the consensus suite")
    p.add_argument("--schedule", choices=dist.SCHEDULE_MODES, default="round-robin")
    p.add_argument("--flip-sign", action="store_true", help="negate g (negative control of the convexity suite)")

    p = sub.add_parser("dump-channels", help="write the channel realizations of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    return parser


def _resolve_out(cfg: ExperimentConfig, override):
    if override is not None:
        return Path(override)
    out = Path(cfg.out)
    return out if out.is_absolute() else cfg.base_dir / out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            kwargs = {"seed": args.seed}
            if args.suite == "consensus":
                kwargs["schedule"] = args.schedule
                if args.graph:
                    kwargs["graph"] = dist.read_graph(args.graph)
            if args.suite == "convexity":
                kwargs["flip"] = args.flip_sign
            return run_check(args.suite, **kwargs)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seeds=[args.seed])
        out = _resolve_out(cfg, getattr(args, "out", None))
        if args.command == "run":
            return execute(cfg, out, timing=not args.no_timing)
        if args.command == "sweep-snr":
            cfg = replace(cfg, snr_db=list(args.snr), P=None)
            for snr in cfg.snr_points():
                cfg.network(snr)
            return execute(cfg, out, plot=True, timing=not args.no_timing)
        return dump_channels(cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def dump_channels(cfg: ExperimentConfig, out: Path, echo=print) -> int:
    """Estimated and true channels per (seed, realization, epsilon)."""
    target = out / "channels"
    target.mkdir(parents=True, exist_ok=True)
    net = cfg.network(cfg.snr_points()[0])
    for seed in cfg.seeds:
        for r in range(cfg.realizations):
            for eps in cfg.epsilon:
                ch = realization_channels(cfg, seed, r, eps)
                stem = f"seed{seed}_r{r}_eps{eps:g}"
                for which in ("est", "true"):
                    path = model.write_channels(target / f"{stem}_{which}.txt", net, ch, which)
                    echo(str(path))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
