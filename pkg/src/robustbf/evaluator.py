"""Independent measurement tools.

* :func:`worst_case_wsr` -- multi-start inner minimisation cross-checked by
  Monte-Carlo sampling of the error balls.
* :func:`wmmse_baseline` -- the perfect-CSI WMMSE block-coordinate ascent.
* :func:`finite_diff_grad` and :func:`convexity_probe` -- numerical checks
  backing the test batteries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lower_solver as ls
from . import model
from .errors import NumericalError

HEADLINE_STARTS = 8
HEADLINE_K_INNER = 500


@dataclass(frozen=True)
class WorstCaseReport:
    wsr_alm: float
    wsr_sampling: float
    delta_argmin: np.ndarray
    starts: int
    samples: int

    @property
    def value(self) -> float:
        """Headline worst-case WSR."""
        return self.wsr_alm


def _start_states(config, channels, starts, rng):
    inits = [np.zeros(config.n_delta)]
    for _ in range(starts - 1):
        D = model.sample_error_array(channels.radii, config.N, rng)
        inits.append(model.pack_errors(config, D))
    return ls.initial_state(config, channels, np.array(inits))


def worst_case_wsr(
    config,
    channels,
    V,
    starts=HEADLINE_STARTS,
    samples=256,
    inner_cfg: ls.AlmConfig | None = None,
    seed=0,
) -> WorstCaseReport:
    """Worst-case WSR of ``V`` over the error balls.

    The first ALM start is the nominal channel, the rest are uniform in-ball
    points; all starts run as one batch.  ``wsr_sampling`` is the minimum
    over ``samples`` uniform draws.
    """
    V = np.asarray(V, dtype=float)
    if inner_cfg is None:
        inner_cfg = ls.AlmConfig(k_inner=HEADLINE_K_INNER)
    nominal = model.wsr(config, channels, V)
    if not np.any(channels.radii > 0):
        return WorstCaseReport(nominal, nominal, np.zeros(config.n_delta), starts, samples)
    start_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    init = _start_states(config, channels, max(int(starts), 1), np.random.default_rng(start_seq))
    phis = ls.phi(config, channels, V, inner_cfg.at(V), init)
    values = model.wsr(config, channels, V, phis)
    best = int(np.argmin(values))
    wsr_alm = float(values[best])
    if not np.isfinite(wsr_alm):
        raise NumericalError("worst-case evaluation produced a non-finite WSR")
    wsr_sampling = np.inf
    if samples > 0:
        D = model.sample_error_array(channels.radii, config.N, np.random.default_rng(sample_seq), size=samples)
        wsr_sampling = float(np.min(model.wsr(config, channels, V, model.pack_errors(config, D))))
    return WorstCaseReport(wsr_alm, wsr_sampling, phis[best], int(starts), int(samples))


# ------------------------------------------------------------------ WMMSE


@dataclass
class WmmseResult:
    V: np.ndarray
    history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def _beam_update(A, rhs, P):
    """Solve ``(A + mu I) v = rhs`` with the smallest ``mu >= 0`` meeting ``||v||^2 <= P``.

    ``rhs`` holds one column per user; ``A`` is Hermitian PSD.
    """
    lam, Q = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0)
    c2 = np.sum(np.abs(Q.conj().T @ rhs) ** 2, axis=1)

    def power(mu):
        with np.errstate(divide="ignore"):
            return float(np.sum(c2 / (lam + mu) ** 2))

    tiny = 1e-12 * max(lam.max(), 1.0)
    if lam.min() > tiny and power(0.0) <= P:
        mu = 0.0
    else:
        lo, hi = 0.0, max(1.0, np.sqrt(c2.sum() / P))
        while power(hi) > P:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if power(mid) > P:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        mu = hi
    return Q @ ((Q.conj().T @ rhs) / (lam + mu)[:, None])


def wmmse_baseline(config, channels, max_iters=500, tol=1e-9, seed=0, init=None) -> WmmseResult:
    """Perfect-CSI WMMSE for the multi-cell MISO downlink.

    Uses the true channels when the channel set carries them.  The MMSE
    receivers, the MSE weights and the per-BS beamformers are updated in
    turn; each beamformer block solves its power-constrained quadratic
    exactly, so the WSR is nondecreasing across iterations.
    """
    H = channels.h_est if channels.h_true is None else channels.h_true
    perfect = model.ChannelSet(H, 0.0)
    M, K = config.M, config.K
    if init is None:
        V = model.random_beamformers(config, np.random.default_rng(seed), power_fraction=1.0)
    else:
        V = np.asarray(init, dtype=float)
    W = model.unpack_beamformers(config, V).copy()
    alpha, sigma2 = config.alpha, config.sigma2
    history = [model.wsr(config, perfect, model.pack_beamformers(config, W))]
    best_V, best = model.pack_beamformers(config, W), history[0]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        G = model._link_gains(H, W)  # (m, n, k, l)
        P2 = np.abs(G) ** 2
        T = P2.sum(axis=(1, 3)) + sigma2
        sig = G[np.arange(M)[:, None], np.arange(M)[:, None], np.arange(K)[None, :], np.arange(K)[None, :]]
        u = sig / T
        w = 1.0 / (1.0 - np.abs(sig) ** 2 / T)
        coef = alpha * w * np.abs(u) ** 2  # (m, k)
        for n in range(M):
            Hn = H[:, n]  # (m, k, N): channels from BS n to every user
            A = np.einsum("mk,mka,mkb->ab", coef, Hn.conj(), Hn)
            rhs = (alpha[n] * w[n] * u[n])[None, :] * Hn[n].conj().T  # (N, K)
            W[n] = _beam_update(A, rhs, config.P[n]).T
        value = model.wsr(config, perfect, model.pack_beamformers(config, W))
        if not np.isfinite(value):
            raise NumericalError("WMMSE produced a non-finite WSR", iteration=it)
        history.append(value)
        if value > best:
            best, best_V = value, model.pack_beamformers(config, W)
        if abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-1])):
            converged = True
            break
    return WmmseResult(best_V, history, converged, it)


# ------------------------------------------------------------ numerics


def default_step(x):
    return 1e-5 * (1.0 + np.max(np.abs(x)))


def finite_diff_grad(func, x, h=None):
    """Central-difference gradient of a scalar field."""
    x = np.asarray(x, dtype=float)
    h = default_step(x) if h is None else h
    if not h > 0:
        raise ValueError("step must be > 0")
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        fp, fm = func(x + e), func(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite evaluation at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class ConvexityReport:
    checks: int
    violations: int
    worst: float
    worst_location: tuple | None

    @property
    def ok(self) -> bool:
        return self.violations == 0


def convexity_probe(g, pairs, ts=(0.25, 0.5, 0.75), tol=1e-4) -> ConvexityReport:
    """Check ``g(t x + (1-t) y) <= t g(x) + (1-t) g(y) + tol`` for every pair and ``t``.

    ``worst`` is the largest excess over the chord (negative when all hold);
    ``worst_location`` is ``(pair_index, t)`` of that excess.
    """
    checks = violations = 0
    worst, where = -np.inf, None
    for i, (x, y) in enumerate(pairs):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx, gy = g(x), g(y)
        for t in ts:
            excess = g(t * x + (1 - t) * y) - (t * gx + (1 - t) * gy)
            checks += 1
            if excess > tol:
                violations += 1
            if excess > worst:
                worst, where = float(excess), (i, t)
    return ConvexityReport(checks, violations, worst, where)
