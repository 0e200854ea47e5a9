"""Worst-case channel error by the augmented Lagrangian method.

The lower-level problem minimises the WSR over the channel errors, each block
constrained by ``||delta_b||_2 + s_b**2 = eps_b``.  The objective is replaced
by its first-order expansion in the beamformers around a reference point, so
the error iterates depend on the query beamformers only through that linear
term.  ``phi`` runs a fixed number of simultaneous ALM gradient steps and
projects the result onto the error balls.

All state arrays may carry leading batch axes; a batch of error iterates is
driven with one shared beamformer vector or with a matching batch of them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import model
from .errors import DimensionError, NumericalError


@dataclass(frozen=True)
class AlmConfig:
    """Penalty, step sizes and iteration count of the inner solver.

    ``taylor_point`` of ``None`` means "expand around the query beamformers".
    ``schedule`` optionally maps the inner iteration index to a multiplier of
    all three step sizes.
    """

    rho: float = 10.0
    eta_delta: float = 1e-2
    eta_s: float = 1e-2
    eta_mu: float = 1e-2
    k_inner: int = 100
    taylor_point: Optional[np.ndarray] = None
    schedule: Optional[Callable[[int], float]] = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        for name in ("eta_delta", "eta_s", "eta_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if int(self.k_inner) != self.k_inner or self.k_inner < 1:
            raise ValueError("k_inner must be an integer >= 1")

    def at(self, taylor_point) -> "AlmConfig":
        return replace(self, taylor_point=None if taylor_point is None else np.asarray(taylor_point, float))


@dataclass(frozen=True)
class AlmState:
    delta_prime: np.ndarray
    s: np.ndarray
    mu: np.ndarray


def block_norms(config, delta):
    """Euclidean norm of every complex error block, shape ``(..., M*M*K)``."""
    D = model.unpack_errors(config, delta)
    n = np.sqrt(np.sum(D.real ** 2 + D.imag ** 2, axis=-1))
    return n.reshape(n.shape[:-3] + (config.n_blocks,))


def _flat_radii(channels):
    return np.asarray(channels.radii, dtype=float).reshape(-1)


def initial_state(config, channels, warm=None) -> AlmState:
    """Warm-started state: ``s = sqrt(max(eps - ||delta_b||, 0))`` and ``mu = 0``."""
    delta = np.zeros(config.n_delta) if warm is None else np.array(warm, dtype=float)
    if delta.shape[-1] != config.n_delta:
        raise DimensionError(f"warm start must have length {config.n_delta}")
    norms = block_norms(config, delta)
    s = np.sqrt(np.maximum(_flat_radii(channels) - norms, 0.0))
    return AlmState(delta, s, np.zeros_like(s))


def project_to_balls(config, channels, delta):
    """Radially shrink every error block onto its ball; a no-op inside."""
    D = model.unpack_errors(config, delta)
    norms = np.sqrt(np.sum(D.real ** 2 + D.imag ** 2, axis=-1))
    radii = channels.radii
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > radii, radii / np.where(norms > 0, norms, 1.0), 1.0)
    return model.pack_errors(config, D * factor[..., None])


def _taylor_point(cfg, V):
    return V if cfg.taylor_point is None else cfg.taylor_point


def taylor_f(config, channels, V, delta_prime, taylor_point):
    """``f(V~, D') + grad_V f(V~, D') . (V - V~)``."""
    f0, gV, _ = model.wsr_and_grads(config, channels, taylor_point, delta_prime)
    return f0 + np.sum(gV * (np.asarray(V) - taylor_point), axis=-1)


def _taylor_grad_delta(config, channels, V, delta_prime, taylor_point):
    d = np.asarray(V, dtype=float) - taylor_point
    if np.any(d != 0):
        return model.grad_delta_plus_jvp(config, channels, taylor_point, delta_prime, d)
    return model.grad_wsr_delta(config, channels, taylor_point, delta_prime)


def residuals(config, channels, state: AlmState):
    """Equality-constraint residuals ``||delta_b|| + s_b**2 - eps_b``."""
    return block_norms(config, state.delta_prime) + state.s ** 2 - _flat_radii(channels)


def alm_value(config, channels, V, state: AlmState, cfg: AlmConfig):
    """Augmented Lagrangian of the lower-level problem."""
    V = np.asarray(V, dtype=float)
    c = residuals(config, channels, state)
    ft = taylor_f(config, channels, V, state.delta_prime, _taylor_point(cfg, V))
    return ft + np.sum(state.mu * c, axis=-1) + 0.5 * cfg.rho * np.sum(c ** 2, axis=-1)


def alm_gradients(config, channels, V, state: AlmState, cfg: AlmConfig):
    """Gradients of :func:`alm_value` with respect to ``(delta', s, mu)``.

    The norm's subgradient at a zero block is taken as zero.
    """
    V = np.asarray(V, dtype=float)
    D = model.unpack_errors(config, state.delta_prime)
    norms = np.sqrt(np.sum(D.real ** 2 + D.imag ** 2, axis=-1))
    c = norms.reshape(norms.shape[:-3] + (-1,)) + state.s ** 2 - _flat_radii(channels)
    weight = (state.mu + cfg.rho * c).reshape(norms.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(norms[..., None] > 0, D / np.where(norms > 0, norms, 1.0)[..., None], 0.0)
    g_delta = _taylor_grad_delta(config, channels, V, state.delta_prime, _taylor_point(cfg, V))
    g_delta = g_delta + model.pack_errors(config, weight[..., None] * unit)
    g_s = 2.0 * state.s * (state.mu + cfg.rho * c)
    return g_delta, g_s, c


def alm_step(config, channels, V, state: AlmState, cfg: AlmConfig, iteration=0) -> AlmState:
    """One simultaneous step: descend in ``delta'`` and ``s``, ascend in ``mu``."""
    g_delta, g_s, g_mu = alm_gradients(config, channels, V, state, cfg)
    scale = 1.0 if cfg.schedule is None else cfg.schedule(iteration)
    new = AlmState(
        state.delta_prime - scale * cfg.eta_delta * g_delta,
        state.s - scale * cfg.eta_s * g_s,
        state.mu + scale * cfg.eta_mu * g_mu,
    )
    if not (
        np.all(np.isfinite(new.delta_prime))
        and np.all(np.isfinite(new.s))
        and np.all(np.isfinite(new.mu))
    ):
        raise NumericalError("non-finite ALM iterate", iteration=iteration)
    return new


def run_alm(config, channels, V, cfg: AlmConfig, init: AlmState, trace=False):
    """Run ``cfg.k_inner`` ALM steps; optionally return the residual trace."""
    state = init
    history = []
    for it in range(cfg.k_inner):
        if trace:
            history.append(np.sum(np.abs(residuals(config, channels, state)), axis=-1))
        state = alm_step(config, channels, V, state, cfg, it)
    if trace:
        history.append(np.sum(np.abs(residuals(config, channels, state)), axis=-1))
        return state, np.array(history)
    return state


def phi(config, channels, V, cfg: AlmConfig = AlmConfig(), init: AlmState | None = None):
    """Approximate worst-case error for the beamformers ``V``.

    Exactly zero when every radius is zero.
    """
    V = np.asarray(V, dtype=float)
    if not np.any(channels.radii > 0):
        shape = np.broadcast_shapes(V.shape[:-1], () if init is None else init.delta_prime.shape[:-1])
        return np.zeros(shape + (config.n_delta,))
    if init is None:
        init = initial_state(config, channels)
    state = run_alm(config, channels, V, cfg, init)
    return project_to_balls(config, channels, state.delta_prime)


def g_value(delta, phi_of_v):
    """Squared distance between an error iterate and the worst-case error."""
    diff = np.asarray(delta, dtype=float) - np.asarray(phi_of_v, dtype=float)
    return np.sum(diff * diff, axis=-1)


def default_fd_step(V):
    return 1e-5 * (1.0 + np.max(np.abs(V)))


def grad_g(config, channels, V, delta, cfg: AlmConfig = AlmConfig(), init=None, phi_of_v=None, h=None):
    """Gradient of ``g`` in packed ``(V, delta)`` coordinates.

    ``d g / d delta`` is analytic; ``d g / d V`` is a central finite difference
    through the whole ``phi`` evaluation, with the expansion point held at
    ``V`` for every perturbed evaluation.  All ``2 * len(V)`` perturbed inner
    solves run as one batch.
    """
    V = np.asarray(V, dtype=float)
    delta = np.asarray(delta, dtype=float)
    cfg = cfg if cfg.taylor_point is not None else cfg.at(V)
    if init is None:
        init = initial_state(config, channels)
    if phi_of_v is None:
        phi_of_v = phi(config, channels, V, cfg, init)
    d_delta = 2.0 * (delta - phi_of_v)
    if not np.any(channels.radii > 0):
        return np.zeros_like(V), d_delta
    h = default_fd_step(V) if h is None else h
    n = V.size
    steps = np.concatenate([np.eye(n), -np.eye(n)]) * h
    batch_init = AlmState(
        np.broadcast_to(init.delta_prime, (2 * n,) + init.delta_prime.shape[-1:]),
        np.broadcast_to(init.s, (2 * n,) + init.s.shape[-1:]),
        np.broadcast_to(init.mu, (2 * n,) + init.mu.shape[-1:]),
    )
    phis = phi(config, channels, V + steps, cfg, batch_init)
    gs = g_value(delta, phis)
    d_v = (gs[:n] - gs[n:]) / (2.0 * h)
    if not (np.all(np.isfinite(d_v)) and np.all(np.isfinite(d_delta))):
        raise NumericalError("non-finite gradient of g")
    return d_v, d_delta
