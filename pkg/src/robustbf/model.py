"""Multi-cell MISO downlink model: configuration, channels, packing, SINR and WSR.

Array conventions used throughout the package (all indices 0-based):

* beamformers ``W[m, k, :]`` is the vector BS ``m`` uses for its user ``k``;
  shape ``(M, K, N)``.
* channels ``H[m, n, k, :]`` is the row vector from BS ``n`` to user ``k`` of
  cell ``m``; shape ``(M, M, K, N)``.  Channel errors share this layout.

Packed real vectors concatenate the C-order flattening of the real parts with
that of the imaginary parts, so a beamformer vector is ordered (re/im, m, k,
antenna) and an error vector (re/im, m, n, k, antenna).

Every numeric routine broadcasts over leading batch axes of the packed
vectors, which the inner solver and the worst-case oracle rely on.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError


@dataclass(frozen=True)
class NetworkConfig:
    """Dimensions, budgets, weights and noise of the network.

    ``alpha`` and ``sigma2`` accept a scalar, a flat sequence of length
    ``M*K`` ordered cell-major, or an ``(M, K)`` array.
    """

    M: int
    N: int
    K: int
    P: np.ndarray = 1.0
    alpha: np.ndarray = 1.0
    sigma2: np.ndarray = 1.0
    log_base: float = 2.0

    def __post_init__(self):
        for name in ("M", "N", "K"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"must be a positive integer, got {value!r}", name)
            object.__setattr__(self, name, int(value))
        M, K = self.M, self.K
        P = _broadcast(self.P, (M,), "P")
        alpha = _broadcast(self.alpha, (M, K), "alpha")
        sigma2 = _broadcast(self.sigma2, (M, K), "sigma2")
        for name, arr in (("P", P), ("alpha", alpha), ("sigma2", sigma2)):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ConfigurationError("entries must be finite and > 0", name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.log_base > 0 and self.log_base != 1 and math.isfinite(self.log_base)):
            raise ConfigurationError(f"invalid log base {self.log_base!r}", "log_base")
        object.__setattr__(self, "log_base", float(self.log_base))

    @property
    def n_v(self) -> int:
        return 2 * self.M * self.N * self.K

    @property
    def n_delta(self) -> int:
        return 2 * self.M * self.M * self.N * self.K

    @property
    def n_blocks(self) -> int:
        """Number of channel-error blocks, one per (m, n, k)."""
        return self.M * self.M * self.K

    @property
    def beam_shape(self):
        return (self.M, self.K, self.N)

    @property
    def channel_shape(self):
        return (self.M, self.M, self.K, self.N)

    @property
    def log_scale(self) -> float:
        """Factor turning natural logarithms into the configured base."""
        return 1.0 / math.log(self.log_base)

    def with_power(self, P) -> "NetworkConfig":
        return NetworkConfig(self.M, self.N, self.K, P, self.alpha, self.sigma2, self.log_base)


def _broadcast(value, shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and len(shape) == 2 and arr.size == shape[0] * shape[1]:
        arr = arr.reshape(shape)
    try:
        return np.array(np.broadcast_to(arr, shape), dtype=float)
    except ValueError:
        raise ConfigurationError(f"cannot broadcast shape {arr.shape} to {shape}", name) from None


@dataclass(frozen=True)
class ChannelSet:
    """Estimated channels, uncertainty radii and optionally the true channels."""

    h_est: np.ndarray
    radii: np.ndarray
    h_true: np.ndarray | None = None

    def __post_init__(self):
        h_est = np.array(self.h_est, dtype=complex)
        if h_est.ndim != 4 or h_est.shape[0] != h_est.shape[1]:
            raise DimensionError(f"h_est must have shape (M, M, K, N), got {h_est.shape}")
        radii = np.array(np.broadcast_to(np.asarray(self.radii, dtype=float), h_est.shape[:3]))
        if np.any(radii < 0) or not np.all(np.isfinite(radii)):
            raise DomainError("uncertainty radii must be finite and >= 0")
        h_est.setflags(write=False)
        radii.setflags(write=False)
        object.__setattr__(self, "h_est", h_est)
        object.__setattr__(self, "radii", radii)
        if self.h_true is not None:
            h_true = np.array(self.h_true, dtype=complex)
            if h_true.shape != h_est.shape:
                raise DimensionError("h_true and h_est shapes differ")
            h_true.setflags(write=False)
            object.__setattr__(self, "h_true", h_true)

    @property
    def shape(self):
        return self.h_est.shape

    def check(self, config: NetworkConfig):
        if self.h_est.shape != config.channel_shape:
            raise DimensionError(
                f"channels have shape {self.h_est.shape}, network expects {config.channel_shape}"
            )

    def with_radii(self, radii) -> "ChannelSet":
        return ChannelSet(self.h_est, radii, self.h_true)

    def perfect(self) -> "ChannelSet":
        """Perfect-CSI view: the true channels (when known) with zero radii."""
        h = self.h_est if self.h_true is None else self.h_true
        return ChannelSet(h, 0.0, h)


class PackingLayout:
    """Bijection between a complex array of fixed shape and a packed real vector."""

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)
        self.block = int(np.prod(self.shape))
        self.size = 2 * self.block

    def index(self, *idx, imag=False) -> int:
        """Flat position of the real (or imaginary) part of ``array[idx]``."""
        if len(idx) != len(self.shape) or any(not 0 <= i < s for i, s in zip(idx, self.shape)):
            raise DomainError(f"index {idx} outside shape {self.shape}")
        return int(np.ravel_multi_index(idx, self.shape)) + (self.block if imag else 0)

    def pack(self, x):
        x = np.asarray(x)
        if x.shape[x.ndim - len(self.shape):] != self.shape:
            raise DimensionError(f"expected trailing shape {self.shape}, got {x.shape}")
        batch = x.shape[: x.ndim - len(self.shape)]
        flat = x.reshape(batch + (self.block,))
        return np.concatenate([flat.real, flat.imag], axis=-1).astype(float)

    def unpack(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 0 or v.shape[-1] != self.size:
            raise DimensionError(f"expected packed length {self.size}, got {v.shape}")
        c = v[..., : self.block] + 1j * v[..., self.block :]
        return c.reshape(v.shape[:-1] + self.shape)

    def __repr__(self):
        return f"PackingLayout(shape={self.shape})"


@functools.lru_cache(maxsize=64)
def _layout(shape) -> PackingLayout:
    return PackingLayout(shape)


def beam_layout(config: NetworkConfig) -> PackingLayout:
    return _layout(config.beam_shape)


def error_layout(config: NetworkConfig) -> PackingLayout:
    return _layout(config.channel_shape)


def pack(x):
    """Pack any complex array into ``[Re(x).ravel(), Im(x).ravel()]``."""
    return PackingLayout(np.shape(x)).pack(x)


def unpack(v, shape):
    return PackingLayout(shape).unpack(v)


def pack_beamformers(config, W):
    return beam_layout(config).pack(W)


def unpack_beamformers(config, V):
    return beam_layout(config).unpack(V)


def pack_errors(config, D):
    return error_layout(config).pack(D)


def unpack_errors(config, delta):
    return error_layout(config).unpack(delta)


# ---------------------------------------------------------------- random data


def _uniform_ball(rng, radii, dim):
    """Uniform samples in real balls of dimension ``dim``; one per radius entry."""
    radii = np.asarray(radii, dtype=float)
    x = rng.standard_normal(radii.shape + (dim,))
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radii[..., None] * rng.random(radii.shape + (1,)) ** (1.0 / dim)
    return x / norms * r


def sample_error_array(radii, N, rng, size=None):
    """Complex errors ``(..., M, M, K, N)`` uniform in the per-block balls."""
    radii = np.asarray(radii, dtype=float)
    if np.any(radii < 0):
        raise DomainError("uncertainty radii must be >= 0")
    shape = radii.shape if size is None else (size,) + radii.shape
    x = _uniform_ball(rng, np.broadcast_to(radii, shape), 2 * N)
    return x[..., :N] + 1j * x[..., N:]


def sample_error(radii, seed, N=None):
    """Packed error vector drawn uniformly from the product of the error balls.

    ``radii`` is the ``(M, M, K)`` array of block radii; ``N`` the antenna
    count.  A :class:`ChannelSet` may be passed instead, in which case ``N`` is
    read from it.
    """
    if isinstance(radii, ChannelSet):
        N = radii.shape[-1]
        radii = radii.radii
    if N is None:
        raise DimensionError("antenna count N is required")
    rng = np.random.default_rng(seed)
    D = sample_error_array(radii, N, rng)
    return PackingLayout(np.shape(D)).pack(D)


def generate_rayleigh_channels(config: NetworkConfig, seed: int, epsilon=0.0) -> ChannelSet:
    """Rayleigh channels plus an in-ball estimation error.

    Every true coefficient has independent N(0, 1/2) real and imaginary parts;
    the estimate is ``h_true - err`` with ``err`` uniform in the ball of radius
    ``epsilon`` (a scalar or an ``(M, M, K)`` array).
    """
    if not isinstance(config, NetworkConfig):
        raise ConfigurationError("a NetworkConfig is required")
    radii = np.broadcast_to(np.asarray(epsilon, dtype=float), config.channel_shape[:3])
    if np.any(radii < 0):
        raise DomainError("uncertainty radii must be >= 0")
    chan_seq, err_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(chan_seq)
    shape = config.channel_shape
    h_true = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    err = sample_error_array(radii, config.N, np.random.default_rng(err_seq))
    return ChannelSet(h_true - err, radii, h_true)


def random_beamformers(config: NetworkConfig, rng, power_fraction=0.5):
    """Uniform random beamformers rescaled so each BS uses ``power_fraction * P_m``."""
    shape = config.beam_shape
    W = rng.uniform(-1.0, 1.0, shape) + 1j * rng.uniform(-1.0, 1.0, shape)
    norms = np.sqrt(np.sum(np.abs(W) ** 2, axis=(1, 2)))
    W *= (np.sqrt(power_fraction * config.P) / norms)[:, None, None]
    return pack_beamformers(config, W)


# ------------------------------------------------------------ SINR and WSR


def _check_v(config, V):
    V = np.asarray(V, dtype=float)
    if V.shape[-1:] != (config.n_v,):
        raise DimensionError(f"beamformer vector must have length {config.n_v}, got {V.shape}")
    return V


def _check_delta(config, delta):
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-1:] != (config.n_delta,):
        raise DimensionError(f"error vector must have length {config.n_delta}, got {delta.shape}")
    return delta


def _effective(config, channels, delta):
    channels.check(config)
    if delta is None:
        return channels.h_est
    return channels.h_est + unpack_errors(config, _check_delta(config, delta))


def _per_tx(X, Y):
    """``X[..., m, n, k, :] @ Y[n]`` for an unbatched ``Y`` of shape ``(M, p, q)``.

    Moving the transmitter axis to the front turns the many tiny products
    into ``M`` large ones.
    """
    M = Y.shape[0]
    Xn = np.moveaxis(X, -3, 0)
    out = np.matmul(Xn.reshape(M, -1, X.shape[-1]), Y)
    return np.moveaxis(out.reshape(Xn.shape[:-1] + (Y.shape[-1],)), 0, -3)


def _link_gains(H, W):
    """``G[..., m, n, k, l] = H[m, n, k, :] @ W[n, l, :]``."""
    if W.ndim == 3:
        return _per_tx(H, np.swapaxes(W, -1, -2))
    return H @ np.expand_dims(np.swapaxes(W, -1, -2), -4)


def _grad_beams(A, H):
    """``sum_{m,k} A[m, n, k, l] * conj(H[m, n, k, :])``, shape ``(..., M, K, N)``."""
    return (np.swapaxes(A, -1, -2) @ H.conj()).sum(axis=-4)


def _grad_channels(A, W):
    """``sum_l A[m, n, k, l] * conj(W[n, l, :])``, shape ``(..., M, M, K, N)``."""
    if W.ndim == 3:
        return _per_tx(A, W.conj())
    return A @ np.expand_dims(W.conj(), -4)


def _powers(config, G):
    """Signal power ``S``, interference-plus-noise ``U`` and their sum ``T``.

    ``U`` is summed directly rather than formed as ``T - S``, which would
    cancel catastrophically when the signal dominates.
    """
    P2 = G.real ** 2 + G.imag ** 2
    m_idx = np.arange(config.M)[:, None]
    k_idx = np.arange(config.K)[None, :]
    S = P2[..., m_idx, m_idx, k_idx, k_idx]
    P2[..., m_idx, m_idx, k_idx, k_idx] = 0.0
    U = P2.sum(axis=(-3, -1)) + config.sigma2
    return S, U + S, U


def sinr_all(config, channels, V, delta=None):
    """SINR of every user, shape ``(..., M, K)``."""
    W = unpack_beamformers(config, _check_v(config, V))
    G = _link_gains(_effective(config, channels, delta), W)
    S, _, U = _powers(config, G)
    return S / U


def sinr(config, channels, V, delta, k, m):
    """SINR of user ``k`` in cell ``m`` on the channel ``h_est + delta``."""
    if not (0 <= k < config.K and 0 <= m < config.M):
        raise DomainError(f"user index (k={k}, m={m}) out of range")
    return float(sinr_all(config, channels, V, delta)[..., m, k])


def wsr(config, channels, V, delta=None):
    """Weighted sum rate in the configured log base; broadcasts over batches."""
    W = unpack_beamformers(config, _check_v(config, V))
    G = _link_gains(_effective(config, channels, delta), W)
    S, T, U = _powers(config, G)
    rates = np.log(T) - np.log(U)
    out = config.log_scale * np.sum(config.alpha * rates, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class _Linearization:
    """Cached intermediate quantities of one WSR evaluation."""

    H: np.ndarray
    W: np.ndarray
    G: np.ndarray
    S: np.ndarray
    T: np.ndarray
    U: np.ndarray
    value: np.ndarray
    coef: np.ndarray = field(repr=False)


def _linearize(config, channels, V, delta):
    W = unpack_beamformers(config, _check_v(config, V))
    H = _effective(config, channels, delta)
    G = _link_gains(H, W)
    S, T, U = _powers(config, G)
    scale = config.log_scale * config.alpha
    value = np.sum(scale * (np.log(T) - np.log(U)), axis=(-2, -1))
    cT = scale / T
    cU = scale / U
    # d f / d |G[m,n,k,l]|^2: every term enters T, all but the signal enter U
    coef = np.broadcast_to((cT - cU)[..., :, None, :, None], G.shape).copy()
    M, K = config.M, config.K
    m_idx = np.arange(M)[:, None]
    k_idx = np.arange(K)[None, :]
    coef[..., m_idx, m_idx, k_idx, k_idx] = cT
    return _Linearization(H, W, G, S, T, U, value, coef)


def wsr_and_grads(config, channels, V, delta=None):
    """Return ``(f, df/dV, df/dDelta)`` with gradients in packed coordinates."""
    lin = _linearize(config, channels, V, delta)
    A = 2.0 * lin.coef * lin.G
    gW = _grad_beams(A, lin.H)
    gH = _grad_channels(A, lin.W)
    value = lin.value
    if np.ndim(value) == 0:
        value = float(value)
    return value, pack_beamformers(config, gW), pack_errors(config, gH)


def grad_wsr_V(config, channels, V, delta=None):
    return wsr_and_grads(config, channels, V, delta)[1]


def grad_wsr_delta(config, channels, V, delta=None):
    lin = _linearize(config, channels, V, delta)
    return pack_errors(config, _grad_channels(2.0 * lin.coef * lin.G, lin.W))


def _coef_derivative(config, lin, dG):
    """Change of the chain-rule coefficients along a change ``dG`` of the link gains."""
    M, K = config.M, config.K
    scale = config.log_scale * config.alpha
    dP2 = 2.0 * (lin.G.real * dG.real + lin.G.imag * dG.imag)
    dT = dP2.sum(axis=(-3, -1))
    m_idx = np.arange(M)[:, None]
    k_idx = np.arange(K)[None, :]
    dS = dP2[..., m_idx, m_idx, k_idx, k_idx]
    dcT = -scale * dT / lin.T ** 2
    dcU = -scale * (dT - dS) / lin.U ** 2
    dcoef = np.broadcast_to((dcT - dcU)[..., :, None, :, None], lin.G.shape).copy()
    dcoef[..., m_idx, m_idx, k_idx, k_idx] = dcT
    return dcoef


def grad_delta_jvp_V(config, channels, V, delta, direction):
    """Directional derivative of ``df/dDelta`` along a beamformer direction.

    Equals the gradient with respect to ``Delta`` of ``df/dV . direction``,
    i.e. one mixed second-derivative product.  Broadcasts like ``wsr``.
    """
    lin = _linearize(config, channels, V, delta)
    dW = unpack_beamformers(config, _check_v(config, direction))
    dG = _link_gains(lin.H, dW)
    dA = 2.0 * (_coef_derivative(config, lin, dG) * lin.G + lin.coef * dG)
    A = 2.0 * lin.coef * lin.G
    return pack_errors(config, _grad_channels(dA, lin.W) + _grad_channels(A, dW))


def grad_delta_plus_jvp(config, channels, V, delta, direction):
    """``df/dDelta + grad_delta_jvp_V(direction)`` from one shared linearisation."""
    lin = _linearize(config, channels, V, delta)
    dW = unpack_beamformers(config, _check_v(config, direction))
    dG = _link_gains(lin.H, dW)
    A = 2.0 * lin.coef * lin.G
    dA = 2.0 * (_coef_derivative(config, lin, dG) * lin.G + lin.coef * dG)
    return pack_errors(config, _grad_channels(A + dA, lin.W) + _grad_channels(A, dW))


def block_power(config, V):
    """``||V_m||_F^2`` for every BS, shape ``(..., M)``."""
    V = _check_v(config, V)
    sq = V ** 2
    half = config.n_v // 2
    per = (sq[..., :half] + sq[..., half:]).reshape(V.shape[:-1] + (config.M, -1))
    return per.sum(axis=-1)


def power_violation(config, V):
    """``||V_m||_F^2 - P_m`` per BS; positive entries are violated budgets."""
    return block_power(config, V) - config.P


def scale_to_budget(config, V):
    """Shrink every over-budget BS block radially onto its power budget."""
    V = np.array(_check_v(config, V), dtype=float)
    power = block_power(config, V)
    factor = np.sqrt(np.minimum(1.0, config.P / np.where(power > 0, power, 1.0)))
    W = unpack_beamformers(config, V) * factor[..., :, None, None]
    return pack_beamformers(config, W)


def capacity_bound(config, channels) -> float:
    """Crude upper bound on the WSR: every user alone with its BS at full power."""
    h2 = np.max(np.sum(np.abs(channels.h_est) ** 2, axis=-1)) + 0.0
    h2 = (np.sqrt(h2) + np.max(channels.radii)) ** 2
    terms = config.alpha * np.log1p(config.P[:, None] * h2 / config.sigma2)
    return float(config.log_scale * terms.sum())


# ------------------------------------------------------------- channel dumps


def _format(x):
    return repr(float(x))


def write_channels(path, config, channels, which="est"):
    """Write one record per (k, m, n): ``k m n eps re_1 im_1 ... re_N im_N``.

    Indices in the file are 1-based.  ``which`` selects ``"est"`` or
    ``"true"`` channels; the header carries ``M N K``.
    """
    channels.check(config)
    H = channels.h_est if which == "est" else channels.h_true
    if H is None:
        raise DomainError("channel set carries no true channels")
    lines = [f"{config.M} {config.N} {config.K}"]
    for k in range(config.K):
        for m in range(config.M):
            for n in range(config.M):
                fields = [str(k + 1), str(m + 1), str(n + 1), _format(channels.radii[m, n, k])]
                for z in H[m, n, k]:
                    fields.append(_format(z.real))
                    fields.append(_format(z.imag))
                lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_channels(path, true_path=None) -> ChannelSet:
    """Inverse of :func:`write_channels`; ``true_path`` optionally adds ``h_true``."""

    def parse(p):
        rows = Path(p).read_text().split("\n")
        rows = [r for r in rows if r.strip()]
        try:
            M, N, K = (int(x) for x in rows[0].split())
        except ValueError:
            raise DimensionError(f"{p}: bad header {rows[0]!r}") from None
        H = np.zeros((M, M, K, N), dtype=complex)
        radii = np.zeros((M, M, K))
        seen = set()
        for line in rows[1:]:
            parts = line.split()
            if len(parts) != 4 + 2 * N:
                raise DimensionError(f"{p}: record has {len(parts)} fields, expected {4 + 2 * N}")
            k, m, n = (int(x) - 1 for x in parts[:3])
            radii[m, n, k] = float(parts[3])
            vals = np.array([float(x) for x in parts[4:]])
            H[m, n, k] = vals[0::2] + 1j * vals[1::2]
            seen.add((k, m, n))
        if len(seen) != M * M * K:
            raise DimensionError(f"{p}: expected {M * M * K} records, found {len(seen)}")
        return H, radii

    H, radii = parse(path)
    h_true = None
    if true_path is not None:
        h_true, _ = parse(true_path)
    return ChannelSet(H, radii, h_true)
