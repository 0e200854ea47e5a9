"""Affine cuts ``a.V + b.Delta + kappa <= 0`` and the dual-paired cut set."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model
from .errors import ContractViolation, DegenerateCutWarning, DimensionError

INACTIVE_DUAL = 1e-12
DEDUP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CuttingPlane:
    """One affine cut.

    ``origin`` is ``"power(m)"`` or ``"g"`` for locally generated cuts;
    a cut imported from node ``j`` is tagged ``"received(j):<original tag>"``.  A cut whose
    normal is entirely zero is only allowed with ``kappa > 0``: it then
    certifies that nothing is feasible.
    """

    a: np.ndarray
    b: np.ndarray
    kappa: float
    origin: str
    id: int

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        b = np.array(self.b, dtype=float)
        if a.ndim != 1 or b.ndim != 1:
            raise DimensionError("cut coefficients must be 1-D")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.isfinite(self.kappa)):
            raise ValueError("cut coefficients must be finite")
        if not (np.any(a) or np.any(b)) and self.kappa <= 0:
            raise ValueError("a cut with a = b = 0 is vacuous")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def degenerate(self) -> bool:
        return not (np.any(self.a) or np.any(self.b))

    def normalized(self) -> np.ndarray:
        vec = np.concatenate([self.a, self.b, [self.kappa]])
        scale = np.linalg.norm(vec[:-1])
        return vec / scale if scale > 0 else vec

    def relabel(self, origin=None, id=None) -> "CuttingPlane":
        return CuttingPlane(
            self.a, self.b, self.kappa, self.origin if origin is None else origin, self.id if id is None else id
        )


def evaluate_cut(cp: CuttingPlane, V, delta) -> float:
    """``a.V + b.Delta + kappa``; non-positive means the point satisfies the cut."""
    V = np.asarray(V, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if V.shape[-1] != cp.a.size or delta.shape[-1] != cp.b.size:
        raise DimensionError(
            f"cut expects ({cp.a.size}, {cp.b.size}), got ({V.shape[-1]}, {delta.shape[-1]})"
        )
    out = V @ cp.a + delta @ cp.b + cp.kappa
    return float(out) if np.ndim(out) == 0 else out


def same_cut(c1: CuttingPlane, c2: CuttingPlane, tol=DEDUP_TOL) -> bool:
    return bool(np.max(np.abs(c1.normalized() - c2.normalized())) <= tol)


class CutSet:
    """Ordered cuts with paired non-negative duals.

    A cut set is owned by exactly one solver or simulated node; other owners
    only ever see :meth:`snapshot` tuples.
    """

    def __init__(self, cuts=(), duals=None):
        self.cuts = list(cuts)
        if duals is None:
            duals = np.zeros(len(self.cuts))
        self.duals = np.array(duals, dtype=float)
        if self.duals.shape != (len(self.cuts),):
            raise DimensionError("one dual per cut is required")
        if np.any(self.duals < 0):
            raise ValueError("duals must be >= 0")
        ids = [c.id for c in self.cuts]
        if len(set(ids)) != len(ids):
            raise ValueError("cut ids must be unique")
        self._stack = None
        self._stack_extra = {}

    def __len__(self):
        return len(self.cuts)

    def __iter__(self):
        return iter(self.cuts)

    @property
    def ids(self):
        return [c.id for c in self.cuts]

    def copy(self) -> "CutSet":
        return CutSet(self.cuts, self.duals.copy())

    def with_duals(self, duals) -> "CutSet":
        """Same cuts (sharing the stacked matrices) with new duals."""
        out = CutSet.__new__(CutSet)
        out.cuts = self.cuts
        out.duals = np.asarray(duals, dtype=float)
        out._stack = self._stack
        out._stack_extra = getattr(self, "_stack_extra", {})
        return out

    def snapshot(self):
        """Immutable view of the cuts (without duals) for message passing."""
        return tuple(self.cuts)

    def add(self, cut: CuttingPlane, dual=0.0):
        if any(c.id == cut.id for c in self.cuts):
            raise ValueError(f"duplicate cut id {cut.id}")
        self.cuts = self.cuts + [cut]
        self.duals = np.append(self.duals, float(dual))
        self._stack = None
        self._stack_extra = {}

    def contains(self, cut: CuttingPlane, tol=DEDUP_TOL) -> bool:
        if not self.cuts:
            return False
        normals = self.cached("normalized", lambda: np.array([c.normalized() for c in self.cuts]))
        return bool(np.any(np.max(np.abs(normals - cut.normalized()), axis=1) <= tol))

    def keep(self, mask) -> "CutSet":
        mask = np.asarray(mask, dtype=bool)
        return CutSet([c for c, k in zip(self.cuts, mask) if k], self.duals[mask])

    def cached(self, key, compute):
        """Memoise a per-cut quantity until the cut list changes."""
        self.matrices()
        extra = self._stack_extra
        if key not in extra:
            extra[key] = compute()
        return extra[key]

    def matrices(self):
        """Stacked ``(A, B, kappa)`` for vectorised evaluation."""
        if self._stack is None:
            if self.cuts:
                A = np.array([c.a for c in self.cuts])
                B = np.array([c.b for c in self.cuts])
                kappa = np.array([c.kappa for c in self.cuts])
            else:
                A = B = kappa = None
            self._stack = (A, B, kappa)
            self._stack_extra = {}
        return self._stack

    def residuals(self, V, delta):
        A, B, kappa = self.matrices()
        if A is None:
            return np.zeros(0)
        return A @ V + B @ delta + kappa


def drop_inactive(cuts: CutSet, tol=INACTIVE_DUAL, protect=None) -> CutSet:
    """Remove every cut whose dual is zero (within ``tol``), duals in lockstep.

    ``protect`` optionally names cut ids that must survive regardless.
    """
    keep = np.abs(cuts.duals) > tol
    if protect:
        keep |= np.array([c.id in protect for c in cuts.cuts], dtype=bool)
    return cuts.keep(keep)


class IdAllocator:
    """Deterministic unique cut ids: ``start, start + stride, ...``.

    Distinct nodes use distinct ``start`` values with a common ``stride`` so
    that ids never collide across a network.
    """

    def __init__(self, start=0, stride=1):
        self._counter = itertools.count(start, stride)

    def __call__(self) -> int:
        return next(self._counter)


def power_cut(config, V_query, delta_query, m, cut_id=0) -> CuttingPlane:
    """Linearise the violated budget of BS ``m`` at the query point."""
    V_query = np.asarray(V_query, dtype=float)
    violation = float(model.power_violation(config, V_query)[m])
    if not violation > 0:
        raise ContractViolation(f"power budget of BS {m} is satisfied at the query point")
    layout = model.beam_layout(config)
    mask = np.zeros(layout.shape, dtype=bool)
    mask[m] = True
    support = np.concatenate([mask.ravel(), mask.ravel()])
    a = np.where(support, 2.0 * V_query, 0.0)
    kappa = violation - a @ V_query
    return CuttingPlane(a, np.zeros(config.n_delta), kappa, f"power({m})", cut_id)


def g_cut(V_query, delta_query, g_val, grad, eps_tol, cut_id=0, origin="g") -> CuttingPlane:
    """Linearisation ``g(q) + grad g(q) . (x - q) <= eps_tol`` as an affine cut."""
    if not g_val > eps_tol:
        raise ContractViolation(f"g = {g_val:.3e} does not exceed eps_tol = {eps_tol:.3e}")
    d_v, d_delta = (np.asarray(x, dtype=float) for x in grad)
    kappa = g_val - d_v @ np.asarray(V_query, float) - d_delta @ np.asarray(delta_query, float) - eps_tol
    if not (np.any(d_v) or np.any(d_delta)):
        warnings.warn("g-cut with zero gradient excludes every point", DegenerateCutWarning, stacklevel=2)
        kappa = g_val - eps_tol
    return CuttingPlane(d_v, d_delta, kappa, origin, cut_id)


# ----------------------------------------------------------- wire format


def format_cut(cp: CuttingPlane) -> str:
    """``id origin kappa | a... | b...`` with 17 significant digits."""
    fmt = lambda x: f"{x:.17g}"
    return " | ".join(
        [
            f"{cp.id} {cp.origin} {fmt(cp.kappa)}",
            " ".join(fmt(x) for x in cp.a),
            " ".join(fmt(x) for x in cp.b),
        ]
    )


def parse_cut(line: str) -> CuttingPlane:
    head, a_txt, b_txt = line.strip().split("|")
    cut_id, origin, kappa = head.split()
    a = np.array([float(x) for x in a_txt.split()])
    b = np.array([float(x) for x in b_txt.split()])
    return CuttingPlane(a, b, float(kappa), origin, int(cut_id))


def write_cuts(path, cuts):
    Path(path).write_text("".join(format_cut(c) + "\n" for c in cuts))


def read_cuts(path):
    return [parse_cut(line) for line in Path(path).read_text().splitlines() if line.strip()]
