"""Batched forward-mode directional derivatives for the local integrator.

A :class:`Dual` carries a batch of values with shape ``(n, *s)`` and the
directional derivatives along ``k`` seed directions with shape
``(n, k, *s)``. Only the small set of operations needed by the
material-point residuals is implemented: elementwise arithmetic between
same-shape quantities or scalar-against-anything, 3x3 matrix products,
traces/deviators, slip-dyad contractions and a few guarded nonlinear
primitives. ``k = 0`` gives a (nearly) free value-only evaluation through
the same code path.
"""

from __future__ import annotations

import numpy as np

I3 = np.eye(3)


class Dual:
    __slots__ = ("val", "dot")

    def __init__(self, val: np.ndarray, dot: np.ndarray):
        self.val = val
        self.dot = dot

    # -- helpers ------------------------------------------------------
    @property
    def _feat_ndim(self) -> int:
        return self.val.ndim - 1

    def _aligned(self, feat_ndim: int):
        """Pad a scalar dual with trailing singleton axes."""
        extra = feat_ndim - self._feat_ndim
        if extra == 0:
            return self.val, self.dot
        if self._feat_ndim != 0:
            raise ValueError("can only broadcast scalar duals")
        shape_v = self.val.shape + (1,) * extra
        shape_d = self.dot.shape + (1,) * extra
        return self.val.reshape(shape_v), self.dot.reshape(shape_d)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            a, b = _align2(self, other)
            return Dual(a[0] + b[0], a[1] + b[1])
        return Dual(self.val + other, self.dot.copy())

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            (av, ad), (bv, bd) = _align2(self, other)
            return Dual(av * bv, ad * bv[:, None] + av[:, None] * bd)
        other = np.asarray(other)
        return Dual(self.val * other, self.dot * _const_pad(other, self.dot.ndim))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other))

    def reciprocal(self):
        inv = 1.0 / self.val
        return Dual(inv, -self.dot * (inv * inv)[:, None])


def _align2(a: Dual, b: Dual):
    nd = max(a._feat_ndim, b._feat_ndim)
    return a._aligned(nd), b._aligned(nd)


def _const_pad(arr: np.ndarray, target_ndim: int) -> np.ndarray:
    """Insert the seed axis into a constant so it broadcasts against dots."""
    if arr.ndim == 0:
        return arr
    # constants are (n, *s) or plain feature-shaped; add a seed axis after batch
    if arr.ndim == target_ndim - 1:
        return arr[:, None] if arr.shape[0] != 1 else arr[None]
    return arr


def constant(val: np.ndarray, k: int) -> Dual:
    val = np.asarray(val, dtype=float)
    return Dual(val, np.zeros((val.shape[0], k) + val.shape[1:]))


def seeded(val: np.ndarray, dot: np.ndarray) -> Dual:
    return Dual(np.asarray(val, dtype=float), np.asarray(dot, dtype=float))


# -- linear tensor ops ------------------------------------------------

def matmul(a: Dual, b: Dual) -> Dual:
    val = a.val @ b.val
    dot = a.dot @ b.val[:, None] + a.val[:, None] @ b.dot
    return Dual(val, dot)


def transpose(a: Dual) -> Dual:
    return Dual(np.swapaxes(a.val, -1, -2), np.swapaxes(a.dot, -1, -2))


def trace(a: Dual) -> Dual:
    return Dual(
        np.trace(a.val, axis1=-2, axis2=-1), np.trace(a.dot, axis1=-2, axis2=-1)
    )


def dev(a: Dual) -> Dual:
    tr = trace(a)
    return Dual(
        a.val - tr.val[:, None, None] / 3.0 * I3,
        a.dot - tr.dot[:, :, None, None] / 3.0 * I3,
    )


def ddot(a: Dual, b: Dual) -> Dual:
    val = np.einsum("nij,nij->n", a.val, b.val)
    dot = np.einsum("nkij,nij->nk", a.dot, b.val) + np.einsum(
        "nij,nkij->nk", a.val, b.dot
    )
    return Dual(val, dot)


def iso(s: Dual) -> Dual:
    """Spherical tensor s*I from a scalar dual."""
    return Dual(s.val[:, None, None] * I3, s.dot[:, :, None, None] * I3)


def contract_dyads(a: Dual, dyads_flat: np.ndarray) -> Dual:
    """Per-system contraction A : D_alpha; dyads_flat has shape (n, 9, na)."""
    n = a.val.shape[0]
    val = (a.val.reshape(n, 1, 9) @ dyads_flat)[:, 0, :]
    dot = a.dot.reshape(n, -1, 9) @ dyads_flat
    return Dual(val, dot)


def combine_dyads(c: Dual, dyads_flat: np.ndarray) -> Dual:
    """Weighted dyad sum  sum_alpha c_alpha D_alpha; dyads_flat (n, 9, na)."""
    n, na = c.val.shape
    dt = np.swapaxes(dyads_flat, 1, 2)            # (n, na, 9)
    val = (c.val.reshape(n, 1, na) @ dt).reshape(n, 3, 3)
    k = c.dot.shape[1]
    dot = (c.dot @ dt).reshape(n, k, 3, 3)
    return Dual(val, dot)


def sum_systems(a: Dual) -> Dual:
    return Dual(a.val.sum(axis=-1), a.dot.sum(axis=-1))


# -- nonlinear primitives ---------------------------------------------

def vector_norm(a: Dual, eps: float = 1e-30) -> Dual:
    """sqrt(sum a_i^2) with a zero derivative at the origin."""
    val = np.sqrt(np.einsum("na,na->n", a.val, a.val))
    safe = np.where(val > eps, val, 1.0)
    dot = np.einsum("nka,na->nk", a.dot, a.val) / safe[:, None]
    dot = np.where((val > eps)[:, None], dot, 0.0)
    return Dual(val, dot)


def positive_part(a: Dual) -> Dual:
    mask = a.val > 0.0
    return Dual(np.where(mask, a.val, 0.0), np.where(mask[:, None], a.dot, 0.0))


def macaulay_power(a: Dual, m: float) -> Dual:
    """<a>_+^m with the one-sided derivative m <a>_+^(m-1).

    Overflow to inf is tolerated: the local Newton detects non-finite
    residuals and fails the step.
    """
    pos = np.maximum(a.val, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        val = pos**m
        dval = np.where(a.val > 0.0, m * pos ** (m - 1.0), 0.0)
        dot = a.dot * dval[:, None]
    return Dual(val, dot)
