"""Fixed-dimension (3x3) tensor algebra shared by all constitutive code.

All functions accept either a single tensor of shape (3, 3) or a batch of
shape (..., 3, 3) and operate on the trailing axes. Plane-strain problems
embed their in-plane kinematics into full 3x3 tensors (out-of-plane
stretch 1), so rank-2 algebra in 3D is the only case supported.
"""

from __future__ import annotations

import numpy as np

I3 = np.eye(3)

#: Relative tolerance for symmetry / zero-trace checks.
SYM_RTOL = 1e-12


def is_symmetric(a: np.ndarray, rtol: float = SYM_RTOL) -> bool:
    """True if A equals its transpose to `rtol` relative to its magnitude."""
    a = np.asarray(a, dtype=float)
    scale = np.abs(a).max()
    if scale == 0.0:
        return True
    return bool(np.abs(a - np.swapaxes(a, -1, -2)).max() <= rtol * scale)


def macaulay(x):
    """Split a scalar (or array) into positive and negative parts.

    Returns ``(x + |x|)/2`` and ``(x - |x|)/2``; their sum reproduces x.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    return (x + ax) / 2.0, (x - ax) / 2.0


def green_lagrange(ce: np.ndarray) -> np.ndarray:
    """Strain measure (Ce - I)/2 from a right Cauchy-Green tensor.

    Raises ValueError if Ce is not symmetric.
    """
    ce = np.asarray(ce, dtype=float)
    if not is_symmetric(ce):
        raise ValueError("right Cauchy-Green tensor must be symmetric")
    return (ce - I3) / 2.0


def mandel_stress(ce: np.ndarray, se: np.ndarray) -> np.ndarray:
    """Product Ce.Se (generally non-symmetric)."""
    return np.asarray(ce, dtype=float) @ np.asarray(se, dtype=float)


def trace(a: np.ndarray):
    """Trace over the trailing two axes."""
    return np.trace(np.asarray(a, dtype=float), axis1=-2, axis2=-1)


def dev(a: np.ndarray) -> np.ndarray:
    """Deviatoric part A - tr(A)/3 I."""
    a = np.asarray(a, dtype=float)
    return a - trace(a)[..., None, None] / 3.0 * I3


def ddot(a: np.ndarray, b: np.ndarray):
    """Full contraction A : B over the trailing two axes."""
    return np.einsum("...ij,...ij->...", np.asarray(a, float), np.asarray(b, float))


def vol_dev_split(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a symmetric tensor into (trace, deviatoric part)."""
    a = np.asarray(a, dtype=float)
    tr = trace(a)
    return tr, a - tr[..., None, None] / 3.0 * I3


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part (A + A^T)/2."""
    a = np.asarray(a, dtype=float)
    return (a + np.swapaxes(a, -1, -2)) / 2.0
