"""FCC slip-system catalogue and lattice rotations.

The 12 face-centered-cubic slip systems are stored as integer Miller-type
vectors and normalized on access. Grain orientations are given as
three-component "Rodrigues angle" triples; two interpretations are
supported (see :func:`rotation_matrix`) because published orientation
tables do not always state which one they use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: (direction, plane normal) integer pairs of the 12 FCC systems.
_FCC_RAW = [
    ((-1, 1, 0), (1, 1, 1)),
    ((1, 0, -1), (1, 1, 1)),
    ((0, -1, 1), (1, 1, 1)),
    ((-1, -1, 0), (1, -1, -1)),
    ((1, 0, 1), (1, -1, -1)),
    ((0, 1, -1), (1, -1, -1)),
    ((1, 1, 0), (-1, 1, -1)),
    ((-1, 0, 1), (-1, 1, -1)),
    ((0, -1, -1), (-1, 1, -1)),
    ((1, -1, 0), (-1, -1, 1)),
    ((-1, 0, -1), (-1, -1, 1)),
    ((0, 1, 1), (-1, -1, 1)),
]

#: Recognized conventions for a 3-component orientation triple r:
#: "vector"             r = tan(theta/2) * axis (classic Rodrigues vector)
#: "axis_angle_degrees" axis = r/|r|, rotation angle |r| in degrees
ROTATION_CONVENTIONS = ("axis_angle_degrees", "vector")


@dataclass(frozen=True)
class SlipSystem:
    """One slip system: unit slip direction and unit plane normal."""

    direction: np.ndarray
    plane_normal: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        m = np.asarray(self.plane_normal, dtype=float)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "plane_normal", m)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12 or abs(np.linalg.norm(m) - 1.0) > 1e-12:
            raise ValueError("slip direction and plane normal must be unit vectors")
        if abs(float(d @ m)) > 1e-12:
            raise ValueError("slip direction must lie in the slip plane")

    @property
    def dyad(self) -> np.ndarray:
        """Schmid dyad s (x) m (traceless by orthogonality)."""
        return np.outer(self.direction, self.plane_normal)


def fcc_slip_systems() -> list[SlipSystem]:
    """The 12 normalized FCC systems in the cubic reference frame."""
    out = []
    for s, m in _FCC_RAW:
        s = np.asarray(s, dtype=float)
        m = np.asarray(m, dtype=float)
        out.append(SlipSystem(s / np.linalg.norm(s), m / np.linalg.norm(m)))
    return out


def rotation_matrix(rodrigues, convention: str = "axis_angle_degrees") -> np.ndarray:
    """Rotation matrix from a 3-component orientation triple.

    ``convention="vector"`` interprets r as the Rodrigues vector
    tan(theta/2)*axis; ``"axis_angle_degrees"`` interprets |r| as the
    rotation angle in degrees about axis r/|r|. A zero triple is the
    identity under both.
    """
    r = np.asarray(rodrigues, dtype=float).reshape(3)
    if convention not in ROTATION_CONVENTIONS:
        raise ValueError(f"unknown rotation convention: {convention!r}")
    norm = np.linalg.norm(r)
    if norm == 0.0:
        return np.eye(3)
    if convention == "vector":
        # R = I + 2/(1+r.r) ([r]x + [r]x^2)
        rx = _skew(r)
        return np.eye(3) + 2.0 / (1.0 + norm**2) * (rx + rx @ rx)
    theta = np.deg2rad(norm)
    axis = r / norm
    rx = _skew(axis)
    return np.eye(3) + np.sin(theta) * rx + (1.0 - np.cos(theta)) * (rx @ rx)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def rotate_slip_systems(
    rodrigues, convention: str = "axis_angle_degrees"
) -> list[SlipSystem]:
    """Rotate the 12 FCC systems by a grain orientation triple."""
    rot = rotation_matrix(rodrigues, convention)
    return [
        SlipSystem(rot @ sys.direction, rot @ sys.plane_normal)
        for sys in fcc_slip_systems()
    ]


def rodrigues_from_matrix(rot: np.ndarray, convention: str = "axis_angle_degrees"):
    """Orientation triple reproducing a given rotation matrix."""
    rot = np.asarray(rot, dtype=float)
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-14:
        return (0.0, 0.0, 0.0)
    axis = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    ) / (2.0 * np.sin(theta))
    if convention == "vector":
        return tuple(np.tan(theta / 2.0) * axis)
    return tuple(np.rad2deg(theta) * axis)


def shear_aligned_orientation(
    system: int = 0,
    tilt_deg: float = 0.0,
    convention: str = "axis_angle_degrees",
):
    """Orientation placing one FCC system in the in-plane shear frame.

    Maps the slip direction of ``system`` onto e1 and its plane normal
    onto e2 (unit resolved-shear factor under x-y shear), optionally tilted
    about e3 afterwards. Useful for constructing strongly plastifying
    bicrystal fixtures.
    """
    sys0 = fcc_slip_systems()[system]
    n = np.cross(sys0.direction, sys0.plane_normal)
    align = np.stack([sys0.direction, sys0.plane_normal, n])
    if tilt_deg:
        tilt = rotation_matrix((0.0, 0.0, tilt_deg), "axis_angle_degrees")
        align = tilt @ align
    return rodrigues_from_matrix(align, convention)


def slip_dyads(systems: list[SlipSystem]) -> np.ndarray:
    """Stacked Schmid dyads, shape (n_systems, 3, 3)."""
    return np.stack([s.dyad for s in systems])


#: Orientation triples used by the reference 2D ten-grain structure.
RODRIGUES_2D_10GRAIN = [
    (-3.67, 2.54, -0.52),
    (3.8, 22.4, 16.75),
    (-6.32, 5.63, -27.73),
    (-0.22, 0.26, -0.1),
    (0.08, 0.54, 0.02),
    (1.12, -1.05, -1.1),
    (1.4, 2.07, -0.64),
    (0.55, -0.53, -0.55),
    (0.71, -0.94, 1.02),
    (-0.97, -0.42, 0.37),
]

#: Orientation triples used by the reference 3D four-grain structure.
RODRIGUES_3D_4GRAIN = [
    (0.70, 1.81, 0.72),
    (-1.76, 1.73, 4.43),
    (2.56, -1.54, -0.23),
    (-0.35, 0.09, -0.32),
]
