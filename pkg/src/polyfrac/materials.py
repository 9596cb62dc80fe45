"""Constitutive constants and their validation.

Units are mm / MPa / N / s throughout; the global length scale L enters
the defaults through the gradient and phase-field length scales and the
grain-boundary flexibility parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class MaterialParams:
    """All constitutive constants of the coupled model.

    The flexibility parameters of micro-flexible grain boundaries are not
    stored here (they are boundary data, see :mod:`polyfrac.fem`), but the
    natural unit for them, 1/(H_g l_g^2), derives from these constants.
    """

    bulk_modulus: float = 71660.0          # K [MPa]
    shear_modulus: float = 27260.0         # G [MPa]
    yield_stress: float = 345.0            # tau_y [MPa]
    iso_hardening: float = 250.0           # H (same for all systems) [MPa]
    grad_hardening: float = 1000.0         # H_g [MPa]
    grad_length: float = 0.0533            # l_g [mm]
    relax_time: float = 1.0                # t* [s]
    drag_stress: float = 500.0             # sigma_d [MPa]
    rate_exponent: float = 8.0             # m [-]
    fracture_energy_ratio: float = 300.0   # G0d / l0 [MPa]
    pf_length: float = 0.02                # l0 [mm]
    penalty: float = 200.0 * 300.0         # alpha = beta * G0d/l0 [MPa]
    crit_plastic_strain: float = 0.1       # eps_p_crit [-]
    degradation_exponent: float = 2.0      # n [-]

    #: Lower bound on the degradation function; keeps the effective-stress
    #: division and the local Newton well-posed in fully failed material.
    degradation_floor: float = 1e-6

    def __post_init__(self):
        positive = (
            "bulk_modulus", "shear_modulus", "yield_stress", "iso_hardening",
            "grad_hardening", "grad_length", "relax_time", "drag_stress",
            "rate_exponent", "fracture_energy_ratio", "pf_length", "penalty",
            "crit_plastic_strain", "degradation_exponent", "degradation_floor",
        )
        for name in positive:
            v = getattr(self, name)
            if not (v > 0.0) or not _finite(v):
                raise ValueError(f"material parameter {name} must be strictly positive")
        if self.rate_exponent < 1.0:
            raise ValueError("rate_exponent must be >= 1")

    @property
    def flexibility_unit(self) -> float:
        """1/(H_g l_g^2), the natural scale of boundary flexibilities."""
        return 1.0 / (self.grad_hardening * self.grad_length**2)

    @property
    def fracture_stiffness(self) -> float:
        """G0d * l0 = fracture_energy_ratio * l0^2, the d-gradient modulus."""
        return self.fracture_energy_ratio * self.pf_length**2

    def with_length_scale(self, length_scale: float, three_d: bool = False) -> "MaterialParams":
        """Rescale the length-type parameters to a structure of size L.

        The 2D reference uses l_g = 0.0533 L and l0 = 0.02 L; coarse 3D
        meshes use the enlarged l_g = 0.1333 L and l0 = 0.08 L.
        """
        lg_rel, l0_rel = (0.1333, 0.08) if three_d else (0.0533, 0.02)
        return replace(
            self, grad_length=lg_rel * length_scale, pf_length=l0_rel * length_scale
        )


def _finite(v: float) -> bool:
    return v == v and abs(v) != float("inf")
