"""Scripted stand-in for the discrete problem, for driving the staggered
solver through prescribed convergence behaviors."""

import numpy as np


class ScriptedProblem:
    """Residual norms evolve geometrically per applied update.

    Each block's residual vector decays (or grows) by ``factor`` per
    Newton correction applied to it; the complementary block is untouched.
    Residual-check assemblies do not change the state. The ug residual can
    optionally be re-inflated when the d block updates, to model coupling.
    """

    blocks = ("ug", "d")

    def __init__(self, r_ug=(1.0, 0.0), r_d=(0.0,), factor_ug=0.5,
                 factor_d=0.5, coupling=0.0, update_norm=1.0):
        self.r = {"ug": np.array(r_ug, dtype=float),
                  "d": np.array(r_d, dtype=float)}
        self.factor = {"ug": factor_ug, "d": factor_d}
        self.coupling = coupling
        self.update_norm = update_norm
        self.time = 0.0
        self.dt = 0.0

    def fields_of(self, block):
        return ("u", "g") if block == "ug" else ("d",)

    def set_time(self, t, dt):
        self.time = t
        self.dt = dt

    def snapshot(self):
        return {b: v.copy() for b, v in self.r.items()}

    def restore(self, snap):
        self.r = {b: v.copy() for b, v in snap.items()}

    def assemble(self, block, matrix=True, persist=True):
        vec = self.r[block].copy()
        return vec, np.eye(len(vec)) if matrix else None

    def residual_norms(self, block):
        vec, _ = self.assemble(block, matrix=False, persist=False)
        return self.norms_of(block, vec)

    def norms_of(self, block, vec):
        return {
            f: float(abs(vec[i])) for i, f in enumerate(self.fields_of(block))
        }

    def solve_correction(self, matrix, residual):
        return np.full_like(residual, self.update_norm)

    def apply_update(self, block, delta):
        self.r[block] = self.r[block] * self.factor[block]
        if block == "d" and self.coupling:
            self.r["ug"] = np.maximum(self.r["ug"], self.coupling)
