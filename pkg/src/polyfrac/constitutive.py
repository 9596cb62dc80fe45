"""Material-point model: damage-gated hyperelasticity, gradient crystal
viscoplasticity and the local damage update.

The free energy combines a volumetric-deviatoric Saint-Venant elastic part
(only the tensile branch is degraded), quadratic isotropic + gradient
hardening, a quadratic diffuse-crack surface energy and a penalty tying
the local damage ``phi`` to the global field ``d``.

Local integration is split in two stages matching the staggered global
solver: the plastic stage solves for the slip increments with ``phi``
frozen, the damage stage solves for ``phi`` with the mechanical state
frozen. Both stages run batched over many points at once; scalar wrappers
provide the single-point API used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .materials import MaterialParams
from .slip import SlipSystem, slip_dyads
from .tensors import I3, dev, trace

#: Iteration cap and absolute residual tolerance of the local solves.
LOCAL_MAX_ITER = 50
LOCAL_TOL = 1e-8


class LocalDivergence(RuntimeError):
    """A local (material-point) Newton loop failed; the step must be cut."""


# ----------------------------------------------------------------------
# Closed-form constitutive functions
# ----------------------------------------------------------------------

def degradation(phi, eps_p, params: MaterialParams):
    """Elastic degradation (1-phi)^(2(eps_p/eps_crit)^n), floored at g_min.

    Degradation requires both damage and accumulated plastic strain; with
    eps_p = 0 the value is exactly 1 for any phi.
    """
    g, _, _ = degradation_derivs(phi, eps_p, params)
    return g


def degradation_derivs(phi, eps_p, params: MaterialParams):
    """Degradation value and its partial derivatives (d/dphi, d/deps_p).

    The derivatives are those of the floored function: zero wherever the
    floor is active.
    """
    phi = np.asarray(phi, dtype=float)
    eps_p = np.asarray(eps_p, dtype=float)
    ec = params.crit_plastic_strain
    n = params.degradation_exponent
    gmin = params.degradation_floor

    ratio = np.maximum(eps_p, 0.0) / ec
    p = 2.0 * ratio**n
    base = np.maximum(1.0 - phi, 0.0)
    safe_base = np.maximum(base, 1e-300)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        g_raw = np.where(
            p > 0.0,
            np.where(base > 0.0, np.exp(p * np.log(safe_base)), 0.0),
            1.0,
        )
        floored = g_raw <= gmin
        g = np.maximum(g_raw, gmin)
        dg_dphi = np.where(
            floored | (p <= 0.0), 0.0, -p * np.exp((p - 1.0) * np.log(safe_base))
        )
        dp_deps = 2.0 * n / ec * np.where(ratio > 0.0, ratio ** (n - 1.0), 0.0)
        dg_deps = np.where(
            floored | (p <= 0.0) | (base <= 0.0),
            0.0,
            g_raw * np.log(safe_base) * dp_deps,
        )
    return g, dg_dphi, dg_deps


def elastic_energy_split(ee: np.ndarray, params: MaterialParams):
    """Tensile / compressive split of the Saint-Venant energy density.

    psi_plus = K/2 <tr E>_+^2 + G dev(E):dev(E);  psi_minus = K/2 <tr E>_-^2.
    """
    ee = np.asarray(ee, dtype=float)
    tr = trace(ee)
    trp = np.maximum(tr, 0.0)
    trm = np.minimum(tr, 0.0)
    de = dev(ee)
    dd = np.einsum("...ij,...ij->...", de, de)
    k, g = params.bulk_modulus, params.shear_modulus
    return 0.5 * k * trp**2 + g * dd, 0.5 * k * trm**2


def second_pk_stress(ce: np.ndarray, g_e, params: MaterialParams) -> np.ndarray:
    """Intermediate-configuration stress with only the tensile part degraded."""
    ee = (np.asarray(ce, dtype=float) - I3) / 2.0
    tr = trace(ee)
    trp = np.maximum(tr, 0.0)
    trm = np.minimum(tr, 0.0)
    k, g = params.bulk_modulus, params.shear_modulus
    se_plus = k * trp[..., None, None] * I3 + 2.0 * g * dev(ee)
    se_minus = k * trm[..., None, None] * I3
    return np.asarray(g_e)[..., None, None] * se_plus + se_minus


def schmid_stresses(me: np.ndarray, systems: Sequence[SlipSystem], g_e):
    """Resolved and effective (degradation-scaled) Schmid stresses."""
    dyads = slip_dyads(list(systems))
    tau = np.einsum("...ij,aij->...a", dev(me), dyads)
    return tau, tau / np.asarray(g_e)[..., None]


def yield_function(tau_hat, kappa, params: MaterialParams):
    """Overstress |tau_hat| - (tau_y + kappa)."""
    return np.abs(tau_hat) - (params.yield_stress + np.asarray(kappa))


def hardening_stress(k, div_g, params: MaterialParams):
    """Local hardening stress -H k + H_g l_g^2 div(g)."""
    return -params.iso_hardening * np.asarray(k) + (
        params.grad_hardening * params.grad_length**2 * np.asarray(div_g)
    )


def viscoplastic_rate(phi_yield, params: MaterialParams):
    """Overstress power law  (1/t*) <Phi/sigma_d>_+^m."""
    x = np.maximum(np.asarray(phi_yield, dtype=float) / params.drag_stress, 0.0)
    return x**params.rate_exponent / params.relax_time


# ----------------------------------------------------------------------
# State containers
# ----------------------------------------------------------------------

@dataclass
class MaterialPointState:
    """History variables at one quadrature point."""

    fp_inv: np.ndarray          # inverse plastic deformation gradient (3,3)
    k: np.ndarray               # hardening strains, one per system, each <= 0
    eps_p: float = 0.0          # accumulated plastic strain
    phi: float = 0.0            # local damage in [0, 1]

    @classmethod
    def initial(cls, n_systems: int = 12) -> "MaterialPointState":
        return cls(fp_inv=np.eye(3), k=np.zeros(n_systems))

    def copy(self) -> "MaterialPointState":
        return MaterialPointState(
            self.fp_inv.copy(), self.k.copy(), float(self.eps_p), float(self.phi)
        )


@dataclass
class PointInputs:
    f: np.ndarray               # total deformation gradient (3,3)
    div_g: float = 0.0          # divergence of the gradient-hardening field
    d: float = 0.0              # global phase field at the point
    dt: float = 0.1


@dataclass
class PointTangents:
    """Consistent directional derivatives of the plastic-stage outputs.

    ``dP_dF`` has shape (3, 3, n_seeds) where seed s corresponds to the
    deformation-gradient component ``f_components[s]``.
    """

    f_components: list
    dP_dF: np.ndarray
    dP_ddivg: np.ndarray        # (3, 3)
    dksum_dF: np.ndarray        # (n_seeds,)
    dksum_ddivg: float

    def d_P(self, delta_f: np.ndarray = None, delta_divg: float = 0.0) -> np.ndarray:
        out = self.dP_ddivg * delta_divg
        if delta_f is not None:
            for s, (i, j) in enumerate(self.f_components):
                out = out + self.dP_dF[:, :, s] * delta_f[i, j]
        return out

    def d_k_sum(self, delta_f: np.ndarray = None, delta_divg: float = 0.0) -> float:
        out = self.dksum_ddivg * delta_divg
        if delta_f is not None:
            for s, (i, j) in enumerate(self.f_components):
                out += self.dksum_dF[s] * delta_f[i, j]
        return float(out)


@dataclass
class PointOutputs:
    p: np.ndarray               # first Piola-Kirchhoff stress (3,3)
    s_ref: np.ndarray           # second Piola-Kirchhoff on the reference config
    k_sum: float
    psi_e_plus: float
    g_e: float
    tangents: PointTangents | None = None
    tau_hat: np.ndarray | None = None
    kappa: np.ndarray | None = None


ALL_F_COMPONENTS = [(i, j) for i in range(3) for j in range(3)]


# ----------------------------------------------------------------------
# Plastic stage (batched)
# ----------------------------------------------------------------------

@dataclass
class PlasticBatchResult:
    dlam: np.ndarray            # (n, na)
    fp_inv: np.ndarray          # (n, 3, 3)
    k: np.ndarray               # (n, na)
    eps_p: np.ndarray           # (n,)
    phi: np.ndarray             # frozen phi used by the stage (n,)
    p: np.ndarray               # (n, 3, 3)
    s_ref: np.ndarray           # (n, 3, 3)
    k_sum: np.ndarray           # (n,)
    psi_plus: np.ndarray        # (n,)
    g_e: np.ndarray             # (n,)
    tau_hat: np.ndarray         # (n, na), effective Schmid stresses
    kappa: np.ndarray           # (n, na)
    q_stress: np.ndarray        # (n,), conjugate to eps_p
    newton_iters: int = 0
    # consistent tangents (None unless requested)
    f_components: list | None = None
    dP_dF: np.ndarray | None = None       # (n, 3, 3, n_seeds)
    dP_ddivg: np.ndarray | None = None    # (n, 3, 3)
    dksum_dF: np.ndarray | None = None    # (n, n_seeds)
    dksum_ddivg: np.ndarray | None = None  # (n,)


def _degradation_dual(phi_const: np.ndarray, eps_p: ad.Dual, params) -> ad.Dual:
    g, _, dg_deps = degradation_derivs(phi_const, eps_p.val, params)
    return ad.Dual(g, eps_p.dot * dg_deps[:, None])


def _eval_plastic(x: ad.Dual, f: ad.Dual, div_g: ad.Dual, c: dict, params, dt,
                  outputs: bool = True):
    """Shared residual/output evaluation of the plastic stage.

    ``outputs=False`` skips the stress/energy quantities not needed inside
    the Newton loop.
    """
    kb, gb = params.bulk_modulus, params.shear_modulus
    hglg2 = params.grad_hardening * params.grad_length**2

    eps_p = ad.vector_norm(x) + c["eps_p_n"]
    g_e = _degradation_dual(c["phi"], eps_p, params)
    coef = (x * c["sgn"]) / g_e
    a_mat = (-ad.combine_dyads(coef, c["dyads"])) + I3
    fp_inv = ad.matmul(c["fp_inv_n"], a_mat)
    fe = ad.matmul(f, fp_inv)
    ce = ad.matmul(ad.transpose(fe), fe)
    ee = (ce - I3) * 0.5
    tr = ad.trace(ee)
    trp = ad.positive_part(tr)
    trm = tr - trp
    dev_e = ad.dev(ee)
    se_plus = ad.iso(trp * kb) + dev_e * (2.0 * gb)
    se = g_e * se_plus + ad.iso(trm * kb)
    me = ad.matmul(ce, se)
    tau = ad.contract_dyads(ad.dev(me), c["dyads"])
    tau_hat = tau / g_e
    k_var = (-x) + c["k_n"]
    kappa = k_var * (-params.iso_hardening) + div_g * hglg2
    phi_y = tau_hat * c["sgn"] - (kappa + params.yield_stress)
    resid = x - ad.macaulay_power(phi_y * (1.0 / params.drag_stress),
                                  params.rate_exponent) * (dt / params.relax_time)
    out = {
        "resid": resid, "fp_inv": fp_inv, "eps_p": eps_p, "g_e": g_e,
        "tau_hat": tau_hat, "kappa": kappa, "k_var": k_var,
    }
    if outputs:
        out["psi_plus"] = trp * trp * (0.5 * kb) + ad.ddot(dev_e, dev_e) * gb
        out["p"] = ad.matmul(ad.matmul(fe, se), ad.transpose(fp_inv))
        out["s_ref"] = ad.matmul(ad.matmul(fp_inv, se), ad.transpose(fp_inv))
        out["k_sum"] = ad.sum_systems(k_var)
    return out


def _constants(fp_inv_n, k_n, eps_p_n, phi, sgn, dyads, k_seeds):
    n, na = dyads.shape[0], dyads.shape[1]
    flat = np.ascontiguousarray(np.swapaxes(dyads.reshape(n, na, 9), 1, 2))
    return {
        "fp_inv_n": ad.constant(fp_inv_n, k_seeds),
        "k_n": k_n, "eps_p_n": eps_p_n, "phi": phi,
        "sgn": sgn, "dyads": flat,
    }


def integrate_plastic_batch(
    fp_inv_n: np.ndarray,
    k_n: np.ndarray,
    eps_p_n: np.ndarray,
    phi: np.ndarray,
    f: np.ndarray,
    div_g: np.ndarray,
    dt: float,
    dyads: np.ndarray,
    params: MaterialParams,
    f_components: list | None = None,
    tangents: bool = True,
) -> PlasticBatchResult:
    """Backward-Euler update of the slip increments for a batch of points.

    Solves, for every point, R_alpha = dlam_alpha - dt/t* <Phi_alpha/sigma_d>^m = 0
    by full-step Newton with the slip-stress signs frozen from the elastic
    trial state and ``phi`` frozen at its current iterate.

    Raises LocalDivergence if any point fails to converge within the
    iteration cap or produces non-finite residuals.
    """
    n, na = k_n.shape
    if f_components is None:
        f_components = ALL_F_COMPONENTS

    # Elastic trial pass (value-only) fixes the slip-stress signs.
    x0 = ad.constant(np.zeros((n, na)), 0)
    c0 = _constants(fp_inv_n, k_n, eps_p_n, phi, np.ones((n, na)), dyads, 0)
    trial = _eval_plastic(x0, ad.constant(f, 0), ad.constant(div_g, 0), c0,
                          params, dt, outputs=False)
    sgn = np.where(trial["tau_hat"].val >= 0.0, 1.0, -1.0)

    x = np.zeros((n, na))
    converged = np.zeros(n, dtype=bool)
    idx = np.arange(n)
    seed_x = np.broadcast_to(np.eye(na), (n, na, na)).copy()
    total_iters = 0

    for _ in range(LOCAL_MAX_ITER + 1):
        act = idx[~converged]
        if act.size == 0:
            break
        xa = ad.seeded(x[act], seed_x[act])
        ca = _constants(fp_inv_n[act], k_n[act], eps_p_n[act], phi[act],
                        sgn[act], dyads[act], na)
        fa = ad.constant(f[act], na)
        ga = ad.constant(div_g[act], na)
        out = _eval_plastic(xa, fa, ga, ca, params, dt, outputs=False)
        r = out["resid"].val
        if not np.all(np.isfinite(r)):
            raise LocalDivergence("non-finite residual in plastic stage")
        ok = np.abs(r).max(axis=1) <= LOCAL_TOL
        if total_iters >= LOCAL_MAX_ITER:
            if not ok.all():
                raise LocalDivergence(
                    f"plastic stage: {int((~ok).sum())} points unconverged "
                    f"after {LOCAL_MAX_ITER} iterations"
                )
            converged[act] = True
            break
        jac = np.swapaxes(out["resid"].dot, 1, 2)
        try:
            delta = np.linalg.solve(jac, -r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise LocalDivergence(f"singular local Jacobian: {exc}") from exc
        # apply the correction to converged points too: one polishing step
        # puts them at machine precision, which the tangent extraction and
        # the dlam >= 0 guarantee both benefit from
        x[act] += delta
        converged[act[ok]] = True
        total_iters += 1
    else:
        raise LocalDivergence("plastic stage failed to converge")

    # Final pass: outputs and, if requested, consistent tangents via the
    # implicit function theorem on the converged residual.
    nf = len(f_components)
    k_seeds = na + nf + 1 if tangents else 0
    if tangents:
        sx = np.zeros((n, k_seeds, na))
        sx[:, :na, :] = np.eye(na)
        sf = np.zeros((n, k_seeds, 3, 3))
        for s, (i, j) in enumerate(f_components):
            sf[:, na + s, i, j] = 1.0
        sg = np.zeros((n, k_seeds))
        sg[:, na + nf] = 1.0
        xd = ad.seeded(x, sx)
        fd = ad.seeded(f, sf)
        gd = ad.seeded(div_g, sg)
    else:
        xd = ad.constant(x, 0)
        fd = ad.constant(f, 0)
        gd = ad.constant(div_g, 0)
    cf = _constants(fp_inv_n, k_n, eps_p_n, phi, sgn, dyads, k_seeds)
    out = _eval_plastic(xd, fd, gd, cf, params, dt)

    dlam = np.maximum(x, 0.0)
    if x.min() < -10.0 * LOCAL_TOL:
        raise LocalDivergence("negative slip increment at convergence")

    g_raw, dg_dphi, dg_deps = degradation_derivs(phi, out["eps_p"].val, params)
    q_stress = -dg_deps * out["psi_plus"].val

    res = PlasticBatchResult(
        dlam=dlam,
        fp_inv=out["fp_inv"].val,
        k=out["k_var"].val,
        eps_p=out["eps_p"].val,
        phi=np.asarray(phi, float).copy(),
        p=out["p"].val,
        s_ref=out["s_ref"].val,
        k_sum=out["k_sum"].val,
        psi_plus=out["psi_plus"].val,
        g_e=out["g_e"].val,
        tau_hat=out["tau_hat"].val,
        kappa=out["kappa"].val,
        q_stress=q_stress,
        newton_iters=total_iters,
    )
    if tangents:
        jac = np.swapaxes(out["resid"].dot[:, :na, :], 1, 2)
        rhs = -np.swapaxes(out["resid"].dot[:, na:, :], 1, 2)   # (n, na, nf+1)
        try:
            dx_dp = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError as exc:
            raise LocalDivergence(f"singular local Jacobian: {exc}") from exc
        dp_dp = out["p"].dot[:, na:] + np.einsum(
            "naij,nap->npij", out["p"].dot[:, :na], dx_dp
        )
        dks_dp = out["k_sum"].dot[:, na:] + np.einsum(
            "na,nap->np", out["k_sum"].dot[:, :na], dx_dp
        )
        res.f_components = list(f_components)
        res.dP_dF = np.moveaxis(dp_dp[:, :nf], 1, -1)           # (n,3,3,nf)
        res.dP_ddivg = dp_dp[:, nf]
        res.dksum_dF = dks_dp[:, :nf]
        res.dksum_ddivg = dks_dp[:, nf]
    return res


# ----------------------------------------------------------------------
# Damage stage (batched)
# ----------------------------------------------------------------------

_PHI_CAP = 1.0 - 1e-12


def damage_driving_terms(phi, psi_plus, eps_p, params: MaterialParams):
    """Crack driving force -dg/dphi * psi_plus and its phi-derivative.

    Uses the un-floored degradation function so the damage residual stays
    continuous; the floor only guards the stress evaluation. The base
    1 - phi is clamped at the solver's cap so values at phi = 1 stay
    finite and consistent with the saturation test.
    """
    phi = np.asarray(phi, dtype=float)
    ec, n = params.crit_plastic_strain, params.degradation_exponent
    p = 2.0 * (np.maximum(np.asarray(eps_p, float), 0.0) / ec) ** n
    base = np.maximum(1.0 - phi, 1.0 - _PHI_CAP)
    with np.errstate(over="ignore"):
        t = np.where(p > 0.0, p * np.exp((p - 1.0) * np.log(base)) * psi_plus, 0.0)
        dt = np.where(
            p > 0.0, -p * (p - 1.0) * np.exp((p - 2.0) * np.log(base)) * psi_plus, 0.0
        )
    return t, dt


def damage_residual(phi, psi_plus, eps_p, d, params: MaterialParams):
    """Local damage residual -dg/dphi psi+ - (G0d/l0) phi - alpha (phi - d)."""
    drive, _ = damage_driving_terms(phi, psi_plus, eps_p, params)
    return (
        drive
        - params.fracture_energy_ratio * np.asarray(phi)
        - params.penalty * (np.asarray(phi) - np.asarray(d))
    )


def integrate_damage_batch(
    phi_n: np.ndarray,
    psi_plus: np.ndarray,
    eps_p: np.ndarray,
    d: np.ndarray,
    params: MaterialParams,
):
    """Solve the trial damage per point and apply the irreversible update.

    Returns ``(phi_new, dphi_dd)`` with phi_new = max(phi_n, phi_trial)
    clipped to [0, 1]. ``dphi_dd`` is zero wherever the irreversibility
    clamp or the phi = 1 cap is active.

    For plastic-strain exponents p = 2(eps_p/eps_crit)^n below one, the
    residual diverges to +inf as phi -> 1, so it is non-monotone with an
    interior minimum; the physical trial value is the stable-branch root
    on [0, phi_min]. The trial saturates at 1 only when no such root
    exists (driving force exceeding the resistance everywhere).
    """
    phi_n = np.asarray(phi_n, dtype=float)
    psi_plus = np.asarray(psi_plus, dtype=float)
    eps_p = np.asarray(eps_p, dtype=float)
    d = np.broadcast_to(np.asarray(d, dtype=float), phi_n.shape).astype(float)
    b = params.fracture_energy_ratio
    alpha = params.penalty
    hi_cap = _PHI_CAP

    def resid(phi):
        drive, ddrive = damage_driving_terms(phi, psi_plus, eps_p, params)
        return drive - b * phi - alpha * (phi - d), ddrive - b - alpha

    ec, nexp = params.crit_plastic_strain, params.degradation_exponent
    p = 2.0 * (np.maximum(eps_p, 0.0) / ec) ** nexp
    singular = (p > 0.0) & (p < 1.0) & (psi_plus > 0.0)
    slope_gain = p * (1.0 - p) * psi_plus        # growth rate of the driving term
    rising = singular & (slope_gain >= b + alpha)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        base_star = ((b + alpha) / np.where(singular, slope_gain, 1.0)) ** (
            1.0 / (p - 2.0)
        )
    hi_eff = np.where(
        singular & ~rising, np.minimum(1.0 - base_star, hi_cap), hi_cap
    )
    hi_eff = np.maximum(hi_eff, 0.0)

    y0, _ = resid(np.zeros_like(phi_n))
    yh, _ = resid(hi_eff)
    at_zero = y0 <= 0.0           # root at or below zero
    saturated = ~at_zero & (rising | (yh > 0.0))

    phi = np.clip(phi_n, 0.0, hi_eff)
    lo = np.zeros_like(phi_n)
    hi = hi_eff.copy()
    done = saturated | at_zero
    dy_root = np.full_like(phi_n, -(b + alpha))

    for _ in range(LOCAL_MAX_ITER):
        if done.all():
            break
        y, dy = resid(phi)
        if not np.all(np.isfinite(y[~done])):
            raise LocalDivergence("non-finite residual in damage stage")
        conv = np.abs(y) <= LOCAL_TOL
        newly = conv & ~done
        dy_root = np.where(newly, dy, dy_root)
        pos = y > 0.0
        active = ~done & ~conv
        lo = np.where(active & pos, phi, lo)
        hi = np.where(active & ~pos, phi, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = phi - y / dy
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi) | (dy >= 0.0)
        nxt = np.where(bad, 0.5 * (lo + hi), step)
        # one polishing Newton step for freshly converged points
        polish = np.where(
            np.isfinite(step) & (dy < 0.0), np.clip(step, 0.0, hi_cap), phi
        )
        phi = np.where(done, phi, np.where(newly, polish, nxt))
        done |= conv
    else:
        raise LocalDivergence(
            f"damage stage: {int((~done).sum())} points unconverged"
        )

    phi_trial = np.where(saturated, 1.0, np.where(at_zero, 0.0, phi))
    phi_new = np.maximum(phi_n, np.clip(phi_trial, 0.0, 1.0))
    interior = ~saturated & ~at_zero & (phi_trial > phi_n)
    with np.errstate(divide="ignore"):
        dphi_dd = np.where(interior & (dy_root < 0.0), -alpha / dy_root, 0.0)
    return phi_new, dphi_dd


# ----------------------------------------------------------------------
# Point-level wrappers
# ----------------------------------------------------------------------

def integrate_plastic_stage(
    state_n: MaterialPointState,
    inputs: PointInputs,
    systems: Sequence[SlipSystem],
    params: MaterialParams,
    phi: float | None = None,
    tangents: bool = True,
):
    """Single-point plastic stage; ``phi`` defaults to the committed value.

    Returns (dlam, trial state, PointOutputs).
    """
    dyads = slip_dyads(list(systems))[None]
    phi_val = state_n.phi if phi is None else float(phi)
    res = integrate_plastic_batch(
        state_n.fp_inv[None], state_n.k[None], np.array([state_n.eps_p]),
        np.array([phi_val]), np.asarray(inputs.f, float)[None],
        np.array([float(inputs.div_g)]), inputs.dt, dyads, params,
        tangents=tangents,
    )
    trial = MaterialPointState(
        fp_inv=res.fp_inv[0], k=res.k[0],
        eps_p=float(res.eps_p[0]), phi=phi_val,
    )
    tang = None
    if tangents:
        tang = PointTangents(
            f_components=res.f_components,
            dP_dF=res.dP_dF[0],
            dP_ddivg=res.dP_ddivg[0],
            dksum_dF=res.dksum_dF[0],
            dksum_ddivg=float(res.dksum_ddivg[0]),
        )
    outputs = PointOutputs(
        p=res.p[0], s_ref=res.s_ref[0], k_sum=float(res.k_sum[0]),
        psi_e_plus=float(res.psi_plus[0]), g_e=float(res.g_e[0]),
        tangents=tang, tau_hat=res.tau_hat[0], kappa=res.kappa[0],
    )
    return res.dlam[0], trial, outputs


def integrate_damage_stage(
    state: MaterialPointState,
    psi_e_plus: float,
    eps_p: float,
    d: float,
    params: MaterialParams,
) -> float:
    """Single-point damage stage: solve the trial value, never decrease phi."""
    phi_new, _ = integrate_damage_batch(
        np.array([state.phi]), np.array([psi_e_plus]),
        np.array([eps_p]), np.array([d]), params,
    )
    return float(phi_new[0])


def fd_point_tangents(
    state_n: MaterialPointState,
    inputs: PointInputs,
    systems: Sequence[SlipSystem],
    params: MaterialParams,
    phi: float | None = None,
    h: float = 1e-6,
) -> PointTangents:
    """Central finite-difference fallback for the plastic-stage tangents."""

    def run(f, div_g):
        _, _, out = integrate_plastic_stage(
            state_n, PointInputs(f=f, div_g=div_g, d=inputs.d, dt=inputs.dt),
            systems, params, phi=phi, tangents=False,
        )
        return out

    f0 = np.asarray(inputs.f, dtype=float)
    comps = ALL_F_COMPONENTS
    dp_df = np.zeros((3, 3, len(comps)))
    dks_df = np.zeros(len(comps))
    for s, (i, j) in enumerate(comps):
        hf = h * max(1.0, abs(f0[i, j]))
        fp = f0.copy(); fp[i, j] += hf
        fm = f0.copy(); fm[i, j] -= hf
        op, om = run(fp, inputs.div_g), run(fm, inputs.div_g)
        dp_df[:, :, s] = (op.p - om.p) / (2.0 * hf)
        dks_df[s] = (op.k_sum - om.k_sum) / (2.0 * hf)
    hg = h * max(1.0, abs(float(inputs.div_g)))
    op = run(f0, inputs.div_g + hg)
    om = run(f0, inputs.div_g - hg)
    return PointTangents(
        f_components=list(comps),
        dP_dF=dp_df,
        dP_ddivg=(op.p - om.p) / (2.0 * hg),
        dksum_dF=dks_df,
        dksum_ddivg=float((op.k_sum - om.k_sum) / (2.0 * hg)),
    )


# ----------------------------------------------------------------------
# Dissipation diagnostic
# ----------------------------------------------------------------------

@dataclass
class WorkConjugates:
    """End-of-step conjugates entering the discrete bulk dissipation."""

    tau_hat_abs: np.ndarray     # |tau_hat| per system
    kappa: np.ndarray           # hardening stresses per system
    q_stress: float             # conjugate to the accumulated plastic strain
    y_phi: float = 0.0          # local damage residual (0 at interior roots)


def dissipation_increment(
    state_n: MaterialPointState,
    state_np1: MaterialPointState,
    conj: WorkConjugates,
) -> float:
    """Discrete bulk dissipation of one accepted step (diagnostic only).

    Me:Lp dt + Q dq + sum kappa dk + Y_phi dphi, all with end-of-step
    conjugates; the first term reduces to sum |tau_hat| dlam.
    """
    dlam = state_n.k - state_np1.k
    d_eps = state_np1.eps_p - state_n.eps_p
    dk = state_np1.k - state_n.k
    dphi = state_np1.phi - state_n.phi
    return float(
        np.dot(conj.tau_hat_abs, dlam)
        + conj.q_stress * d_eps
        + np.dot(conj.kappa, dk)
        + conj.y_phi * dphi
    )
