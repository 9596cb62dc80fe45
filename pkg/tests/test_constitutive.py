import numpy as np
import pytest

from polyfrac import constitutive as co
from polyfrac import slip
from polyfrac.materials import MaterialParams
from polyfrac.slip import SlipSystem, fcc_slip_systems

from conftest import random_plastic_state


@pytest.fixture(scope="module")
def fcc():
    return fcc_slip_systems()


# -- closed-form pieces -------------------------------------------------

def test_degradation_examples(params):
    assert co.degradation(0.7, 0.0, params) == 1.0
    assert co.degradation(0.0, 5.0, params) == 1.0
    # (1 - 0.5)^(2 * 1^2) = 0.25 at eps_p = eps_crit, n = 2
    assert co.degradation(0.5, params.crit_plastic_strain, params) == pytest.approx(
        0.25, rel=1e-14
    )


def test_degradation_bounds_and_monotonicity(params):
    phi = np.linspace(0.0, 1.0, 50)
    eps = np.linspace(0.0, 10.0, 40)
    pp, ee = np.meshgrid(phi, eps, indexing="ij")
    g = co.degradation(pp, ee, params)
    assert (g >= params.degradation_floor).all()
    assert (g <= 1.0).all()
    assert (np.diff(g, axis=0) <= 1e-14).all()      # non-increasing in phi
    assert (np.diff(g, axis=1) <= 1e-14).all()      # non-increasing in eps_p
    np.testing.assert_array_equal(co.degradation(phi, 0.0 * phi, params), 1.0)


def test_degradation_derivs_match_fd(params):
    rng = np.random.default_rng(0)
    phi = rng.uniform(0.02, 0.95, 50)
    eps = rng.uniform(0.01, 0.4, 50)
    g, dphi, deps = co.degradation_derivs(phi, eps, params)
    h = 1e-7
    gp, _, _ = co.degradation_derivs(phi + h, eps, params)
    gm, _, _ = co.degradation_derivs(phi - h, eps, params)
    np.testing.assert_allclose((gp - gm) / (2 * h), dphi, rtol=1e-5, atol=1e-8)
    gp, _, _ = co.degradation_derivs(phi, eps + h, params)
    gm, _, _ = co.degradation_derivs(phi, eps - h, params)
    np.testing.assert_allclose((gp - gm) / (2 * h), deps, rtol=1e-5, atol=1e-8)


def test_elastic_energy_split_cases(params):
    zero = np.zeros((3, 3))
    assert co.elastic_energy_split(zero, params) == (0.0, 0.0)
    eps = 0.01
    plus, minus = co.elastic_energy_split(eps * np.eye(3), params)
    assert plus == pytest.approx(0.5 * params.bulk_modulus * (3 * eps) ** 2)
    assert minus == 0.0
    plus, minus = co.elastic_energy_split(-eps * np.eye(3), params)
    assert plus == 0.0
    assert minus == pytest.approx(0.5 * params.bulk_modulus * (3 * eps) ** 2)


def test_second_pk_stress_reference_and_shear(params):
    np.testing.assert_allclose(
        co.second_pk_stress(np.eye(3), 1.0, params), np.zeros((3, 3)), atol=1e-14
    )
    gamma = 1e-5
    ee = np.zeros((3, 3))
    ee[0, 1] = ee[1, 0] = gamma / 2.0
    ce = np.eye(3) + 2.0 * ee
    se = co.second_pk_stress(ce, 1.0, params)
    assert se[0, 1] == pytest.approx(params.shear_modulus * gamma, rel=1e-12)


def test_second_pk_compression_ignores_degradation(params):
    ce = (0.9**2) * np.eye(3)        # pure volumetric compression
    s1 = co.second_pk_stress(ce, 1.0, params)
    s2 = co.second_pk_stress(ce, 0.1, params)
    np.testing.assert_allclose(s1, s2, rtol=1e-14)


def test_schmid_stresses(fcc, params):
    tau, tau_hat = co.schmid_stresses(np.zeros((3, 3)), fcc, 1.0)
    np.testing.assert_array_equal(tau, np.zeros(12))

    s, m = fcc[0].direction, fcc[0].plane_normal
    me = 10.0 * (np.outer(s, m) + np.outer(m, s))
    tau, tau_hat = co.schmid_stresses(me, fcc, 0.5)
    assert tau[0] == pytest.approx(10.0, rel=1e-12)
    assert tau_hat[0] == pytest.approx(20.0, rel=1e-12)


def test_yield_function(params):
    assert co.yield_function(params.yield_stress, 0.0, params) == pytest.approx(0.0)
    assert co.yield_function(0.0, 0.0, params) == pytest.approx(-params.yield_stress)
    assert co.yield_function(400.0, -50.0, params) == pytest.approx(105.0)


def test_hardening_stress(params):
    assert co.hardening_stress(0.0, 0.0, params) == 0.0
    assert co.hardening_stress(-0.01, 0.0, params) == pytest.approx(2.5)
    # H_g l_g^2 with the reference values: 1000 * 0.0533^2
    assert co.hardening_stress(0.0, 1.0, params) == pytest.approx(
        1000.0 * 0.0533**2, rel=1e-12
    )


def test_viscoplastic_rate(params):
    assert co.viscoplastic_rate(-5.0, params) == 0.0
    assert co.viscoplastic_rate(params.drag_stress, params) == pytest.approx(
        1.0 / params.relax_time
    )
    assert co.viscoplastic_rate(params.drag_stress / 2.0, params) == pytest.approx(
        2.0**-8 / params.relax_time
    )


# -- plastic stage -------------------------------------------------------

def test_elastic_step_leaves_state_unchanged(fcc, params):
    state = co.MaterialPointState.initial()
    f = np.eye(3)
    f[0, 1] = 0.005                   # well below yield
    dlam, trial, out = co.integrate_plastic_stage(
        state, co.PointInputs(f=f, dt=0.1), fcc, params
    )
    np.testing.assert_array_equal(dlam, np.zeros(12))
    np.testing.assert_array_equal(trial.fp_inv, np.eye(3))
    np.testing.assert_array_equal(trial.k, np.zeros(12))
    assert trial.eps_p == 0.0
    assert out.g_e == 1.0


def _single_slip_residual(dlam, f, state_n, phi, div_g, dt, system, params):
    """Independent scalar residual for one slip system (oracle math)."""
    dyad = np.outer(system.direction, system.plane_normal)
    eps_p = state_n.eps_p + abs(dlam)
    p = 2.0 * (eps_p / params.crit_plastic_strain) ** params.degradation_exponent
    g_e = max((1.0 - phi) ** p, params.degradation_floor)

    # trial sign
    fe_tr = f @ state_n.fp_inv
    ce_tr = fe_tr.T @ fe_tr
    ee_tr = (ce_tr - np.eye(3)) / 2.0
    tr = np.trace(ee_tr)
    dev = ee_tr - tr / 3.0 * np.eye(3)
    g_tr = max((1.0 - phi) ** (2.0 * (state_n.eps_p / params.crit_plastic_strain)
                               ** params.degradation_exponent),
               params.degradation_floor)
    se_tr = g_tr * (params.bulk_modulus * max(tr, 0.0) * np.eye(3)
                    + 2.0 * params.shear_modulus * dev) \
        + params.bulk_modulus * min(tr, 0.0) * np.eye(3)
    me_tr = ce_tr @ se_tr
    me_dev = me_tr - np.trace(me_tr) / 3.0 * np.eye(3)
    sgn = 1.0 if (me_dev * dyad).sum() >= 0.0 else -1.0

    fp_inv = state_n.fp_inv @ (np.eye(3) - dlam / g_e * sgn * dyad)
    fe = f @ fp_inv
    ce = fe.T @ fe
    ee = (ce - np.eye(3)) / 2.0
    tr = np.trace(ee)
    dev = ee - tr / 3.0 * np.eye(3)
    se = g_e * (params.bulk_modulus * max(tr, 0.0) * np.eye(3)
                + 2.0 * params.shear_modulus * dev) \
        + params.bulk_modulus * min(tr, 0.0) * np.eye(3)
    me = ce @ se
    me_dev = me - np.trace(me) / 3.0 * np.eye(3)
    tau = (me_dev * dyad).sum()
    k = state_n.k[0] - dlam
    kappa = -params.iso_hardening * k + (
        params.grad_hardening * params.grad_length**2 * div_g
    )
    phi_yield = sgn * tau / g_e - (params.yield_stress + kappa)
    over = max(phi_yield / params.drag_stress, 0.0)
    return dlam - dt / params.relax_time * over**params.rate_exponent


def _bisect(fun, lo, hi, tol=1e-14, maxit=200):
    flo = fun(lo)
    for _ in range(maxit):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        if hi - lo < tol:
            return mid
        if (flo <= 0.0) == (fm <= 0.0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.mark.parametrize("m_exp", [1.0, 8.0])
def test_single_slip_matches_bisection_oracle(m_exp):
    from dataclasses import replace

    params = replace(MaterialParams(), rate_exponent=m_exp)
    system = SlipSystem(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    state = co.MaterialPointState.initial(1)
    phi, div_g, dt = 0.1, 0.01, 0.1
    for gamma in (0.02, 0.05, 0.1):
        f = np.eye(3)
        f[0, 1] = gamma
        inputs = co.PointInputs(f=f, div_g=div_g, dt=dt)
        dlam, trial, out = co.integrate_plastic_stage(
            state, inputs, [system], params, phi=phi
        )
        res = _single_slip_residual(
            float(dlam[0]), f, state, phi, div_g, dt, system, params
        )
        assert abs(res) < 1e-8
        oracle = _bisect(
            lambda x: _single_slip_residual(
                x, f, state, phi, div_g, dt, system, params
            ),
            0.0,
            1.0,
        )
        assert dlam[0] == pytest.approx(oracle, abs=1e-10)


def test_unit_overstress_rate(params):
    # lambda-dot * t* = 1 when the yield function equals the drag stress
    assert co.viscoplastic_rate(params.drag_stress, params) * params.relax_time == (
        pytest.approx(1.0, abs=1e-8)
    )


def test_converged_residual_below_tolerance(fcc, params):
    rng = np.random.default_rng(1)
    state, inputs, phi = random_plastic_state(rng, params)
    dlam, trial, out = co.integrate_plastic_stage(state, inputs, fcc, params, phi=phi)
    assert (dlam >= 0.0).all()
    # recompute the residual at the returned increments through the
    # public batch evaluation
    res = co.integrate_plastic_batch(
        state.fp_inv[None], state.k[None], np.array([state.eps_p]),
        np.array([phi]), np.asarray(inputs.f)[None], np.array([inputs.div_g]),
        inputs.dt, slip.slip_dyads(fcc)[None], params, tangents=False,
    )
    np.testing.assert_allclose(res.dlam[0], dlam, atol=1e-10)


def test_hardening_strains_stay_negative_eps_p_monotone(fcc, params):
    state = co.MaterialPointState.initial()
    eps_prev = 0.0
    for step in range(12):
        gamma = 0.004 * (step + 1)
        f = np.eye(3)
        f[0, 1] = gamma
        dlam, state, out = co.integrate_plastic_stage(
            state, co.PointInputs(f=f, dt=0.1), fcc, params
        )
        assert (state.k <= 1e-12).all()
        assert state.eps_p >= eps_prev - 1e-15
        eps_prev = state.eps_p


def test_plastic_incompressibility_drift(params):
    # 100-step single-slip shear ramp: det(Fp_inv) must stay near 1
    system = SlipSystem(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    state = co.MaterialPointState.initial(1)
    for step in range(100):
        f = np.eye(3)
        f[0, 1] = 0.002 * (step + 1)
        _, state, _ = co.integrate_plastic_stage(
            state, co.PointInputs(f=f, dt=0.05), [system], params
        )
    det = np.linalg.det(state.fp_inv)
    assert abs(det - 1.0) <= 5e-3
    assert state.eps_p > 0.05       # the ramp really was plastic


def test_tangents_match_finite_differences(fcc, params):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        state, inputs, phi = random_plastic_state(rng, params)
        _, _, out = co.integrate_plastic_stage(state, inputs, fcc, params, phi=phi)
        fd = co.fd_point_tangents(state, inputs, fcc, params, phi=phi)
        scale = max(abs(out.tangents.dP_dF).max(), 1.0)
        worst = max(worst, abs(out.tangents.dP_dF - fd.dP_dF).max() / scale)
        worst = max(worst, abs(out.tangents.dP_ddivg - fd.dP_ddivg).max() / scale)
        kscale = max(abs(out.tangents.dksum_dF).max(), abs(out.tangents.dksum_ddivg),
                     1e-3)
        worst = max(worst, abs(out.tangents.dksum_dF - fd.dksum_dF).max() / kscale)
        worst = max(
            worst, abs(out.tangents.dksum_ddivg - fd.dksum_ddivg) / kscale
        )
    assert worst < 1e-6


# -- damage stage ---------------------------------------------------------

def test_damage_stage_virgin_point(params):
    state = co.MaterialPointState.initial()
    assert co.integrate_damage_stage(state, 0.0, 0.0, 0.0, params) == 0.0


def test_damage_stage_irreversibility(params):
    state = co.MaterialPointState.initial()
    state.phi = 0.6
    # trial value for these inputs is far below 0.6
    assert co.integrate_damage_stage(state, 0.1, 0.01, 0.1, params) == 0.6


def test_damage_stage_linear_case(params):
    # eps_p = 0 makes the driving term vanish: phi = alpha d / (B + alpha)
    state = co.MaterialPointState.initial()
    d = 0.3
    expected = params.penalty * d / (params.fracture_energy_ratio + params.penalty)
    assert co.integrate_damage_stage(state, 5.0, 0.0, d, params) == pytest.approx(
        expected, abs=1e-12
    )


def test_damage_stage_solves_residual(params):
    rng = np.random.default_rng(3)
    phi_n = np.zeros(64)
    psi = rng.uniform(0.0, 30.0, 64)
    eps = rng.uniform(0.0, 0.35, 64)
    d = rng.uniform(0.0, 0.9, 64)
    phi, dphi_dd = co.integrate_damage_batch(phi_n, psi, eps, d, params)
    assert (phi >= phi_n).all()
    assert (phi <= 1.0).all()
    interior = (phi > 0.0) & (phi < 1.0)
    res = co.damage_residual(phi[interior], psi[interior], eps[interior],
                             d[interior], params)
    assert np.abs(res).max() < 1e-7


def test_damage_stage_dphi_dd_matches_fd(params):
    rng = np.random.default_rng(4)
    psi = rng.uniform(1.0, 30.0, 32)
    eps = rng.uniform(0.05, 0.3, 32)
    d = rng.uniform(0.1, 0.8, 32)
    phi_n = np.zeros(32)
    _, dphi = co.integrate_damage_batch(phi_n, psi, eps, d, params)
    h = 1e-7
    pp, _ = co.integrate_damage_batch(phi_n, psi, eps, d + h, params)
    pm, _ = co.integrate_damage_batch(phi_n, psi, eps, d - h, params)
    np.testing.assert_allclose((pp - pm) / (2 * h), dphi, rtol=1e-5, atol=1e-8)


def test_damage_never_saturates_without_plastic_drive(params):
    # large stored energy but negligible plastic strain must not blow the
    # local damage to 1 (the residual's singular tail near phi = 1 is not
    # a physical root)
    phi, _ = co.integrate_damage_batch(
        np.zeros(4), np.array([1.0, 10.0, 100.0, 1000.0]),
        np.full(4, 1e-3), np.zeros(4), params,
    )
    assert (phi < 0.01).all()


# -- dissipation -----------------------------------------------------------

def test_dissipation_zero_for_elastic_step(fcc, params):
    state = co.MaterialPointState.initial()
    f = np.eye(3)
    f[0, 1] = 0.004
    dlam, trial, out = co.integrate_plastic_stage(
        state, co.PointInputs(f=f, dt=0.1), fcc, params
    )
    conj = co.WorkConjugates(
        tau_hat_abs=np.abs(out.tau_hat), kappa=out.kappa, q_stress=0.0, y_phi=0.0
    )
    assert co.dissipation_increment(state, trial, conj) == pytest.approx(0.0, abs=1e-10)


def test_dissipation_nonnegative_on_random_paths(fcc, params):
    rng = np.random.default_rng(5)
    for trial_idx in range(10):
        state = co.MaterialPointState.initial()
        gamma = 0.0
        for step in range(6):
            gamma += rng.uniform(0.0, 0.015)
            f = np.eye(3)
            f[0, 1] = gamma
            f[1, 1] = 1.0 + rng.uniform(-0.002, 0.004)
            inputs = co.PointInputs(f=f, div_g=0.0, dt=0.1)
            phi_iter = state.phi
            dlam, new_state, out = co.integrate_plastic_stage(
                state, inputs, fcc, params, phi=phi_iter
            )
            d = min(1.0, state.phi + rng.uniform(0.0, 0.1))
            phi_new = co.integrate_damage_stage(
                new_state, out.psi_e_plus, new_state.eps_p, d, params
            )
            new_state.phi = phi_new
            g, _, dg_deps = co.degradation_derivs(
                phi_new, new_state.eps_p, params
            )
            conj = co.WorkConjugates(
                tau_hat_abs=np.abs(out.tau_hat),
                kappa=out.kappa,
                q_stress=float(-dg_deps * out.psi_e_plus),
                y_phi=float(co.damage_residual(
                    phi_new, out.psi_e_plus, new_state.eps_p, d, params
                )),
            )
            inc = co.dissipation_increment(state, new_state, conj)
            energy_scale = max(out.psi_e_plus, 1.0)
            assert inc >= -1e-8 * energy_scale
            state = new_state
