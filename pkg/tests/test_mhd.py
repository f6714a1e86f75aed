"""Tests for the semi-discrete MHD right-hand sides.

Covers:
- Formulation and State validation (kinds, supg restrictions, positivity,
  solenoidal div-form coefficients)
- supg_tau frozen values plus bound properties
- compute_flux against a dense normal-equations oracle
- current_density (uniform, linearity, convergence to the analytic curl)
- electric field special cases and penalty switches
- uniform-state equilibria for every formulation x stabilization combo
- structure identities (bdot vs curl of adot, weak-divergence preservation)
- chain-rule energy audits, the dissipation identity with Ohmic heating
  disabled, and a finite-difference cross-check of the audit itself
- helicity audits for the projected-transport form and the two-term
  balance of the plain form with current damping
- neutrality of the thermal penalty and the upwind facet terms under a
  constant test function
- supg history (lagged Bdot), hm1 degeneracy guard, evaluation purity
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexmhd import assembly, mhd, spaces
from hexmhd.mesh import build_periodic_box
from hexmhd.spaces import Field, build_space, derivative_operator, interpolate

TWO_PI = 2.0 * np.pi
MESH = build_periodic_box((1.0, 1.0, 0.5), (4, 4, 2))

# smooth periodic profiles on the (1, 1, 0.5) box; z uses the doubled
# wavenumber so every field closes over the short axis
def dens_profile(x, y, z):
    return 2.0 + 0.3 * np.sin(TWO_PI * x) * np.cos(TWO_PI * y)


def thermal_profile(x, y, z):
    return 1.5 + 0.25 * np.cos(TWO_PI * x) * np.sin(TWO_PI * y) + 0.1 * np.cos(
        2 * TWO_PI * z
    )


VEL_FNS = (
    lambda x, y, z: 0.1 + 0.3 * np.sin(TWO_PI * y) + 0.2 * np.cos(2 * TWO_PI * z),
    lambda x, y, z: -0.2 + 0.25 * np.sin(TWO_PI * x) * np.cos(2 * TWO_PI * z),
    lambda x, y, z: 0.15 + 0.2 * np.cos(TWO_PI * x) * np.sin(TWO_PI * y),
)

POTENTIAL_FNS = (
    lambda x, y, z: 0.3 * np.sin(TWO_PI * y) + 0.2 * np.cos(2 * TWO_PI * z),
    lambda x, y, z: 0.25 * np.sin(TWO_PI * x) + 0.1 * np.sin(2 * TWO_PI * z),
    lambda x, y, z: 0.2 * np.cos(TWO_PI * x) * np.sin(TWO_PI * y),
)

SMOOTH_B_FNS = (
    lambda x, y, z: 1.0 + 0.2 * np.sin(TWO_PI * y),
    lambda x, y, z: 0.4 + 0.15 * np.cos(2 * TWO_PI * z),
    lambda x, y, z: -0.3 + 0.1 * np.sin(TWO_PI * x),
)


def constant_fns(vec):
    return tuple(lambda x, y, z, v=v: v + 0.0 * x for v in vec)


def fill(field, fn):
    field.data[:] = interpolate(field.space, fn).data


def make_state(form, mesh=MESH, degree=2, b_style="smooth", b_offset=(1.0, 0.4, -0.3), seed=3):
    """Smooth positive hydro fields plus a magnetic field of the requested
    roughness.  Div forms always get B = curl of the stored potential so the
    solenoidal check passes; b_offset (a uniform field, itself divergence
    free) keeps |B| away from zero for the hm1 variants.  b_style "rough"
    draws random potential coefficients so facet jumps of the current are
    genuinely nonzero."""
    state = mhd.State(form, mesh, degree)
    rng = np.random.default_rng(seed)
    fill(state.n, dens_profile)
    fill(state.V, VEL_FNS)
    fill(state.thermal, thermal_profile)
    if form.magnetic_kind == "curl":
        if b_style == "rough":
            state.B.data[:] = rng.normal(scale=0.3, size=state.B.space.ndof)
        else:
            fill(state.B, SMOOTH_B_FNS)
        if b_offset is not None and b_style == "rough":
            state.B.data += interpolate(state.B.space, constant_fns(b_offset)).data
        fill(state.A, POTENTIAL_FNS)
    else:
        if b_style == "rough":
            state.A.data[:] = rng.normal(scale=0.2, size=state.A.space.ndof)
        else:
            fill(state.A, POTENTIAL_FNS)
        curl = derivative_operator(state.A.space)
        state.B.data[:] = curl @ state.A.data
        if b_offset is not None:
            state.B.data += interpolate(state.B.space, constant_fns(b_offset)).data
    state.validate()
    return state


def total_energy(state):
    """Quadrature of the kinetic + internal + magnetic energy density."""
    f = state.formulation
    rhs = mhd.rhs_for(f, state.mesh, state.degree)
    wt = rhs.volume_weights
    dens = assembly.evaluate_at_qp(state.n)
    v = assembly.evaluate_at_qp(state.V)
    b = assembly.evaluate_at_qp(state.B)
    ke = 0.5 * f.m_i * np.einsum("cq,ciq,ciq,q->", dens, v, v, wt)
    me = 0.5 / f.mu0 * np.einsum("ciq,ciq,q->", b, b, wt)
    if f.uses_pressure:
        ie = np.einsum("cq,q->", assembly.evaluate_at_qp(state.p), wt)
    else:
        ie = np.einsum("cq,cq,q->", dens, assembly.evaluate_at_qp(state.T), wt)
    return float(ke + me + ie / (f.gamma - 1.0))


def all_formulations(ohmic=True):
    out = []
    for thermal in mhd.THERMAL_KINDS:
        for magnetic in mhd.MAGNETIC_KINDS:
            for stab in mhd.STABILIZATIONS:
                if stab == "supg" and magnetic == "div_helicity":
                    continue
                kw = dict(
                    thermal_kind=thermal,
                    magnetic_kind=magnetic,
                    stabilization=stab,
                    kappa_t=1e-3,
                    kappa_b=0.01,
                    mu0=0.1,
                    ohmic_heating=ohmic,
                )
                if stab == "supg":
                    kw.update(dt=0.01, lam=0.5)
                out.append(mhd.Formulation(**kw))
    return out


class TestFormulation:
    def test_defaults(self):
        f = mhd.Formulation()
        assert f.thermal_kind == "temperature"
        assert f.magnetic_kind == "div"
        assert f.stabilization == "none"
        assert f.gamma == pytest.approx(5.0 / 3.0)

    def test_unknown_kinds_rejected(self):
        with pytest.raises(ValueError):
            mhd.Formulation(thermal_kind="entropy")
        with pytest.raises(ValueError):
            mhd.Formulation(magnetic_kind="vector")
        with pytest.raises(ValueError):
            mhd.Formulation(stabilization="viscosity")

    def test_supg_rejected_with_projected_transport(self):
        with pytest.raises(ValueError):
            mhd.Formulation(magnetic_kind="div_helicity", stabilization="supg", dt=0.1)

    def test_supg_needs_a_step(self):
        with pytest.raises(ValueError):
            mhd.Formulation(stabilization="supg")

    def test_space_kinds(self):
        assert mhd.Formulation(magnetic_kind="div").b_space_kind == "hdiv"
        assert mhd.Formulation(magnetic_kind="div_helicity").b_space_kind == "hdiv"
        assert mhd.Formulation(magnetic_kind="curl").b_space_kind == "hcurl"
        assert mhd.Formulation(magnetic_kind="div").a_space_kind == "hcurl"
        assert mhd.Formulation(magnetic_kind="curl").a_space_kind == "hdiv"

    def test_rhs_cache_returns_same_instance(self):
        f = mhd.Formulation()
        a = mhd.rhs_for(f, MESH, 2)
        b = mhd.rhs_for(mhd.Formulation(), MESH, 2)
        assert a is b, "equal formulations on the same mesh should share the evaluator"
        c = mhd.rhs_for(mhd.Formulation(kappa_b=0.5, stabilization="eta"), MESH, 2)
        assert c is not a


class TestState:
    def test_field_spaces(self):
        st_t = mhd.State(mhd.Formulation(), MESH, 2)
        assert st_t.n.space.kind == "l2"
        assert st_t.V.space.kind == "hdiv"
        assert st_t.T.space.kind == "h1"
        assert st_t.B.space.kind == "hdiv"
        assert st_t.A.space.kind == "hcurl"
        assert st_t.field_names() == ("n", "V", "T", "B", "A")
        st_p = mhd.State(mhd.Formulation(thermal_kind="pressure", magnetic_kind="curl"), MESH, 2)
        assert st_p.p.space.kind == "l2"
        assert st_p.B.space.kind == "hcurl"
        assert st_p.A.space.kind == "hdiv"
        assert st_p.thermal is st_p.p

    def test_copy_is_independent(self):
        state = make_state(mhd.Formulation())
        before = state.n.data.copy()
        dup = state.copy()
        assert np.array_equal(dup.n.data, before)
        dup.n.data += 1.0
        assert np.array_equal(state.n.data, before), "copy must not alias the source"
        assert state.n.data is not dup.n.data

    def test_validate_requires_positive_density(self):
        state = make_state(mhd.Formulation())
        state.n.data[:] = -1.0
        with pytest.raises(ValueError, match="positive"):
            state.validate()

    def test_validate_requires_solenoidal_div_form(self):
        state = make_state(mhd.Formulation())
        state.B.data[0] += 0.1  # breaks the strong divergence
        with pytest.raises(ValueError, match="divergence"):
            state.validate()

    def test_curl_form_skips_the_divergence_check(self):
        state = make_state(mhd.Formulation(magnetic_kind="curl"), b_style="rough")
        state.validate()  # random hcurl coefficients are fine here


class TestSupgTau:
    def test_frozen_value(self):
        # (2/0.025)^2 + (2*0.5/0.5)^2 = 6400 + 4
        tau = mhd.supg_tau(0.025, 0.5, 0.5, 1.0)
        assert tau == pytest.approx(1.0 / np.sqrt(6404.0), rel=1e-14)
        assert tau == pytest.approx(0.0124961, rel=1e-5)

    def test_zero_speed_limit(self):
        assert mhd.supg_tau(0.025, 0.5, 0.0, 1.0) == pytest.approx(0.0125, rel=1e-14)

    def test_zero_lambda_limit(self):
        assert mhd.supg_tau(0.025, 0.5, 0.5, 0.0) == pytest.approx(0.5, rel=1e-14)

    def test_printed_variant_is_the_reciprocal(self):
        a = mhd.supg_tau(0.025, 0.5, 0.5, 1.0)
        b = mhd.supg_tau(0.025, 0.5, 0.5, 1.0, printed=True)
        assert a * b == pytest.approx(1.0, rel=1e-14)
        assert b == pytest.approx(np.sqrt(6404.0), rel=1e-14)

    def test_pointwise_on_arrays(self):
        speed = np.array([0.0, 0.5, 2.0])
        tau = mhd.supg_tau(0.025, 0.5, speed, 1.0)
        assert tau.shape == speed.shape
        assert np.all(np.diff(tau) < 0), "tau should fall as the speed rises"

    @settings(deadline=None, max_examples=200)
    @given(
        dt=st.floats(1e-3, 1e3),
        h_c=st.floats(1e-3, 1e3),
        speed=st.floats(1e-6, 1e3),
        lam=st.floats(1e-6, 1e3),
    )
    def test_bounded_by_both_single_term_limits(self, dt, h_c, speed, lam):
        tau = mhd.supg_tau(dt, h_c, speed, lam)
        assert 0.0 < tau
        assert tau <= dt / (2.0 * lam) * (1.0 + 1e-12)
        assert tau <= h_c / (2.0 * speed) * (1.0 + 1e-12)


class TestComputeFlux:
    def test_constant_density_scales_the_coefficients(self):
        hdiv = build_space(MESH, "hdiv", 2)
        l2 = build_space(MESH, "l2", 2)
        n = interpolate(l2, lambda x, y, z: 0.5 + 0.0 * x)
        v = interpolate(hdiv, VEL_FNS)
        flux = mhd.compute_flux(n, v)
        assert np.max(np.abs(flux.data - 0.5 * v.data)) <= 1e-13, (
            "constant n must pass through the projection as a pure scaling"
        )

    def test_zero_velocity_gives_zero_flux(self):
        hdiv = build_space(MESH, "hdiv", 2)
        l2 = build_space(MESH, "l2", 2)
        n = interpolate(l2, dens_profile)
        flux = mhd.compute_flux(n, Field(hdiv))
        assert np.max(np.abs(flux.data)) == 0.0

    def test_matches_dense_normal_equations(self):
        mesh = build_periodic_box((1.0, 1.0, 1.0), (2, 2, 2))
        hdiv = build_space(mesh, "hdiv", 1)
        l2 = build_space(mesh, "l2", 1)
        n = interpolate(l2, lambda x, y, z: 1.0 + 0.4 * np.sin(TWO_PI * x))
        v = interpolate(
            hdiv,
            (
                lambda x, y, z: np.cos(TWO_PI * y),
                lambda x, y, z: 0.5 * np.sin(TWO_PI * z),
                lambda x, y, z: 0.25 + 0.3 * np.sin(TWO_PI * x),
            ),
        )
        flux = mhd.compute_flux(n, v)

        # dense oracle: assemble the Gram matrix column by column from
        # unit-coefficient fields and solve the normal equations directly
        wt = assembly.cell_quad_weights(hdiv)
        target = assembly.evaluate_at_qp(n)[:, None, :] * assembly.evaluate_at_qp(v)
        basis = []
        for i in range(hdiv.ndof):
            e = Field(hdiv)
            e.data[i] = 1.0
            basis.append(assembly.evaluate_at_qp(e))
        gram = np.array(
            [[np.einsum("ciq,ciq,q->", bi, bj, wt) for bj in basis] for bi in basis]
        )
        rhs = np.array([np.einsum("ciq,ciq,q->", bi, target, wt) for bi in basis])
        oracle = np.linalg.solve(gram, rhs)
        scale = np.max(np.abs(oracle))
        assert np.max(np.abs(flux.data - oracle)) <= 1e-10 * scale


class TestCurrentDensity:
    def test_uniform_field_carries_no_current(self):
        for magnetic in mhd.MAGNETIC_KINDS:
            form = mhd.Formulation(magnetic_kind=magnetic, mu0=0.1)
            state = mhd.State(form, MESH, 2)
            fill(state.n, lambda x, y, z: 1.0 + 0.0 * x)
            fill(state.B, constant_fns((0.6, -0.4, 0.5)))
            j = mhd.current_density(state, form)
            scale = np.max(np.abs(state.B.data)) / form.mu0
            assert np.max(np.abs(j.data)) <= 1e-13 * scale, (
                f"uniform B must give j=0 ({magnetic})"
            )

    def test_linearity(self):
        form = mhd.Formulation(mu0=0.1)
        state = make_state(form)
        j1 = mhd.current_density(state, form)
        state2 = state.copy()
        state2.B.data *= 2.0
        j2 = mhd.current_density(state2, form)
        assert np.allclose(j2.data, 2.0 * j1.data, rtol=0, atol=1e-13 * np.max(np.abs(j1.data)))

    def test_weak_curl_converges_to_the_analytic_curl(self):
        # B = curl(0, 0, sin(2 pi x)) = (0, -2 pi cos(2 pi x), 0), whose curl
        # is (0, 0, 4 pi^2 sin(2 pi x))
        errs = []
        for cells in ((4, 4, 2), (8, 8, 4)):
            mesh = build_periodic_box((1.0, 1.0, 0.5), cells)
            form = mhd.Formulation()
            state = mhd.State(form, mesh, 1)
            fill(state.n, lambda x, y, z: 1.0 + 0.0 * x)
            fill(
                state.A,
                (
                    lambda x, y, z: 0.0 * x,
                    lambda x, y, z: 0.0 * x,
                    lambda x, y, z: np.sin(TWO_PI * x),
                ),
            )
            state.B.data[:] = derivative_operator(state.A.space) @ state.A.data
            j = mhd.current_density(state, form)
            pts = assembly.cell_quad_points(j.space)
            exact = np.zeros_like(assembly.evaluate_at_qp(j))
            exact[:, 2, :] = TWO_PI**2 * np.sin(TWO_PI * pts[:, :, 0])
            wt = assembly.cell_quad_weights(j.space)
            diff = assembly.evaluate_at_qp(j) - exact
            errs.append(float(np.sqrt(np.einsum("ciq,ciq,q->", diff, diff, wt))))
        assert errs[1] < errs[0]
        assert errs[0] / errs[1] > 1.7, (
            f"expected at least first-order decay, got {errs[0]:.3e} -> {errs[1]:.3e}"
        )


class TestElectricField:
    def test_zero_velocity_means_zero_field(self):
        form = mhd.Formulation(mu0=0.1)
        state = make_state(form)
        state.V.data[:] = 0.0
        ev = mhd.electric_field(state, form)
        assert np.max(np.abs(ev.e_coefs)) <= 1e-15
        assert ev.penalties == [None, None, None]

    def test_uniform_crossing_recovers_the_constant(self):
        # u = 0.3 x-hat, B = z-hat: E = -u x B = 0.3 y-hat exactly
        form = mhd.Formulation()
        state = mhd.State(form, MESH, 2)
        fill(state.n, lambda x, y, z: 0.5 + 0.0 * x)
        fill(state.V, constant_fns((0.3, 0.0, 0.0)))
        fill(state.T, lambda x, y, z: 1.0 + 0.0 * x)
        fill(state.B, constant_fns((0.0, 0.0, 1.0)))
        ev = mhd.electric_field(state, form)
        e_qp = assembly.evaluate_at_qp(Field(state.A.space, ev.e_coefs))
        assert np.max(np.abs(e_qp[:, 0, :])) <= 5e-13
        assert np.max(np.abs(e_qp[:, 1, :] - 0.3)) <= 5e-13
        assert np.max(np.abs(e_qp[:, 2, :])) <= 5e-13

    def test_eta_penalty_vanishes_on_a_continuous_current(self):
        base = mhd.Formulation(mu0=0.1)
        damped = mhd.Formulation(stabilization="eta", kappa_b=0.5, mu0=0.1)
        state = mhd.State(base, MESH, 2)
        fill(state.n, dens_profile)
        fill(state.V, VEL_FNS)
        fill(state.T, thermal_profile)
        fill(state.B, constant_fns((0.6, -0.4, 0.5)))
        ev0 = mhd.electric_field(state, base)
        ev1 = mhd.electric_field(state, damped)
        scale = np.max(np.abs(ev0.e_coefs))
        assert np.max(np.abs(ev1.e_coefs - ev0.e_coefs)) <= 1e-13 * scale, (
            "a jump-free current must leave the damped field identical"
        )
        assert ev1.ohmic_total() <= 1e-20

    def test_curl_form_skips_the_projection(self):
        form = mhd.Formulation(magnetic_kind="curl", mu0=0.1)
        state = make_state(form)
        ev = mhd.electric_field(state, form)
        assert ev.e_coefs is None
        assert ev.e_volume_qp.shape == ev.v_qp.shape


class TestUniformEquilibrium:
    N0, V0, T0 = 2.0, (0.1, -0.2, 0.15), 1.5
    B0 = (0.6, -0.4, 0.5)

    def uniform_state(self, form):
        state = mhd.State(form, MESH, 2)
        fill(state.n, lambda x, y, z: self.N0 + 0.0 * x)
        fill(state.V, constant_fns(self.V0))
        if form.uses_pressure:
            fill(state.p, lambda x, y, z: 3.0 + 0.0 * x)
        else:
            fill(state.T, lambda x, y, z: self.T0 + 0.0 * x)
        fill(state.B, constant_fns(self.B0))
        fill(state.A, constant_fns((0.2, 0.1, -0.3)))
        state.validate()
        return state

    def test_all_formulations_hold_the_equilibrium(self):
        expected_adot = np.cross(self.V0, self.B0)
        for form in all_formulations():
            rhs = mhd.MhdRhs(form, MESH, 2)
            state = self.uniform_state(form)
            bundle = rhs.rates(state)
            label = (form.thermal_kind, form.magnetic_kind, form.stabilization)
            assert np.max(np.abs(bundle.ndot)) <= 1e-12, f"ndot drifts for {label}"
            assert np.max(np.abs(bundle.vdot)) <= 1e-12, f"vdot drifts for {label}"
            assert np.max(np.abs(bundle.thermal_dot)) <= 1e-12, f"thermal drifts for {label}"
            assert np.max(np.abs(bundle.bdot)) <= 1e-12, f"bdot drifts for {label}"
            # the potential keeps sliding in the gauge: adot = -E = V x B
            adot_qp = assembly.evaluate_at_qp(Field(state.A.space, bundle.adot))
            for i in range(3):
                assert np.max(np.abs(adot_qp[:, i, :] - expected_adot[i])) <= 1e-12, (
                    f"adot should equal V x B for {label}"
                )

    def test_penalties_carry_no_heat_on_uniform_fields(self):
        for stab in ("eta", "hm", "hm1"):
            form = mhd.Formulation(stabilization=stab, kappa_b=0.1, mu0=0.1)
            state = self.uniform_state(form)
            ev = mhd.electric_field(state, form)
            assert ev.ohmic_total() <= 1e-20, f"{stab} heats a uniform field"

    def test_energy_rate_vanishes(self):
        form = mhd.Formulation(mu0=0.1)
        state = self.uniform_state(form)
        h = total_energy(state)
        rate = mhd.energy_rate_audit(state)
        assert abs(rate) <= 1e-13 * abs(h)


class TestMagneticStructure:
    def test_div_form_bdot_is_exactly_the_curl_of_adot(self):
        for magnetic in ("div", "div_helicity"):
            form = mhd.Formulation(magnetic_kind=magnetic, mu0=0.1)
            state = make_state(form)
            bundle = mhd.rhs_for(form, MESH, 2).rates(state)
            curl = derivative_operator(state.A.space)
            assert np.array_equal(bundle.bdot, curl @ bundle.adot), (
                "the B and A evolutions must stay compatible to the bit"
            )

    def test_div_form_bdot_is_solenoidal(self):
        form = mhd.Formulation(mu0=0.1)
        state = make_state(form, b_style="rough")
        bundle = mhd.rhs_for(form, MESH, 2).rates(state)
        div = derivative_operator(state.B.space)
        curl = derivative_operator(state.A.space)
        assert (div @ curl).max_abs() == 0.0, "div after curl must cancel as a matrix"
        scale = max(np.max(np.abs(bundle.bdot)), 1.0)
        assert np.max(np.abs(div @ bundle.bdot)) <= 1e-12 * scale

    def test_gradient_fields_are_curl_free(self):
        h1 = build_space(MESH, "h1", 2)
        hcurl = build_space(MESH, "hcurl", 2)
        grad = derivative_operator(h1)
        curl = derivative_operator(hcurl)
        assert (curl @ grad).max_abs() == 0.0
        rng = np.random.default_rng(11)
        phi = rng.normal(size=h1.ndof)
        gphi = grad @ phi
        assert np.max(np.abs(curl @ gphi)) <= 1e-12 * np.max(np.abs(gphi))

    def test_curl_form_preserves_the_weak_divergence(self):
        form = mhd.Formulation(magnetic_kind="curl", mu0=0.1)
        state = make_state(form, b_style="rough")
        bundle = mhd.rhs_for(form, MESH, 2).rates(state)
        h1 = build_space(MESH, "h1", 2)
        grad = derivative_operator(h1)
        hcurl = state.B.space
        weak_div = grad.T @ assembly.mass_solver(hcurl).apply(bundle.bdot)
        scale = max(np.max(np.abs(bundle.bdot)), 1.0)
        assert np.max(np.abs(weak_div)) <= 1e-12 * scale, (
            "the weak divergence functional of bdot must vanish"
        )


class TestEnergyAudit:
    def test_every_formulation_conserves_on_a_smooth_state(self):
        for form in all_formulations():
            state = make_state(form)
            h = total_energy(state)
            rate = mhd.energy_rate_audit(state, form)
            label = (form.thermal_kind, form.magnetic_kind, form.stabilization)
            assert abs(rate) <= 1e-10 * abs(h), (
                f"energy leak {rate:.3e} vs H={h:.3e} for {label}"
            )

    def test_heated_penalties_conserve_on_rough_states(self):
        # rough coefficients give the current genuine facet jumps, so the
        # Ohmic return path is exercised rather than vacuous
        for thermal in mhd.THERMAL_KINDS:
            for magnetic in mhd.MAGNETIC_KINDS:
                for stab in ("eta", "hm", "hm1"):
                    form = mhd.Formulation(
                        thermal_kind=thermal,
                        magnetic_kind=magnetic,
                        stabilization=stab,
                        kappa_b=0.01,
                        kappa_t=1e-3,
                        mu0=0.1,
                    )
                    state = make_state(form, b_style="rough", b_offset=(2.0, 1.6, -1.2))
                    ev = mhd.electric_field(state, form)
                    assert ev.ohmic_total() > 1e-8, "penalty should actually bite here"
                    h = total_energy(state)
                    rate = ev.energy_rate()
                    label = (thermal, magnetic, stab)
                    assert abs(rate) <= 1e-10 * abs(h), (
                        f"heating fails to balance dissipation for {label}"
                    )

    def test_dissipation_identity_without_ohmic_return(self):
        for form in all_formulations(ohmic=False):
            if form.stabilization not in ("eta", "hm", "hm1"):
                continue
            state = make_state(form, b_style="rough", b_offset=(2.0, 1.6, -1.2))
            ev = mhd.electric_field(state, form)
            diss = ev.ohmic_total()
            rate = ev.energy_rate()
            label = (form.thermal_kind, form.magnetic_kind, form.stabilization)
            assert diss >= 0.0
            assert diss > 1e-8, f"penalty inactive for {label}"
            assert abs(rate + diss) <= 1e-11 * (1.0 + diss), (
                f"rate {rate:.6e} should equal -dissipation {-diss:.6e} for {label}"
            )

    def test_audit_matches_finite_differences_of_the_energy(self):
        # one independent check that the audit really is dH/dt: nudge every
        # coefficient along its rate and difference the quadrature energy
        form = mhd.Formulation(stabilization="eta", kappa_b=0.01, mu0=0.1, ohmic_heating=False)
        state = make_state(form, b_style="rough", b_offset=(2.0, 1.6, -1.2))
        bundle = mhd.rhs_for(form, MESH, 2).rates(state)
        rate = mhd.energy_rate_audit(state, form)
        assert rate < 0.0, "with heating off the damped system must lose energy"

        def nudged(eps):
            out = state.copy()
            out.n.data += eps * bundle.ndot
            out.V.data += eps * bundle.vdot
            out.thermal.data += eps * bundle.thermal_dot
            out.B.data += eps * bundle.bdot
            out.A.data += eps * bundle.adot
            return out

        eps = 1e-5
        fd = (total_energy(nudged(eps)) - total_energy(nudged(-eps))) / (2.0 * eps)
        assert fd == pytest.approx(rate, rel=1e-5), (
            f"central difference {fd:.10e} disagrees with the audit {rate:.10e}"
        )


class TestHelicityAudit:
    def helicity_scale(self, state):
        hm = abs(assembly.l2_inner(state.A, state.B))
        return hm + assembly.l2_norm(state.A) * assembly.l2_norm(state.B)

    def test_projected_transport_conserves_helicity(self):
        for stab, kappa in (("none", 0.0), ("hm", 0.1), ("hm1", 0.1)):
            form = mhd.Formulation(
                magnetic_kind="div_helicity",
                stabilization=stab,
                kappa_b=kappa,
                kappa_t=1e-3,
                mu0=0.1,
            )
            state = make_state(form, b_style="rough", b_offset=None)
            rate = mhd.helicity_rate_audit(state, form)
            assert abs(rate) <= 1e-10 * self.helicity_scale(state), (
                f"helicity leak {rate:.3e} with {stab}"
            )

    def test_plain_transport_with_damping_matches_the_two_term_balance(self):
        # without the projection the transport term survives, and the eta
        # penalty adds its jump pairing; both are directly computable
        form = mhd.Formulation(stabilization="eta", kappa_b=0.01, kappa_t=1e-3, mu0=0.1)
        state = make_state(form, b_style="rough", b_offset=None)
        rhs = mhd.rhs_for(form, MESH, 2)
        ev = rhs.evaluate(state)
        rate = ev.helicity_rate()

        mom = assembly.cell_moments(rhs.hcurl, ev.b_qp)
        p1b = Field(rhs.hcurl, assembly.mass_solver(rhs.hcurl).solve(mom))
        p1b_qp = assembly.evaluate_at_qp(p1b)
        wt = rhs.volume_weights
        transport = 2.0 * np.einsum(
            "ciq,ciq,q->", p1b_qp, np.cross(ev.u_qp, ev.b_qp, axis=1), wt
        )
        damping = 0.0
        for axis in range(3):
            fw = assembly.get_facet_tabs(rhs.hcurl, axis).weights
            jp = assembly.facet_values(ev.j_field, axis, "plus")
            jm = assembly.facet_values(ev.j_field, axis, "minus")
            pp = assembly.facet_values(p1b, axis, "plus")
            pm = assembly.facet_values(p1b, axis, "minus")
            damping -= 2.0 * rhs.h_e[axis] ** 2 * form.kappa_b * np.einsum(
                "fiq,fiq,q->", jp - jm, pp - pm, fw
            )
        assert abs(transport) > 1e-8 and abs(damping) > 1e-8
        assert rate == pytest.approx(transport + damping, abs=1e-12 * self.helicity_scale(state))


class TestConstantTestFunctionNeutrality:
    def test_thermal_penalty_is_invisible_to_the_constant(self):
        plain = mhd.Formulation(kappa_t=0.0, mu0=0.1)
        damped = mhd.Formulation(kappa_t=0.5, mu0=0.1)
        state = make_state(plain)
        ev0 = mhd.rhs_for(plain, MESH, 2).evaluate(state)
        ev1 = mhd.rhs_for(damped, MESH, 2).evaluate(state)
        scale = np.sum(np.abs(ev1.r_thermal))
        drift = abs(np.sum(ev1.r_thermal) - np.sum(ev0.r_thermal))
        assert drift <= 1e-11 * (1.0 + scale), (
            "the temperature penalty must drop out when tested by 1"
        )

    def test_pressure_moments_sum_to_the_compression_work(self):
        form = mhd.Formulation(thermal_kind="pressure", mu0=0.1)
        state = make_state(form)
        rhs = mhd.rhs_for(form, MESH, 2)
        ev = rhs.evaluate(state)
        # upwind facet terms cancel under the constant test function since
        # the normal velocity trace is single valued, leaving -<p, div V>
        p_qp = assembly.evaluate_at_qp(state.p)
        expected = -float(np.einsum("cq,cq,q->", p_qp, ev.div_u, rhs.volume_weights))
        got = float(np.sum(ev.r_thermal))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_uniform_pressure_at_rest_stays_at_rest(self):
        form = mhd.Formulation(thermal_kind="pressure", mu0=0.1)
        state = mhd.State(form, MESH, 2)
        fill(state.n, lambda x, y, z: 1.0 + 0.0 * x)
        fill(state.p, lambda x, y, z: 3.0 + 0.0 * x)
        fill(state.B, constant_fns((0.6, -0.4, 0.5)))
        ev = mhd.electric_field(state, form)
        assert np.max(np.abs(ev.thermal_dot)) <= 1e-15


class TestSupgHistory:
    def test_first_step_lags_a_zero_bdot(self):
        form = mhd.Formulation(stabilization="supg", dt=0.01, lam=0.5, mu0=0.1)
        rhs = mhd.MhdRhs(form, MESH, 2)
        state = make_state(form)
        b1 = rhs.rates(state)
        b2 = rhs.rates(state)
        assert np.max(np.abs(b1.bdot - b2.bdot)) > 1e-10, (
            "the lagged residual should change the second evaluation"
        )
        rhs.reset_history()
        b3 = rhs.rates(state)
        assert np.array_equal(b3.bdot, b1.bdot), "reset must replay the first step"

    def test_evaluate_does_not_advance_the_history(self):
        form = mhd.Formulation(stabilization="supg", dt=0.01, lam=0.5, mu0=0.1)
        rhs = mhd.MhdRhs(form, MESH, 2)
        state = make_state(form)
        first = rhs.rates(state).bdot
        rhs.reset_history()
        rhs.evaluate(state)
        rhs.evaluate(state)
        again = rhs.rates(state).bdot
        assert np.array_equal(first, again)

    def test_tau_residual_rides_in_the_bundle(self):
        supg = mhd.Formulation(stabilization="supg", dt=0.01, lam=0.5, mu0=0.1)
        state = make_state(supg)
        bundle = mhd.MhdRhs(supg, MESH, 2).rates(state)
        assert bundle.tau_bres_qp is not None
        assert bundle.tau_bres_qp.shape == (MESH.num_cells, 3, len(assembly.cell_quad_weights(state.B.space)))
        plain = mhd.Formulation(mu0=0.1)
        assert mhd.MhdRhs(plain, MESH, 2).rates(make_state(plain)).tau_bres_qp is None

    def test_supg_changes_the_electric_field(self):
        plain = mhd.Formulation(mu0=0.1)
        supg = mhd.Formulation(stabilization="supg", dt=0.01, lam=0.5, mu0=0.1)
        state = make_state(plain)
        rhs = mhd.MhdRhs(supg, MESH, 2)
        rhs.rates(state)  # prime the lag so B_res is nonzero
        e_plain = mhd.rhs_for(plain, MESH, 2).evaluate(state).e_coefs
        e_supg = rhs.evaluate(state).e_coefs
        assert np.max(np.abs(e_plain - e_supg)) > 1e-10


class TestHm1Guard:
    def test_zero_field_raises(self):
        form = mhd.Formulation(stabilization="hm1", kappa_b=0.1, mu0=0.1)
        state = mhd.State(form, MESH, 2)
        fill(state.n, dens_profile)
        fill(state.V, VEL_FNS)
        fill(state.T, thermal_profile)
        # B stays identically zero
        with pytest.raises(ValueError, match="degenerate"):
            mhd.electric_field(state, form)


class TestEvaluationPurity:
    def test_evaluate_leaves_the_state_untouched(self):
        form = mhd.Formulation(stabilization="eta", kappa_b=0.01, kappa_t=1e-3, mu0=0.1)
        state = make_state(form)
        before = {name: state.field(name).data.copy() for name in state.field_names()}
        mhd.rhs_for(form, MESH, 2).evaluate(state)
        for name, data in before.items():
            assert np.array_equal(state.field(name).data, data), f"{name} was mutated"

    def test_rates_bundle_shapes(self):
        form = mhd.Formulation(thermal_kind="pressure", magnetic_kind="curl", mu0=0.1)
        state = make_state(form)
        bundle = mhd.rhs_for(form, MESH, 2).rates(state)
        assert bundle.thermal_name == "p"
        assert bundle.ndot.shape == state.n.data.shape
        assert bundle.vdot.shape == state.V.data.shape
        assert bundle.thermal_dot.shape == state.p.data.shape
        assert bundle.bdot.shape == state.B.data.shape
        assert bundle.adot.shape == state.A.data.shape
        assert bundle.electric is None
        assert bundle.flux.shape == state.V.data.shape


class TestTransportEquilibria:
    """Analytic balances that isolate the momentum transport package.

    The rotating column balances the centripetal term against a radial
    pressure gradient with zero divergence and zero radial advection, so
    the semi-discrete velocity rate is pure discretization error and must
    shrink under refinement.  The entropy wave rides a uniform velocity
    and uniform pressure over a structured density, which must leave the
    velocity and pressure rates at roundoff even though the density-
    weighted facet corrections are individually nonzero."""

    V0 = 0.5
    N0 = 1.0
    P0 = 2.0

    @classmethod
    def _column_fns(cls, thermal_kind):
        cx = cy = 5.0

        def r2(x, y):
            return (x - cx) ** 2 + (y - cy) ** 2

        def dens(x, y, z):
            return cls.N0 * (1.0 + 0.5 * np.exp(1.0 - r2(x, y)))

        def pres(x, y, z):
            q = r2(x, y)
            return cls.P0 - cls.N0 * cls.V0 ** 2 * (
                0.25 * np.exp(2.0 - 2.0 * q) + np.exp(3.0 - 3.0 * q) / 12.0
            )

        vel = (
            lambda x, y, z: -cls.V0 * np.exp(1.0 - r2(x, y)) * (y - cy),
            lambda x, y, z: cls.V0 * np.exp(1.0 - r2(x, y)) * (x - cx),
            lambda x, y, z: 0.0 * x,
        )
        if thermal_kind == "temperature":
            thermal = lambda x, y, z: pres(x, y, z) / dens(x, y, z)
        else:
            thermal = pres
        return dens, vel, thermal

    @classmethod
    def _column_vdot(cls, thermal_kind, cells):
        mesh = build_periodic_box((10.0, 10.0, 1.0), cells)
        form = mhd.Formulation(thermal_kind=thermal_kind, magnetic_kind="div")
        state = mhd.State(form, mesh, 2)
        dens, vel, thermal = cls._column_fns(thermal_kind)
        fill(state.n, dens)
        fill(state.V, vel)
        fill(state.thermal, thermal)
        state.validate()
        bundle = mhd.rhs_for(form, mesh, 2).rates(state)
        return assembly.l2_norm(Field(state.V.space, bundle.vdot))

    @pytest.mark.parametrize("thermal_kind", ["temperature", "pressure"])
    def test_rotating_column_velocity_residual_converges(self, thermal_kind):
        coarse = self._column_vdot(thermal_kind, (20, 20, 2))
        fine = self._column_vdot(thermal_kind, (40, 40, 2))
        assert fine < 0.15, f"velocity residual {fine:.4f} at dx = 0.25"
        assert coarse / fine > 1.5, (
            f"residual ratio under halving {coarse / fine:.2f}"
        )

    def test_entropy_wave_rates_vanish(self):
        form = mhd.Formulation(thermal_kind="pressure", magnetic_kind="div")
        state = mhd.State(form, MESH, 2)
        fill(state.n, lambda x, y, z: 1.0 + 0.4 * np.sin(TWO_PI * x) * np.cos(TWO_PI * y))
        fill(
            state.V,
            (
                lambda x, y, z: 0.3 + 0.0 * x,
                lambda x, y, z: -0.2 + 0.0 * x,
                lambda x, y, z: 0.15 + 0.0 * x,
            ),
        )
        fill(state.p, lambda x, y, z: 1.2 + 0.0 * x)
        bundle = mhd.rhs_for(form, MESH, 2).rates(state)
        vdot = assembly.l2_norm(Field(state.V.space, bundle.vdot))
        pdot = assembly.l2_norm(Field(state.p.space, bundle.thermal_dot))
        ndot = assembly.l2_norm(Field(state.n.space, bundle.ndot))
        assert vdot < 1e-12, f"velocity rate {vdot:.2e} on an entropy wave"
        assert pdot < 1e-12, f"pressure rate {pdot:.2e} on an entropy wave"
        assert ndot > 0.1, "the density structure itself must advect"
