"""Semi-discrete compressible MHD operators on the periodic hex complex.

The module assembles the right-hand sides of the structure-preserving
scheme and its conservation audits:

- Formulation: thermal kind (temperature or pressure), magnetic kind
  (div, div_helicity, curl) and one stabilization (none, supg, eta, hm,
  hm1) with the physical constants.
- State: n in the discontinuous scalar space, V in the div-conforming
  space, T (nodal) or p (discontinuous), B and A in the pair of vector
  spaces selected by the magnetic kind.
- MhdRhs: one evaluator instance per (formulation, mesh, degree); its
  evaluate() computes every shared intermediate once (flux, transport
  velocity, current, electric context, penalty jumps) so the energy and
  helicity audits pair the assembled moments against the identical
  pointwise arrays that built them.

Sign conventions: facet payloads are accumulated per side with
sgn(plus) = +1, sgn(minus) = -1; the stored facet normal points from the
plus cell into the minus cell; upwind traces take the plus side where the
plus-trace normal velocity is negative, the minus side otherwise.

Energy bookkeeping: each penalty removes magnetic energy at the facet
rate h_e^2 kappa_B Q (Q the variant's squared jump) and the thermal
equation receives exactly the same pointwise Q as Ohmic heating, so the
total-energy audit cancels to roundoff. Setting ohmic_heating=False
exposes the bare dissipation rate for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly
from .spaces import Field, build_space, derivative_operator

THERMAL_KINDS = ("temperature", "pressure")
MAGNETIC_KINDS = ("div", "div_helicity", "curl")
STABILIZATIONS = ("none", "supg", "eta", "hm", "hm1")

_AXIS_UNIT = [np.zeros((1, 3, 1)) for _ in range(3)]
for _a in range(3):
    _AXIS_UNIT[_a][0, _a, 0] = 1.0


@dataclass(frozen=True)
class Formulation:
    """Scheme selector plus stabilization parameters and constants.

    Args:
        thermal_kind: "temperature" or "pressure".
        magnetic_kind: "div", "div_helicity", or "curl".
        stabilization: "none", "supg", "eta", "hm", or "hm1".
        kappa_t: temperature interior-penalty coefficient.
        kappa_b: magnetic facet-penalty coefficient (eta/hm/hm1).
        lam: supg tuning parameter (lambda).
        dt: time step, needed by the supg tau formula.
        supg_tau_printed: use the +1/2 exponent in tau instead of -1/2.
        ohmic_heating: feed penalty dissipation back as heat (default on).
    """

    thermal_kind: str = "temperature"
    magnetic_kind: str = "div"
    stabilization: str = "none"
    kappa_t: float = 0.0
    kappa_b: float = 0.0
    lam: float = 1.0
    dt: float | None = None
    supg_tau_printed: bool = False
    ohmic_heating: bool = True
    gamma: float = 5.0 / 3.0
    m_i: float = 1.0
    mu0: float = 1.0

    def __post_init__(self):
        if self.thermal_kind not in THERMAL_KINDS:
            raise ValueError(f"unknown thermal kind {self.thermal_kind!r}")
        if self.magnetic_kind not in MAGNETIC_KINDS:
            raise ValueError(f"unknown magnetic kind {self.magnetic_kind!r}")
        if self.stabilization not in STABILIZATIONS:
            raise ValueError(f"unknown stabilization {self.stabilization!r}")
        if self.stabilization == "supg" and self.magnetic_kind == "div_helicity":
            raise ValueError(
                "supg stabilization is incompatible with the helicity-"
                "conserving magnetic form"
            )
        if self.stabilization == "supg" and (self.dt is None or self.dt <= 0):
            raise ValueError("supg stabilization needs a positive dt")

    @property
    def uses_pressure(self):
        return self.thermal_kind == "pressure"

    @property
    def b_space_kind(self):
        return "hcurl" if self.magnetic_kind == "curl" else "hdiv"

    @property
    def a_space_kind(self):
        # A lives in the electric-field space of the form
        return "hdiv" if self.magnetic_kind == "curl" else "hcurl"

    @property
    def thermal_name(self):
        return "p" if self.uses_pressure else "T"


class State:
    """Prognostic fields of one formulation on one mesh.

    Fields: n (discontinuous scalar), V (div-conforming), T or p, B in
    the magnetic space of the form, A in the electric-field space.
    """

    def __init__(self, formulation: Formulation, mesh, degree):
        self.formulation = formulation
        self.mesh = mesh
        self.degree = degree
        self.t = 0.0
        l2 = build_space(mesh, "l2", degree)
        self.n = Field(l2)
        self.V = Field(build_space(mesh, "hdiv", degree))
        if formulation.uses_pressure:
            self.p = Field(l2)
        else:
            self.T = Field(build_space(mesh, "h1", degree))
        self.B = Field(build_space(mesh, formulation.b_space_kind, degree))
        self.A = Field(build_space(mesh, formulation.a_space_kind, degree))

    @property
    def thermal(self) -> Field:
        return self.p if self.formulation.uses_pressure else self.T

    def field_names(self):
        return ("n", "V", self.formulation.thermal_name, "B", "A")

    def field(self, name) -> Field:
        return getattr(self, name)

    def copy(self):
        out = State(self.formulation, self.mesh, self.degree)
        out.t = self.t
        for name in self.field_names():
            out.field(name).data[:] = self.field(name).data
        return out

    def validate(self):
        """Positivity of n at quadrature points; exact solenoidality for
        the div-conforming magnetic forms."""
        dens = assembly.evaluate_at_qp(self.n)
        if not np.all(dens > 0.0):
            raise ValueError(
                f"density must stay positive; min over quadrature points "
                f"is {dens.min():.6g}"
            )
        if self.formulation.magnetic_kind != "curl":
            div_op = derivative_operator(self.B.space)
            resid = np.max(np.abs(div_op @ self.B.data))
            scale = max(np.max(np.abs(self.B.data)), 1e-300)
            if resid > 1e-12 * scale:
                raise ValueError(
                    f"magnetic field lost its divergence-free coefficients: "
                    f"max |div B| = {resid:.3e} vs bound {1e-12 * scale:.3e}"
                )


@dataclass
class RatesBundle:
    """Time derivatives of all prognostic fields plus diagnostics scratch."""

    ndot: np.ndarray
    vdot: np.ndarray
    thermal_dot: np.ndarray
    bdot: np.ndarray
    adot: np.ndarray
    thermal_name: str
    flux: np.ndarray
    electric: np.ndarray | None
    current: np.ndarray
    tau_bres_qp: np.ndarray | None


def supg_tau(dt, h_c, speed, lam, printed=False):
    """Pointwise supg time scale from the step, cell size and |velocity|.

    tau = ((2 lam / dt)^2 + (2 |V| / h_c)^2)^(-1/2); the printed switch
    flips the exponent to +1/2 for comparison runs.
    """
    base = (2.0 * lam / dt) ** 2 + (2.0 * np.asarray(speed) / h_c) ** 2
    if printed:
        return np.sqrt(base)
    return 1.0 / np.sqrt(base)


class Evaluation:
    """One complete RHS evaluation; doubles as the electric-field context.

    Attributes of interest: e_volume_qp (pointwise -u x Bcal integrand),
    penalties (per-axis facet payloads), ohmic (per-axis facet heating
    densities h_e^2 kappa_B Q), e_coefs (div forms), e_moments (assembled
    moments on the electric test space), and the rate vectors.
    """

    def __init__(self, rhs: MhdRhs, state: State):
        self.rhs = rhs
        self.state = state
        self.formulation = rhs.formulation

    # -- audits -------------------------------------------------------

    def energy_rate(self):
        """Chain-rule derivative of the total energy under these rates."""
        f = self.formulation
        wt = self.rhs.volume_weights
        if f.uses_pressure:
            term_n = float(self.p_proj_coefs @ self.r_n)
            term_v = float(self.state.V.data @ self.r_v)
            term_th = float(np.sum(self.r_thermal))
        else:
            ndot_qp = assembly.evaluate_at_qp(Field(self.rhs.l2, self.ndot))
            carried = (
                0.5 * f.m_i * np.einsum("ciq,ciq->cq", self.v_qp, self.v_qp)
                + self.t_qp / (f.gamma - 1.0)
            )
            term_n = float(np.einsum("cq,cq,q->", carried, ndot_qp, wt))
            term_v = f.m_i * float(self.flux_coefs @ self.r_v)
            term_th = float(np.sum(self.r_thermal))
        if f.magnetic_kind == "curl":
            term_me = float(self.state.B.data @ self.r_b) / f.mu0
        else:
            bdot_qp = assembly.evaluate_at_qp(Field(self.state.B.space, self.bdot))
            term_me = float(
                np.einsum("ciq,ciq,q->", self.b_qp, bdot_qp, wt) / f.mu0
            )
        return term_n + term_v + term_th + term_me

    def helicity_rate(self):
        """d/dt of the magnetic helicity <A, B> under these rates."""
        wt = self.rhs.volume_weights
        adot_qp = assembly.evaluate_at_qp(Field(self.state.A.space, self.adot))
        bdot_qp = assembly.evaluate_at_qp(Field(self.state.B.space, self.bdot))
        a_qp = assembly.evaluate_at_qp(self.state.A)
        term1 = float(np.einsum("ciq,ciq,q->", adot_qp, self.b_qp, wt))
        term2 = float(np.einsum("ciq,ciq,q->", a_qp, bdot_qp, wt))
        return term1 + term2

    def ohmic_total(self):
        """Total facet dissipation rate sum h_e^2 kappa_B Q (>= 0)."""
        total = 0.0
        for axis in range(3):
            if self.ohmic[axis] is None:
                continue
            fw = assembly.get_facet_tabs(self.rhs.hdiv, axis).weights
            total += float(np.einsum("fq,q->", self.ohmic[axis], fw))
        return total

    def bundle(self) -> RatesBundle:
        return RatesBundle(
            ndot=self.ndot,
            vdot=self.vdot,
            thermal_dot=self.thermal_dot,
            bdot=self.bdot,
            adot=self.adot,
            thermal_name=self.formulation.thermal_name,
            flux=self.flux_coefs,
            electric=self.e_coefs,
            current=self.j_coefs,
            tau_bres_qp=self.tau_bres_qp,
        )


class MhdRhs:
    """Assembles the semi-discrete rates for one formulation.

    The instance owns per-space solver caches and, under supg, the lagged
    Bdot of the previous completed evaluation (zero before the first).
    evaluate() never mutates the state; rates() additionally advances the
    lagged Bdot, so concurrent evaluations should go through evaluate().
    """

    def __init__(self, formulation: Formulation, mesh, degree, cg_tol=1e-12):
        self.formulation = formulation
        self.mesh = mesh
        self.degree = degree
        self.cg_tol = float(cg_tol)
        self.h1 = build_space(mesh, "h1", degree)
        self.hcurl = build_space(mesh, "hcurl", degree)
        self.hdiv = build_space(mesh, "hdiv", degree)
        self.l2 = build_space(mesh, "l2", degree)
        self.grad_op = derivative_operator(self.h1)
        self.curl_op = derivative_operator(self.hcurl)
        self.div_op = derivative_operator(self.hdiv)
        self.volume_weights = assembly.cell_quad_weights(self.l2)
        self.h_c = min(mesh.spacing)
        self.h_e = [mesh.facet_area(a) for a in range(3)]
        self._last_bdot = None

    # -- shared small helpers -----------------------------------------

    def _traces(self, fld: Field, axis):
        return (
            assembly.facet_values(fld, axis, "plus"),
            assembly.facet_values(fld, axis, "minus"),
        )

    def _upwind_sign(self, vel_plus_normal):
        return vel_plus_normal

    # -- main entry points --------------------------------------------

    def evaluate(self, state: State) -> Evaluation:
        f = self.formulation
        ev = Evaluation(self, state)
        gamma, m_i, mu0 = f.gamma, f.m_i, f.mu0

        # volume point values and broken derivatives
        dens = assembly.evaluate_at_qp(state.n)
        if not np.all(dens > 0.0):
            raise ValueError("density must stay positive at quadrature points")
        grad_dens = assembly.evaluate_grad_at_qp(state.n)
        v_qp = assembly.evaluate_at_qp(state.V)
        b_qp = assembly.evaluate_at_qp(state.B)
        ev.dens_qp, ev.v_qp, ev.b_qp = dens, v_qp, b_qp
        ev.grad_dens = grad_dens

        # mass flux F = projection of n V, and the transport velocity
        flux_moments = assembly.cell_moments(self.hdiv, dens[:, None, :] * v_qp)
        flux_coefs = assembly.mass_solver(self.hdiv).solve(flux_moments)
        flux_field = Field(self.hdiv, flux_coefs)
        f_qp = assembly.evaluate_at_qp(flux_field)
        ev.flux_coefs, ev.f_qp = flux_coefs, f_qp
        if f.uses_pressure:
            u_qp = v_qp
            grad_u = assembly.evaluate_grad_at_qp(state.V)
        else:
            u_qp = f_qp / dens[:, None, :]
            grad_f = assembly.evaluate_grad_at_qp(flux_field)
            grad_u = (
                grad_f / dens[:, None, None, :]
                - f_qp[:, :, None, :]
                * grad_dens[:, None, :, :]
                / dens[:, None, None, :] ** 2
            )
        div_u = np.einsum("ciiq->cq", grad_u)
        ev.u_qp, ev.grad_u, ev.div_u = u_qp, grad_u, div_u

        # current density
        if f.magnetic_kind == "curl":
            j_coefs = (self.curl_op @ state.B.data) / mu0
            j_field = Field(self.hdiv, j_coefs)
        else:
            weak = self.curl_op.T @ assembly.mass_solver(self.hdiv).apply(
                state.B.data / mu0
            )
            j_coefs = assembly.mass_solver(self.hcurl).solve(weak)
            j_field = Field(self.hcurl, j_coefs)
        ev.j_coefs, ev.j_field = j_coefs, j_field

        # the magnetic field entering transport, Lorentz force and penalties
        bcal_field = state.B
        if f.magnetic_kind == "div_helicity":
            mom = assembly.cell_moments(self.hcurl, b_qp)
            p1b = assembly.mass_solver(self.hcurl).solve(mom)
            bcal_field = Field(self.hcurl, p1b)
            ev.p1b_coefs = p1b
        bcal_qp = (
            b_qp if bcal_field is state.B else assembly.evaluate_at_qp(bcal_field)
        )

        ev.tau_bres_qp = None
        if f.stabilization == "supg":
            bcal_qp = bcal_qp - self._tau_bres(state, ev)
        ev.bcal_field, ev.bcal_qp = bcal_field, bcal_qp

        # electric context: volume integrand, facet penalties, Ohmic Q
        ev.e_volume_qp = -np.cross(u_qp, bcal_qp, axis=1)
        self._penalties(ev)

        e_space = self.hdiv if f.magnetic_kind == "curl" else self.hcurl
        moments = assembly.cell_moments(e_space, ev.e_volume_qp)
        for axis in range(3):
            if ev.penalties[axis] is None:
                continue
            pay_plus, pay_minus = ev.penalties[axis]
            moments += assembly.facet_moments(
                e_space, axis, alpha_plus=pay_plus, alpha_minus=pay_minus
            )
        ev.e_moments = moments

        if f.magnetic_kind == "curl":
            ev.e_coefs = None
            ev.r_b = -(self.curl_op.T @ moments)
            ev.bdot = assembly.mass_solver(self.hcurl).solve(ev.r_b)
            ev.adot = -assembly.mass_solver(self.hdiv).solve(moments)
        else:
            ev.e_coefs = assembly.mass_solver(self.hcurl).solve(moments)
            ev.r_b = None
            ev.bdot = -(self.curl_op @ ev.e_coefs)
            ev.adot = -ev.e_coefs

        # thermal state values
        if f.uses_pressure:
            ev.p_qp = assembly.evaluate_at_qp(state.p)
        else:
            ev.t_qp = assembly.evaluate_at_qp(state.T)
            ev.grad_t = assembly.evaluate_grad_at_qp(state.T)

        # continuity
        if f.uses_pressure:
            self._continuity_pressure(ev)
        else:
            ev.r_n = None
            ev.ndot = -(self.div_op @ flux_coefs)

        # momentum
        if f.uses_pressure:
            self._momentum_pressure(ev)
        else:
            self._momentum_temperature(ev)

        # thermal
        if f.uses_pressure:
            self._pressure_equation(ev)
        else:
            self._temperature_equation(ev)

        return ev

    def rates(self, state: State) -> RatesBundle:
        ev = self.evaluate(state)
        bundle = ev.bundle()
        if self.formulation.stabilization == "supg":
            self._last_bdot = bundle.bdot.copy()
        return bundle

    def reset_history(self):
        self._last_bdot = None

    # -- supg ----------------------------------------------------------

    def _tau_bres(self, state, ev):
        f = self.formulation
        grad_b = assembly.evaluate_grad_at_qp(state.B)
        div_b = np.einsum("ciiq->cq", grad_b)
        if self._last_bdot is None:
            bdot_prev = np.zeros_like(ev.b_qp)
        else:
            bdot_prev = assembly.evaluate_at_qp(
                Field(state.B.space, self._last_bdot)
            )
        u, b = ev.u_qp, ev.b_qp
        b_res = (
            bdot_prev
            + b * ev.div_u[:, None, :]
            - u * div_b[:, None, :]
            + np.einsum("cdq,cidq->ciq", u, grad_b)
            - np.einsum("cdq,cidq->ciq", b, ev.grad_u)
        )
        speed = np.sqrt(np.einsum("ciq,ciq->cq", u, u))
        tau = supg_tau(f.dt, self.h_c, speed, f.lam, printed=f.supg_tau_printed)
        ev.tau_bres_qp = tau[:, None, :] * b_res
        return ev.tau_bres_qp

    # -- facet penalties and Ohmic densities ---------------------------

    def _penalties(self, ev):
        f = self.formulation
        ev.penalties = [None, None, None]
        ev.ohmic = [None, None, None]
        if f.stabilization in ("none", "supg") or f.kappa_b == 0.0:
            return
        kind = f.stabilization
        j_field = ev.j_field
        bcal_field = ev.bcal_field
        guard_ready = False
        for axis in range(3):
            scale = self.h_e[axis] ** 2 * f.kappa_b
            jp, jm = self._traces(j_field, axis)
            if kind == "eta":
                jump = jp - jm
                pay_plus = scale * jump
                pay_minus = -scale * jump
                ohmic = scale * np.einsum("fiq,fiq->fq", jump, jump)
            else:
                bp, bm = self._traces(bcal_field, axis)
                if kind == "hm":
                    jump = np.cross(bp, jp, axis=1) - np.cross(bm, jm, axis=1)
                    pay_plus = scale * np.cross(jump, bp, axis=1)
                    pay_minus = -scale * np.cross(jump, bm, axis=1)
                    ohmic = scale * np.einsum("fiq,fiq->fq", jump, jump)
                else:  # hm1
                    bp2 = np.einsum("fiq,fiq->fq", bp, bp)
                    bm2 = np.einsum("fiq,fiq->fq", bm, bm)
                    if not guard_ready:
                        # the guard spans every facet family of this state
                        all_b2 = [bp2, bm2]
                        for ax2 in range(axis + 1, 3):
                            b2p, b2m = self._traces(bcal_field, ax2)
                            all_b2.append(np.einsum("fiq,fiq->fq", b2p, b2p))
                            all_b2.append(np.einsum("fiq,fiq->fq", b2m, b2m))
                        bmax = max(float(np.max(a)) for a in all_b2)
                        bmin = min(float(np.min(a)) for a in all_b2)
                        # "not >" also rejects the all-zero field (0 > 0)
                        if not bmin > 1e-12 * bmax:
                            raise ValueError(
                                "hm1 stabilization hit a degenerate magnetic "
                                f"field: min |B|^2 = {bmin:.3e} at a facet "
                                f"quadrature point (guard {1e-12 * bmax:.3e})"
                            )
                        guard_ready = True
                    wp = np.einsum("fiq,fiq->fq", bp, jp) / bp2
                    wm = np.einsum("fiq,fiq->fq", bm, jm) / bm2
                    jump = wp - wm
                    pay_plus = scale * jump[:, None, :] * bp / bp2[:, None, :]
                    pay_minus = -scale * jump[:, None, :] * bm / bm2[:, None, :]
                    ohmic = scale * jump**2
            ev.penalties[axis] = (pay_plus, pay_minus)
            ev.ohmic[axis] = ohmic

    # -- continuity (pressure kind) -------------------------------------

    def _continuity_pressure(self, ev):
        state = ev.state
        beta = ev.dens_qp[:, None, :] * ev.v_qp
        r_n = assembly.cell_moments(self.l2, None, beta)
        for axis in range(3):
            vp, vm = self._traces(state.V, axis)
            vn = vp[:, axis]  # normal trace is single-valued for hdiv
            dp, dm = self._traces(state.n, axis)
            # vn runs out of the plus cell, so the upwind argument flips
            n_up = assembly.upwind(dp, dm, -vn)
            r_n += assembly.facet_moments(
                self.l2, axis, alpha_plus=-vn * n_up, alpha_minus=+vn * n_up
            )
        ev.r_n = r_n
        ev.ndot = assembly.mass_solver(self.l2).solve(r_n)

    # -- momentum --------------------------------------------------------

    def _lorentz_alpha(self, ev):
        """-(Bcal x j) pointwise at volume quadrature points."""
        j_qp = assembly.evaluate_at_qp(ev.j_field)
        ev.j_qp = j_qp
        return -np.cross(ev.bcal_qp, j_qp, axis=1)

    def _momentum_temperature(self, ev):
        f = self.formulation
        state = ev.state
        dens, v_qp, u_qp = ev.dens_qp, ev.v_qp, ev.u_qp
        grad_u, div_u = ev.grad_u, ev.div_u
        grad_dens = ev.grad_dens

        # transport: (div u) V - (grad u)^T V in the volume; together with
        # the V x u pieces in beta and the facet cross payload below this
        # realizes the rotation form w . (curl V x u) cell by cell
        alpha = (
            div_u[:, None, :] * v_qp
            - np.einsum("cdiq,cdq->ciq", grad_u, v_qp)
        )
        # Lorentz force over m_i n
        alpha += self._lorentz_alpha(ev) / (f.m_i * dens[:, None, :])
        # broken pressure gradient grad(n T) / (m_i n)
        grad_nt = dens[:, None, :] * ev.grad_t + ev.t_qp[:, None, :] * grad_dens
        ev.grad_nt = grad_nt
        alpha -= grad_nt / (f.m_i * dens[:, None, :])

        u_dot_v = np.einsum("ciq,ciq->cq", u_qp, v_qp)
        v2 = np.einsum("ciq,ciq->cq", v_qp, v_qp)
        beta = np.einsum("ciq,cdq->cidq", v_qp, u_qp)
        eye = np.eye(3)
        beta += eye[None, :, :, None] * (0.5 * v2 - u_dot_v)[:, None, None, :]

        r_v = assembly.cell_moments(self.hdiv, alpha, beta)

        for axis in range(3):
            vp, vm = self._traces(state.V, axis)
            fp, fm = self._traces(Field(self.hdiv, ev.flux_coefs), axis)
            dp, dm = self._traces(state.n, axis)
            up = fp / dp[:, None, :]
            um = fm / dm[:, None, :]
            v_tilde = assembly.upwind(vp, vm, -up[:, axis][:, None, :])
            nrm = _AXIS_UNIT[axis]
            # each side pairs the test with u x (n^s x V~), the boundary
            # remnant of the cell-wise rotation form above
            pay_plus = np.cross(up, np.cross(nrm, v_tilde, axis=1), axis=1)
            pay_minus = np.cross(um, np.cross(-nrm, v_tilde, axis=1), axis=1)
            # facet correction of the broken pressure gradient; the normal
            # average carries each side's own 1/n, hence + on both sides
            tp, tm = self._traces(state.T, axis)
            jump_nt = dp * tp - dm * tm
            pay_plus[:, axis] += 0.5 * jump_nt / (f.m_i * dp)
            pay_minus[:, axis] += 0.5 * jump_nt / (f.m_i * dm)
            r_v += assembly.facet_moments(
                self.hdiv, axis, alpha_plus=pay_plus, alpha_minus=pay_minus
            )
        ev.r_v = r_v
        ev.vdot = assembly.mass_solver(self.hdiv).solve(r_v)

    def _momentum_pressure(self, ev):
        f = self.formulation
        state = ev.state
        dens, v_qp = ev.dens_qp, ev.v_qp
        s_qp = f.m_i * dens
        grad_s = f.m_i * ev.grad_dens
        grad_v, div_v = ev.grad_u, ev.div_u  # transport velocity is V here
        v2 = np.einsum("ciq,ciq->cq", v_qp, v_qp)

        # projected kinetic pressure P
        p_mom = assembly.cell_moments(self.l2, 0.5 * f.m_i * v2)
        p_coefs = assembly.mass_solver(self.l2).solve(p_mom)
        p_field = Field(self.l2, p_coefs)
        ev.p_proj_coefs = p_coefs
        grad_p_proj = assembly.evaluate_grad_at_qp(p_field)

        # rotation-form transport with the mass density folded in; same
        # package layout as the temperature kind, weighted by s = m_i n
        alpha = (
            s_qp[:, None, :] * div_v[:, None, :] * v_qp
            - v2[:, None, :] * grad_s
            + np.einsum("cdq,cdq->cq", v_qp, grad_s)[:, None, :] * v_qp
            - s_qp[:, None, :] * np.einsum("cdiq,cdq->ciq", grad_v, v_qp)
        )
        alpha -= dens[:, None, :] * grad_p_proj
        alpha += self._lorentz_alpha(ev)

        eye = np.eye(3)
        beta = s_qp[:, None, None, :] * (
            np.einsum("ciq,cdq->cidq", v_qp, v_qp)
            - eye[None, :, :, None] * v2[:, None, None, :]
        )
        beta += eye[None, :, :, None] * ev.p_qp[:, None, None, :]

        r_v = assembly.cell_moments(self.hdiv, alpha, beta)

        for axis in range(3):
            vp, vm = self._traces(state.V, axis)
            vn = vp[:, axis]
            dp, dm = self._traces(state.n, axis)
            n_up = assembly.upwind(dp, dm, -vn)
            pp, pm = self._traces(p_field, axis)
            v_tilde = assembly.upwind(vp, vm, -vn[:, None, :])
            nrm = _AXIS_UNIT[axis]
            # rotation-package boundary remnant, weighted by each side's m_i n
            pay_plus = f.m_i * dp[:, None, :] * np.cross(
                vp, np.cross(nrm, v_tilde, axis=1), axis=1
            )
            pay_minus = f.m_i * dm[:, None, :] * np.cross(
                vm, np.cross(-nrm, v_tilde, axis=1), axis=1
            )
            pay_plus[:, axis] += pp * n_up
            pay_minus[:, axis] -= pm * n_up
            r_v += assembly.facet_moments(
                self.hdiv, axis, alpha_plus=pay_plus, alpha_minus=pay_minus
            )
        ev.r_v = r_v
        solver = assembly.WeightedMassSolver(self.hdiv, s_qp, rel_tol=self.cg_tol)
        ev.vdot = solver.solve(r_v)

    # -- thermal ---------------------------------------------------------

    def _temperature_equation(self, ev):
        f = self.formulation
        state = ev.state
        dens, u_qp, f_qp = ev.dens_qp, ev.u_qp, ev.f_qp
        gamma = f.gamma

        alpha = -np.einsum("ciq,ciq->cq", f_qp, ev.grad_t) / (gamma - 1.0)
        alpha += np.einsum("ciq,ciq->cq", u_qp, ev.grad_nt)
        beta = (dens * ev.t_qp)[:, None, :] * u_qp
        r_t = assembly.cell_moments(self.h1, alpha, beta)

        flux_field = Field(self.hdiv, ev.flux_coefs)
        for axis in range(3):
            fp, fm = self._traces(flux_field, axis)
            dp, dm = self._traces(state.n, axis)
            tp, tm = self._traces(state.T, axis)
            up_n = fp[:, axis] / dp
            um_n = fm[:, axis] / dm
            mean_un = 0.5 * (up_n + um_n)
            a_plus = -(dp * tp) * mean_un
            a_minus = +(dm * tm) * mean_un
            g_plus = g_minus = None
            if f.kappa_t != 0.0:
                gtp = assembly.facet_gradients(state.T, axis, "plus")
                gtm = assembly.facet_gradients(state.T, axis, "minus")
                jump_fgt = np.einsum("fiq,fiq->fq", fp, gtp) - np.einsum(
                    "fiq,fiq->fq", fm, gtm
                )
                mean_dens = 0.5 * (dp + dm)
                coef = (
                    self.h_e[axis] ** 2
                    * f.kappa_t
                    * jump_fgt
                    / ((gamma - 1.0) * mean_dens)
                )
                g_plus = -coef[:, None, :] * fp
                g_minus = +coef[:, None, :] * fm
            if ev.ohmic[axis] is not None and f.ohmic_heating:
                # heating lands on the conforming trace (plus side)
                a_plus = a_plus + ev.ohmic[axis]
            r_t += assembly.facet_moments(
                self.h1,
                axis,
                alpha_plus=a_plus,
                alpha_minus=a_minus,
                grad_plus=g_plus,
                grad_minus=g_minus,
            )
        ev.r_thermal = r_t
        solver = assembly.WeightedMassSolver(self.h1, dens, rel_tol=self.cg_tol)
        ev.thermal_dot = solver.solve((gamma - 1.0) * r_t)

    def _pressure_equation(self, ev):
        f = self.formulation
        state = ev.state
        gamma = f.gamma
        beta = ev.p_qp[:, None, :] * ev.v_qp / (gamma - 1.0)
        alpha = -ev.p_qp * ev.div_u  # div_u is div V for the pressure kind
        r_p = assembly.cell_moments(self.l2, alpha, beta)
        for axis in range(3):
            vp, vm = self._traces(state.V, axis)
            vn = vp[:, axis]
            pp, pm = self._traces(state.p, axis)
            p_up = assembly.upwind(pp, pm, -vn)
            a_plus = -vn * p_up / (gamma - 1.0)
            a_minus = +vn * p_up / (gamma - 1.0)
            if ev.ohmic[axis] is not None and f.ohmic_heating:
                a_plus = a_plus + 0.5 * ev.ohmic[axis]
                a_minus = a_minus + 0.5 * ev.ohmic[axis]
            r_p += assembly.facet_moments(
                self.l2, axis, alpha_plus=a_plus, alpha_minus=a_minus
            )
        ev.r_thermal = r_p
        ev.thermal_dot = assembly.mass_solver(self.l2).solve((gamma - 1.0) * r_p)


# ----------------------------------------------------------------------
# Module-level operations (thin wrappers over a cached evaluator)
# ----------------------------------------------------------------------

_rhs_cache = {}


def rhs_for(formulation: Formulation, mesh, degree) -> MhdRhs:
    key = (id(mesh), degree, formulation)
    if key not in _rhs_cache:
        _rhs_cache[key] = MhdRhs(formulation, mesh, degree)
    return _rhs_cache[key]


def compute_flux(n: Field, v: Field) -> Field:
    """L2 projection of n V into the div-conforming space."""
    hdiv = v.space
    dens = assembly.evaluate_at_qp(n)
    v_qp = assembly.evaluate_at_qp(v)
    moments = assembly.cell_moments(hdiv, dens[:, None, :] * v_qp)
    return Field(hdiv, assembly.mass_solver(hdiv).solve(moments))


def current_density(state: State, formulation: Formulation) -> Field:
    """Weak-curl current for div forms; strong curl for the curl form."""
    rhs = rhs_for(formulation, state.mesh, state.degree)
    if formulation.magnetic_kind == "curl":
        return Field(rhs.hdiv, (rhs.curl_op @ state.B.data) / formulation.mu0)
    weak = rhs.curl_op.T @ assembly.mass_solver(rhs.hdiv).apply(
        state.B.data / formulation.mu0
    )
    return Field(rhs.hcurl, assembly.mass_solver(rhs.hcurl).solve(weak))


def electric_field(state: State, formulation: Formulation) -> Evaluation:
    """Full electric context (volume integrand, penalties, E coefficients
    for the div forms); also carries every assembled rate."""
    return rhs_for(formulation, state.mesh, state.degree).evaluate(state)


def hydro_rhs(state: State, formulation: Formulation, e_context=None):
    """(ndot, vdot, thermal rate) coefficient vectors."""
    ev = e_context or electric_field(state, formulation)
    return ev.ndot, ev.vdot, ev.thermal_dot


def magnetic_rhs(state: State, formulation: Formulation, e_context=None):
    ev = e_context or electric_field(state, formulation)
    return ev.bdot


def vector_potential_rhs(state: State, formulation: Formulation, e_context=None):
    ev = e_context or electric_field(state, formulation)
    return ev.adot


def energy_rate_audit(state: State, formulation: Formulation = None, e_context=None):
    """Chain-rule rate of the total energy; zero (to roundoff) for every
    conservative formulation."""
    formulation = formulation or state.formulation
    ev = e_context or electric_field(state, formulation)
    return ev.energy_rate()


def helicity_rate_audit(state: State, formulation: Formulation = None, e_context=None):
    """Chain-rule rate of the magnetic helicity <A, B>."""
    formulation = formulation or state.formulation
    ev = e_context or electric_field(state, formulation)
    return ev.helicity_rate()
