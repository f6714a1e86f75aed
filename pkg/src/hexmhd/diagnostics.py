"""Conserved-quantity monitors and error norms.

- total energy with its kinetic / internal / magnetic split, evaluated
  with the shared assembly quadrature so the sum is exact
- magnetic helicity <A, B> across the two vector spaces
- divergence report: strong L2 norm, weak-divergence functional norm,
  and the facet normal-jump seminorm
- relative L2 error of B against an analytic reference at the
  quadrature points, plus the arithmetic time average used by the
  error studies
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly
from .spaces import Field, build_space, derivative_operator


@dataclass
class DiagRow:
    """One monitoring sample; relerr_b is NaN without a reference."""

    step: int
    time: float
    H: float
    KE: float
    IE: float
    ME: float
    HM: float
    div_b: float
    weak_div_b: float
    normal_jump: float
    relerr_b: float


def energies(state, formulation=None):
    """(H, KE, IE, ME) by quadrature; H is the exact sum of the parts."""
    f = formulation or state.formulation
    wt = assembly.cell_quad_weights(state.n.space)
    dens = assembly.evaluate_at_qp(state.n)
    v = assembly.evaluate_at_qp(state.V)
    b = assembly.evaluate_at_qp(state.B)
    ke = 0.5 * f.m_i * float(np.einsum("cq,ciq,ciq,q->", dens, v, v, wt))
    me = 0.5 / f.mu0 * float(np.einsum("ciq,ciq,q->", b, b, wt))
    if f.uses_pressure:
        ie = float(np.einsum("cq,q->", assembly.evaluate_at_qp(state.p), wt))
    else:
        ie = float(
            np.einsum("cq,cq,q->", dens, assembly.evaluate_at_qp(state.T), wt)
        )
    ie /= f.gamma - 1.0
    return ke + ie + me, ke, ie, me


def magnetic_helicity(state):
    """<A, B> with the shared volume quadrature."""
    return assembly.l2_inner(state.A, state.B)


def divergence_report(state, formulation=None):
    """(strong div norm, weak div norm, facet normal-jump seminorm).

    The strong norm uses the div operator for div-conforming B and the
    broken cell-wise divergence otherwise; the weak norm solves
    <chi, delta_B> = -<grad chi, B> on the continuous scalars.
    """
    f = formulation or state.formulation
    b = state.B
    wt = assembly.cell_quad_weights(b.space)
    if f.magnetic_kind == "curl":
        grad_b = assembly.evaluate_grad_at_qp(b)
        div_qp = np.einsum("ciiq->cq", grad_b)
        strong = float(np.sqrt(np.einsum("cq,cq,q->", div_qp, div_qp, wt)))
    else:
        div_op = derivative_operator(b.space)
        strong = assembly.l2_norm(Field(state.n.space, div_op @ b.data))

    h1 = build_space(state.mesh, "h1", state.degree)
    b_qp = assembly.evaluate_at_qp(b)
    moments = -assembly.cell_moments(h1, None, b_qp)
    delta = assembly.mass_solver(h1).solve(moments)
    weak = assembly.l2_norm(Field(h1, delta))

    jump_sq = 0.0
    for axis in range(3):
        bp = assembly.facet_values(b, axis, "plus")
        bm = assembly.facet_values(b, axis, "minus")
        jump = bp[:, axis] - bm[:, axis]
        fw = assembly.get_facet_tabs(b.space, axis).weights
        jump_sq += float(np.einsum("fq,fq,q->", jump, jump, fw))
    return strong, weak, float(np.sqrt(jump_sq))


def relative_b_error(state, b_fns):
    """|B_exact - B_h| / |B_exact| in L2, reference at quadrature points."""
    pts = assembly.cell_quad_points(state.B.space)
    x, y, z = pts[:, :, 0], pts[:, :, 1], pts[:, :, 2]
    b_qp = assembly.evaluate_at_qp(state.B)
    exact = np.stack([np.broadcast_to(fn(x, y, z), x.shape) for fn in b_fns], axis=1)
    wt = assembly.cell_quad_weights(state.B.space)
    ref = float(np.einsum("ciq,ciq,q->", exact, exact, wt))
    if ref <= 0.0:
        raise ValueError("the analytic reference field vanishes; no relative error")
    diff = exact - b_qp
    return float(np.sqrt(np.einsum("ciq,ciq,q->", diff, diff, wt) / ref))


def time_average(values):
    """Arithmetic mean over all emitted samples (the t=0 row included)."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("cannot average an empty error trace")
    return float(np.mean(arr))


def diag_row(step, state, formulation=None, b_fns=None):
    """Assemble one DiagRow; the error column is NaN with no reference."""
    f = formulation or state.formulation
    h, ke, ie, me = energies(state, f)
    strong, weak, jump = divergence_report(state, f)
    err = relative_b_error(state, b_fns) if b_fns is not None else float("nan")
    return DiagRow(
        step=step,
        time=state.t,
        H=h,
        KE=ke,
        IE=ie,
        ME=me,
        HM=magnetic_helicity(state),
        div_b=strong,
        weak_div_b=weak,
        normal_jump=jump,
        relerr_b=err,
    )
