"""Quadrature, tabulation, mass operators and cell/facet functionals.

One fixed Gauss-Legendre rule with q = degree + 2 points per axis is used
for every integral in the package (cells and facets alike), so identities
that hold for the continuous forms (integration by parts against the strong
derivative operators, product-rule expansions) cancel to floating-point
roundoff between any two assembled quantities: every pairing sees the same
points, the same weights and the same tabulated basis values.

All reductions run in a fixed traversal order (dense matmul per cell batch
plus bincount scatter), so assembly is bitwise deterministic for a given
BLAS thread count; the CLI pins the thread count when determinism is
requested.

Linear functionals are described by payload arrays:

- cell moments   F[i] = sum_q wt_q [ alpha(x_q) . w_i(x_q) + beta(x_q) : grad w_i(x_q) ]
- facet moments  F[i] = sum_q wt_q [ a^s(x_q) . w_i^s(x_q) + g^s(x_q) . grad w_i^s(x_q) ]

accumulated over both facet sides s. Scalar test spaces drop a rank.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import eigh as dense_eigh

from .sparse import SparseMatrix, cg_solve
from .spaces import (
    Field,
    Space,
    _family_nodes,
    lagrange_derivatives,
    lagrange_values,
)

_rules = {}


class QuadratureRule:
    """1D Gauss-Legendre rule on [0, 1] with q = degree + 2 points."""

    def __init__(self, degree):
        q = degree + 2
        x, w = leggauss(q)
        self.degree = degree
        self.npoints = q
        self.points = (x + 1.0) / 2.0
        self.weights = w / 2.0


def quadrature_rule(degree):
    if degree not in _rules:
        _rules[degree] = QuadratureRule(degree)
    return _rules[degree]


# ----------------------------------------------------------------------
# Volume tabulations
# ----------------------------------------------------------------------

class _SpaceTabs:
    """Per-component basis value/derivative tables at the volume rule."""

    def __init__(self, space: Space):
        rule = quadrature_rule(space.degree)
        pts = rule.points
        mesh = space.mesh
        h = mesh.spacing
        q = rule.npoints
        self.nq = q ** 3
        # reference weights scaled by the (uniform) cell volume
        w3 = np.einsum("c,b,a->cba", rule.weights, rule.weights, rule.weights)
        self.weights = w3.reshape(-1) * (h[0] * h[1] * h[2])
        self.val = []
        self.dval = []
        k = space.degree
        for fam in space.families:
            v1 = [lagrange_values(_family_nodes(fam[a], k), pts) for a in range(3)]
            d1 = [
                lagrange_derivatives(_family_nodes(fam[a], k), pts) / h[a]
                for a in range(3)
            ]
            val = np.einsum("cq,br,ap->cbaqrp", v1[2], v1[1], v1[0])
            nd = val.shape[0] * val.shape[1] * val.shape[2]
            self.val.append(np.ascontiguousarray(val.reshape(nd, self.nq)))
            per_axis = []
            for a in range(3):
                f = [v1[0], v1[1], v1[2]]
                f[a] = d1[a]
                tab = np.einsum("cq,br,ap->cbaqrp", f[2], f[1], f[0])
                per_axis.append(np.ascontiguousarray(tab.reshape(nd, self.nq)))
            self.dval.append(per_axis)


def get_tabs(space) -> _SpaceTabs:
    tabs = getattr(space, "_tabs", None)
    if tabs is None:
        tabs = _SpaceTabs(space)
        space._tabs = tabs
    return tabs


def cell_quad_points(space):
    """(num_cells, nq, 3) physical quadrature coordinates (cached per mesh)."""
    mesh = space.mesh
    cache = getattr(mesh, "_qp_cache", None)
    if cache is None:
        cache = {}
        mesh._qp_cache = cache
    if space.degree in cache:
        return cache[space.degree]
    rule = quadrature_rule(space.degree)
    pts = rule.points
    h = mesh.spacing
    q = rule.npoints
    zg, yg, xg = np.meshgrid(pts * h[2], pts * h[1], pts * h[0], indexing="ij")
    ref = np.stack([xg.reshape(-1), yg.reshape(-1), zg.reshape(-1)], axis=1)
    origins = mesh.cell_origins()
    out = origins[:, None, :] + ref[None, :, :]
    cache[space.degree] = out
    return out


def cell_quad_weights(space):
    return get_tabs(space).weights


# ----------------------------------------------------------------------
# Field evaluation at the volume rule
# ----------------------------------------------------------------------

def evaluate_at_qp(field: Field):
    """Values at all cell quadrature points.

    Returns (num_cells, nq) for scalar spaces, (num_cells, 3, nq) for
    vector spaces.
    """
    space = field.space
    tabs = get_tabs(space)
    comps = []
    for c in range(space.ncomp):
        gathered = field.comp(c)[space.cell_dofs(c)]
        comps.append(gathered @ tabs.val[c])
    if space.ncomp == 1:
        return comps[0]
    return np.stack(comps, axis=1)


def evaluate_grad_at_qp(field: Field):
    """Broken (cell-wise) first derivatives at the volume rule.

    Scalar spaces: (num_cells, 3, nq) gradient. Vector spaces:
    (num_cells, 3, 3, nq) Jacobian, axes [component, derivative].
    """
    space = field.space
    tabs = get_tabs(space)
    out = []
    for c in range(space.ncomp):
        gathered = field.comp(c)[space.cell_dofs(c)]
        out.append(np.stack([gathered @ tabs.dval[c][a] for a in range(3)], axis=1))
    if space.ncomp == 1:
        return out[0]
    return np.stack(out, axis=1)


# ----------------------------------------------------------------------
# Cell functionals and mass operators
# ----------------------------------------------------------------------

def cell_moments(space, alpha, beta=None):
    """Assemble cell-integral moments for the given payloads.

    alpha pairs with the test value: (num_cells, nq) on scalar spaces,
    (num_cells, 3, nq) on vector spaces. beta pairs with the test
    derivatives: (num_cells, 3, nq) gradient payload on scalar spaces,
    (num_cells, 3, 3, nq) [component, derivative] on vector spaces.
    """
    tabs = get_tabs(space)
    wt = tabs.weights
    out = np.zeros(space.ndof)
    for c in range(space.ncomp):
        if space.ncomp == 1:
            a = alpha
            b = beta
        else:
            a = alpha[:, c] if alpha is not None else None
            b = beta[:, c] if beta is not None else None
        contrib = 0.0
        if a is not None:
            contrib = (a * wt) @ tabs.val[c].T
        if b is not None:
            for d in range(3):
                contrib = contrib + (b[:, d] * wt) @ tabs.dval[c][d].T
        flat = np.bincount(
            space.cell_dofs(c).reshape(-1),
            weights=np.asarray(contrib).reshape(-1),
            minlength=space.comp_ndof,
        )
        out[c * space.comp_ndof : (c + 1) * space.comp_ndof] = flat
    return out

def cell_functional(space, integrand):
    """Assemble F[i] = integral of integrand against the test basis.

    integrand(points) receives (num_cells, nq, 3) physical coordinates and
    returns (alpha, beta) payload arrays as described in cell_moments
    (either may be None).
    """
    alpha, beta = integrand(cell_quad_points(space))
    return cell_moments(space, alpha, beta)


def weight_at_quad_points(space, weight):
    """Normalize a weight argument to an array over the volume rule."""
    if weight is None:
        return np.ones((space.mesh.num_cells, get_tabs(space).nq))
    if isinstance(weight, Field):
        if weight.space.ncomp != 1:
            raise ValueError("weight field must live on a scalar space")
        if weight.space.mesh is not space.mesh:
            raise ValueError("weight field lives on a different mesh")
        return evaluate_at_qp(weight)
    if callable(weight):
        return np.asarray(weight(cell_quad_points(space)), dtype=float)
    w = np.asarray(weight, dtype=float)
    expected = (space.mesh.num_cells, get_tabs(space).nq)
    if w.shape != expected:
        raise ValueError(f"weight array has shape {w.shape}, expected {expected}")
    return w


def mass_matrix(space, weight=None):
    """Assembled (optionally weighted) mass matrix as a SparseMatrix.

    The weight is a positive scalar function; vector spaces get the same
    weight on every component (block diagonal across components).
    """
    tabs = get_tabs(space)
    w = weight_at_quad_points(space, weight) * tabs.weights
    rows, cols, vals = [], [], []
    for c in range(space.ncomp):
        val = tabs.val[c]
        blocks = np.einsum("cq,aq,bq->cab", w, val, val)
        dofs = space.cell_dofs(c) + c * space.comp_ndof
        nd = dofs.shape[1]
        rows.append(np.repeat(dofs, nd, axis=1).reshape(-1))
        cols.append(np.tile(dofs, (1, nd)).reshape(-1))
        vals.append(blocks.reshape(-1))
    return SparseMatrix.from_coo(
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
        (space.ndof, space.ndof),
    )


def _axis_mass_1d(space, axis, family):
    """Dense global 1D mass matrix for one axis/family."""
    rule = quadrature_rule(space.degree)
    h = space.mesh.spacing[axis]
    nodes = _family_nodes(family, space.degree)
    v = lagrange_values(nodes, rule.points)
    block = np.einsum("q,aq,bq->ab", rule.weights * h, v, v)
    dofs = space.axis_cell_dofs(axis, family)
    m = space.axis_ndofs[axis]
    out = np.zeros((m, m))
    for c in range(dofs.shape[0]):
        idx = dofs[c]
        # add.at accumulates correctly when a dof repeats (wrapped cells)
        np.add.at(out, (idx[:, None], idx[None, :]), block)
    return out


class KroneckerMassSolver:
    """Direct unweighted mass solver via per-axis eigendecompositions.

    The unweighted mass of each component factors as Mz (x) My (x) Mx over
    the tensor grid, so one symmetric eigendecomposition per axis gives an
    exact (direct) solve applied as three dense tensor contractions.
    """

    def __init__(self, space: Space):
        self.space = space
        self._per_comp = []
        for fam in space.families:
            axes = []
            for a in range(3):
                m1 = _axis_mass_1d(space, a, fam[a])
                lam, vec = np.linalg.eigh(m1)
                axes.append((m1, lam, vec))
            lx, ly, lz = axes[0][1], axes[1][1], axes[2][1]
            inv_lam = 1.0 / (
                lz[:, None, None] * ly[None, :, None] * lx[None, None, :]
            )
            self._per_comp.append((axes, inv_lam))

    def _transform(self, grid, mats, transpose):
        x = grid
        qx, qy, qz = mats
        if transpose:
            x = np.einsum("zyb,ba->zya", x, qx)
            x = np.einsum("zbx,ba->zax", x, qy)
            x = np.einsum("byx,ba->ayx", x, qz)
        else:
            x = np.einsum("zya,ba->zyb", x, qx)
            x = np.einsum("zax,ba->zbx", x, qy)
            x = np.einsum("ayx,ba->byx", x, qz)
        return x

    def solve(self, rhs):
        space = self.space
        mx, my, mz = space.axis_ndofs
        out = np.empty_like(np.asarray(rhs, dtype=float))
        for c, (axes, inv_lam) in enumerate(self._per_comp):
            mats = (axes[0][2], axes[1][2], axes[2][2])
            g = space.component(np.asarray(rhs, dtype=float), c).reshape(mz, my, mx)
            t = self._transform(g, mats, transpose=True)
            t = t * inv_lam
            t = self._transform(t, mats, transpose=False)
            out[c * space.comp_ndof : (c + 1) * space.comp_ndof] = t.reshape(-1)
        return out

    def apply(self, x):
        """Matvec with the mass operator (for moment-space manipulations)."""
        space = self.space
        mx, my, mz = space.axis_ndofs
        out = np.empty_like(np.asarray(x, dtype=float))
        for c, (axes, _) in enumerate(self._per_comp):
            g = space.component(np.asarray(x, dtype=float), c).reshape(mz, my, mx)
            g = np.einsum("zyb,ab->zya", g, axes[0][0])
            g = np.einsum("zbx,ab->zax", g, axes[1][0])
            g = np.einsum("byx,ab->ayx", g, axes[2][0])
            out[c * space.comp_ndof : (c + 1) * space.comp_ndof] = g.reshape(-1)
        return out


def mass_solver(space) -> KroneckerMassSolver:
    solver = getattr(space, "_mass_solver", None)
    if solver is None:
        solver = KroneckerMassSolver(space)
        space._mass_solver = solver
    return solver


class WeightedMassSolver:
    """Matrix-free CG solve of a scalar-weighted mass system.

    The operator maps coefficients to weighted moments; the unweighted
    Kronecker solve (scaled by the mean weight) serves as preconditioner.
    """

    def __init__(self, space: Space, weight_qp, rel_tol=1e-12):
        self.space = space
        self.weight_qp = np.asarray(weight_qp, dtype=float)
        self.rel_tol = rel_tol
        self._precond = mass_solver(space)
        self._wbar = float(np.mean(self.weight_qp))
        self.last_report = None

    def apply(self, x):
        space = self.space
        tabs = get_tabs(space)
        wt = tabs.weights * self.weight_qp
        out = np.empty_like(x)
        for c in range(space.ncomp):
            gathered = x[c * space.comp_ndof : (c + 1) * space.comp_ndof][
                space.cell_dofs(c)
            ]
            vals = gathered @ tabs.val[c]
            contrib = (vals * wt) @ tabs.val[c].T
            out[c * space.comp_ndof : (c + 1) * space.comp_ndof] = np.bincount(
                space.cell_dofs(c).reshape(-1),
                weights=contrib.reshape(-1),
                minlength=space.comp_ndof,
            )
        return out

    def solve(self, rhs):
        precond = lambda r: self._precond.solve(r) / self._wbar
        x, report = cg_solve(
            self.apply, rhs, rel_tol=self.rel_tol, preconditioner=precond
        )
        self.last_report = report
        return x


# ----------------------------------------------------------------------
# Facet tabulations and functionals
# ----------------------------------------------------------------------

class _FacetTabs:
    """Both-side trace tables for one facet family (fixed normal axis)."""

    def __init__(self, space: Space, axis: int):
        rule = quadrature_rule(space.degree)
        pts = rule.points
        mesh = space.mesh
        h = mesh.spacing
        self.axis = axis
        self.area = mesh.facet_area(axis)
        self.plus_cells, self.minus_cells = mesh.facet_cells(axis)
        q = rule.npoints

        # the normal axis collapses to a single endpoint (plus side traces
        # at 1, minus side at 0), so its weight slot is a singleton 1
        axis_wts = [rule.weights, rule.weights, rule.weights]
        axis_wts[axis] = np.array([1.0])
        w = np.einsum("c,b,a->cba", axis_wts[2], axis_wts[1], axis_wts[0])
        self.nq = w.size
        self.weights = w.reshape(-1) * self.area

        k = space.degree
        self.val_plus, self.val_minus = [], []
        self.dval_plus, self.dval_minus = [], []
        want_grad = space.kind == "h1"
        for fam in space.families:
            tabs_side = {}
            for side, endpoint in (("plus", 1.0), ("minus", 0.0)):
                v1, d1 = [], []
                for a in range(3):
                    nodes = _family_nodes(fam[a], k)
                    at = np.array([endpoint]) if a == axis else pts
                    v1.append(lagrange_values(nodes, at))
                    d1.append(lagrange_derivatives(nodes, at) / h[a])
                val = np.einsum("cq,br,ap->cbaqrp", v1[2], v1[1], v1[0])
                nd = val.shape[0] * val.shape[1] * val.shape[2]
                tabs_side[side] = np.ascontiguousarray(val.reshape(nd, self.nq))
                if want_grad:
                    grads = []
                    for a in range(3):
                        f = [v1[0], v1[1], v1[2]]
                        f[a] = d1[a]
                        g = np.einsum("cq,br,ap->cbaqrp", f[2], f[1], f[0])
                        grads.append(np.ascontiguousarray(g.reshape(nd, self.nq)))
                    tabs_side[side + "_grad"] = grads
            self.val_plus.append(tabs_side["plus"])
            self.val_minus.append(tabs_side["minus"])
            if want_grad:
                self.dval_plus.append(tabs_side["plus_grad"])
                self.dval_minus.append(tabs_side["minus_grad"])


def get_facet_tabs(space, axis) -> _FacetTabs:
    cache = getattr(space, "_facet_tabs", None)
    if cache is None:
        cache = {}
        space._facet_tabs = cache
    if axis not in cache:
        cache[axis] = _FacetTabs(space, axis)
    return cache[axis]


def facet_quad_points(space, axis):
    """(num_facets, nq2, 3) physical coordinates on one facet family."""
    mesh = space.mesh
    cache = getattr(mesh, "_facet_qp_cache", None)
    if cache is None:
        cache = {}
        mesh._facet_qp_cache = cache
    key = (space.degree, axis)
    if key in cache:
        return cache[key]
    rule = quadrature_rule(space.degree)
    pts = rule.points
    h = mesh.spacing
    axis_pts = [pts * h[0], pts * h[1], pts * h[2]]
    axis_pts[axis] = np.array([0.0])
    zg, yg, xg = np.meshgrid(axis_pts[2], axis_pts[1], axis_pts[0], indexing="ij")
    ref = np.stack([xg.reshape(-1), yg.reshape(-1), zg.reshape(-1)], axis=1)
    origins = mesh.cell_origins()  # facet i sits on the low face of cell i
    out = origins[:, None, :] + ref[None, :, :]
    cache[key] = out
    return out


def facet_values(field: Field, axis, side):
    """Trace values of a field on one side of a facet family.

    Returns (num_facets, nq2) for scalar fields, (num_facets, 3, nq2) for
    vector fields.
    """
    space = field.space
    tabs = get_facet_tabs(space, axis)
    cells = tabs.plus_cells if side == "plus" else tabs.minus_cells
    val = tabs.val_plus if side == "plus" else tabs.val_minus
    comps = []
    for c in range(space.ncomp):
        gathered = field.comp(c)[space.cell_dofs(c)[cells]]
        comps.append(gathered @ val[c])
    if space.ncomp == 1:
        return comps[0]
    return np.stack(comps, axis=1)


def facet_gradients(field: Field, axis, side):
    """(num_facets, 3, nq2) one-sided gradient traces of an h1 field."""
    space = field.space
    if space.kind != "h1":
        raise ValueError("gradient traces are tabulated for h1 fields only")
    tabs = get_facet_tabs(space, axis)
    cells = tabs.plus_cells if side == "plus" else tabs.minus_cells
    dval = tabs.dval_plus if side == "plus" else tabs.dval_minus
    gathered = field.comp(0)[space.cell_dofs(0)[cells]]
    return np.stack([gathered @ dval[0][a] for a in range(3)], axis=1)


def facet_moments(space, axis, alpha_plus=None, alpha_minus=None,
                  grad_plus=None, grad_minus=None):
    """Accumulate facet-integral moments onto both adjacent cells.

    alpha_* pairs with the one-sided test trace; grad_* (h1 only) with the
    one-sided test gradient trace. Shapes as in facet_values /
    facet_gradients with the leading num_facets dimension.
    """
    tabs = get_facet_tabs(space, axis)
    wt = tabs.weights
    out = np.zeros(space.ndof)
    jobs = (
        (alpha_plus, grad_plus, tabs.plus_cells, tabs.val_plus,
         tabs.dval_plus if space.kind == "h1" else None),
        (alpha_minus, grad_minus, tabs.minus_cells, tabs.val_minus,
         tabs.dval_minus if space.kind == "h1" else None),
    )
    for alpha, grad, cells, val, dval in jobs:
        if alpha is None and grad is None:
            continue
        for c in range(space.ncomp):
            dofs = space.cell_dofs(c)[cells]
            contrib = 0.0
            if alpha is not None:
                a = alpha if space.ncomp == 1 else alpha[:, c]
                contrib = (a * wt) @ val[c].T
            if grad is not None:
                if space.ncomp != 1:
                    raise ValueError("gradient facet payloads are for h1 tests")
                for d in range(3):
                    contrib = contrib + (grad[:, d] * wt) @ dval[c][d].T
            out[c * space.comp_ndof : (c + 1) * space.comp_ndof] += np.bincount(
                dofs.reshape(-1),
                weights=np.asarray(contrib).reshape(-1),
                minlength=space.comp_ndof,
            )
    return out


def facet_functional(space, integrand):
    """Assemble a facet functional over all three facet families.

    integrand(points, axis, side) returns the alpha payload for that side
    (and optionally a gradient payload as second element of a tuple).
    """
    total = np.zeros(space.ndof)
    for axis in range(3):
        pts = facet_quad_points(space, axis)
        payloads = {}
        for side in ("plus", "minus"):
            res = integrand(pts, axis, side)
            if isinstance(res, tuple):
                payloads[side] = res
            else:
                payloads[side] = (res, None)
        total += facet_moments(
            space, axis,
            alpha_plus=payloads["plus"][0], alpha_minus=payloads["minus"][0],
            grad_plus=payloads["plus"][1], grad_minus=payloads["minus"][1],
        )
    return total


def upwind(plus_values, minus_values, normal_velocity_plus):
    """Upwind trace selection at facet quadrature points.

    The velocity argument is the normal component measured along the
    facet normal oriented toward the plus side.  Where it is negative
    the flow arrives from the plus side, so the plus trace is the
    upwind value; ties and positive values take the minus trace.  Note
    the mesh's facet families orient their +axis normal out of the plus
    cell, so callers holding a trace of V pass the negated component.
    """
    return np.where(normal_velocity_plus < 0.0, plus_values, minus_values)


# ----------------------------------------------------------------------
# Inner products and norms at the volume rule
# ----------------------------------------------------------------------

def l2_inner(field_a: Field, field_b: Field):
    """Quadrature inner product; the fields may live in different spaces
    (same mesh and degree)."""
    va = evaluate_at_qp(field_a)
    vb = evaluate_at_qp(field_b)
    wt = cell_quad_weights(field_a.space)
    if va.ndim != vb.ndim:
        raise ValueError("cannot pair scalar and vector fields")
    if va.ndim == 3:
        return float(np.einsum("ciq,ciq,q->", va, vb, wt))
    return float(np.einsum("cq,cq,q->", va, vb, wt))


def l2_norm(field: Field):
    return np.sqrt(max(l2_inner(field, field), 0.0))


# ----------------------------------------------------------------------
# Periodic Poisson projector (weak-divergence cleaning)
# ----------------------------------------------------------------------

class PoissonProjector:
    """Solves (grad^T M1 grad) phi = r on the h1 space, null mode removed.

    Per axis the stiffness factorizes against the 1D masses, so a single
    generalized symmetric eigendecomposition per axis yields a direct
    solver; the constant null mode's coefficient is zeroed.
    """

    def __init__(self, h1_space: Space):
        if h1_space.kind != "h1":
            raise ValueError("PoissonProjector expects the h1 space")
        from .spaces import _axis_derivative_1d

        self.space = h1_space
        k = h1_space.degree
        self._axes = []
        for a in range(3):
            ma = _axis_mass_1d(h1_space, a, "A")
            mb = _axis_mass_1d(h1_space, a, "B")
            d1 = _axis_derivative_1d(h1_space.mesh, k, a).toarray()
            k1 = d1.T @ mb @ d1
            k1 = 0.5 * (k1 + k1.T)
            lam, vec = dense_eigh(k1, ma)
            self._axes.append((lam, vec))
        lx, ly, lz = (ax[0] for ax in self._axes)
        lam_sum = (
            lz[:, None, None] + ly[None, :, None] + lx[None, None, :]
        )
        cutoff = 1e-8 * float(np.max(lam_sum))
        inv = np.zeros_like(lam_sum)
        mask = lam_sum > cutoff
        inv[mask] = 1.0 / lam_sum[mask]
        self._inv_lam = inv

    def solve(self, rhs):
        space = self.space
        mx, my, mz = space.axis_ndofs
        vx, vy, vz = (ax[1] for ax in self._axes)
        g = np.asarray(rhs, dtype=float).reshape(mz, my, mx)
        t = np.einsum("zyb,ba->zya", g, vx)
        t = np.einsum("zbx,ba->zax", t, vy)
        t = np.einsum("byx,ba->ayx", t, vz)
        t = t * self._inv_lam
        t = np.einsum("zya,ba->zyb", t, vx)
        t = np.einsum("zax,ba->zbx", t, vy)
        t = np.einsum("ayx,ba->byx", t, vz)
        return t.reshape(-1)
