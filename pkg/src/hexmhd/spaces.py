"""Tensor-product finite element spaces on periodic Cartesian hex meshes.

The four spaces form a discrete de Rham complex

    h1 --grad--> hcurl --curl--> hdiv --div--> l2

built from two 1D ingredient families on each axis:

- family A: continuous nodal Lagrange of degree k on Gauss-Lobatto points
  (k = 1: cell endpoints; k = 2: endpoints plus midpoint), shared endpoint
  dofs between neighbouring cells, periodic wrap at the box boundary;
- family B: discontinuous nodal Lagrange of degree k-1 on Gauss-Legendre
  points, k dofs per cell, no sharing.

Component families (x, y, z ingredient per vector component):

    h1    : (A,A,A)
    hcurl : x (B,A,A), y (A,B,A), z (A,A,B)    tangential continuity
    hdiv  : x (A,B,B), y (B,A,B), z (B,B,A)    normal continuity
    l2    : (B,B,B)

Every component carries (k Nx)(k Ny)(k Nz) dofs. Coefficients are stored
component-major, within a component x-fastest (matching the mesh numbering).
Degrees k = 1 and k = 2 are supported.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse as _sp

from .mesh import Mesh
from .sparse import SparseMatrix

KINDS = ("h1", "hcurl", "hdiv", "l2")

_COMPONENT_FAMILIES = {
    "h1": (("A", "A", "A"),),
    "hcurl": (("B", "A", "A"), ("A", "B", "A"), ("A", "A", "B")),
    "hdiv": (("A", "B", "B"), ("B", "A", "B"), ("B", "B", "A")),
    "l2": (("B", "B", "B"),),
}


# ----------------------------------------------------------------------
# 1D nodal ingredients
# ----------------------------------------------------------------------

def gll_nodes(degree):
    """Gauss-Lobatto nodes on [0, 1] for the continuous family."""
    if degree == 1:
        return np.array([0.0, 1.0])
    if degree == 2:
        return np.array([0.0, 0.5, 1.0])
    raise ValueError(f"degree must be 1 or 2, got {degree}")


def gauss_nodes(degree):
    """Gauss-Legendre nodes on [0, 1] for the discontinuous family."""
    if degree not in (1, 2):
        raise ValueError(f"degree must be 1 or 2, got {degree}")
    x, _ = leggauss(degree)
    return (x + 1.0) / 2.0


def lagrange_values(nodes, x):
    """Values of the Lagrange basis for `nodes`: shape (len(nodes), len(x)).

    Direct product form, exact 0/1 at the nodes themselves.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    out = np.empty((nodes.size, x.size))
    for i, xi in enumerate(nodes):
        num = np.ones_like(x)
        den = 1.0
        for j, xj in enumerate(nodes):
            if j == i:
                continue
            num = num * (x - xj)
            den = den * (xi - xj)
        out[i] = num / den
    return out


def lagrange_derivatives(nodes, x):
    """First derivatives of the Lagrange basis, shape (len(nodes), len(x))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    n = nodes.size
    out = np.zeros((n, x.size))
    for i in range(n):
        den = 1.0
        for j in range(n):
            if j != i:
                den = den * (nodes[i] - nodes[j])
        for m in range(n):
            if m == i:
                continue
            term = np.ones_like(x)
            for j in range(n):
                if j in (i, m):
                    continue
                term = term * (x - nodes[j])
            out[i] += term
        out[i] /= den
    return out


def _family_nodes(family, degree):
    return gll_nodes(degree) if family == "A" else gauss_nodes(degree)


# ----------------------------------------------------------------------
# Space and Field
# ----------------------------------------------------------------------

class Space:
    """A finite element space of one of the four complex kinds."""

    def __init__(self, mesh: Mesh, kind: str, degree: int):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.kind = kind
        self.degree = degree
        self.families = _COMPONENT_FAMILIES[kind]
        self.ncomp = len(self.families)
        # both families contribute degree*N dofs per axis
        self.axis_ndofs = tuple(degree * n for n in mesh.cells)
        self.comp_ndof = int(np.prod(self.axis_ndofs))
        self.ndof = self.ncomp * self.comp_ndof
        self._cell_dofs = {}
        self._derivative = None

    def __repr__(self):
        return f"Space({self.kind}, degree={self.degree}, ndof={self.ndof})"

    def local_shape(self, comp):
        """Per-cell dof counts (ndz, ndy, ndx) for a component."""
        k = self.degree
        fam = self.families[comp]
        per_axis = [k + 1 if f == "A" else k for f in fam]
        return per_axis[2], per_axis[1], per_axis[0]

    def axis_cell_dofs(self, axis, family):
        """(N_axis, nd_axis) global 1D dof indices per cell along an axis."""
        k = self.degree
        n = self.mesh.cells[axis]
        m = k * n
        c = np.arange(n)[:, None]
        if family == "A":
            j = np.arange(k + 1)[None, :]
            return (c * k + j) % m
        j = np.arange(k)[None, :]
        return c * k + j

    def cell_dofs(self, comp):
        """(num_cells, nd) component-local global dof indices per cell.

        Local ordering is (jz, jy, jx) with x fastest, matching the
        tabulation tensors in the assembly module.
        """
        if comp in self._cell_dofs:
            return self._cell_dofs[comp]
        mesh = self.mesh
        fam = self.families[comp]
        ax = [self.axis_cell_dofs(a, fam[a]) for a in range(3)]
        mx, my, _ = self.axis_ndofs
        nx, ny, nz = mesh.cells
        cz, cy, cx = np.meshgrid(
            np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
        )
        cx = cx.reshape(-1)
        cy = cy.reshape(-1)
        cz = cz.reshape(-1)
        gx = ax[0][cx][:, None, None, :]
        gy = ax[1][cy][:, None, :, None]
        gz = ax[2][cz][:, :, None, None]
        dofs = gx + mx * (gy + my * gz)
        nd = int(np.prod(self.local_shape(comp)))
        dofs = np.ascontiguousarray(dofs.reshape(mesh.num_cells, nd))
        self._cell_dofs[comp] = dofs
        return dofs

    def axis_node_coords(self, axis, family):
        """Physical coordinates of the global 1D nodes along an axis."""
        k = self.degree
        n = self.mesh.cells[axis]
        h = self.mesh.spacing[axis]
        nodes = _family_nodes(family, k)
        j = np.arange(k * n)
        return (j // k + nodes[j % k]) * h

    def component(self, data, comp):
        """View of one component inside a flat coefficient array."""
        return data[comp * self.comp_ndof : (comp + 1) * self.comp_ndof]

    def component_grid(self, data, comp):
        mx, my, mz = self.axis_ndofs
        return self.component(data, comp).reshape(mz, my, mx)


class Field:
    """Coefficient vector bound to its space."""

    def __init__(self, space: Space, data=None):
        self.space = space
        if data is None:
            data = np.zeros(space.ndof)
        else:
            data = np.asarray(data, dtype=float)
            if data.shape != (space.ndof,):
                raise ValueError(
                    f"coefficient array has shape {data.shape}, expected ({space.ndof},)"
                )
        self.data = data

    @classmethod
    def zeros(cls, space):
        return cls(space)

    def copy(self):
        return Field(self.space, self.data.copy())

    def comp(self, i):
        return self.space.component(self.data, i)

    def __repr__(self):
        return f"Field({self.space.kind}, ndof={self.space.ndof})"


def build_space(mesh, kind, degree):
    """Construct one of the complex spaces ('h1', 'hcurl', 'hdiv', 'l2').

    Instances are memoized per mesh so tabulation and solver caches are
    shared by every consumer of the same space.
    """
    cache = getattr(mesh, "_space_cache", None)
    if cache is None:
        cache = {}
        mesh._space_cache = cache
    key = (kind, degree)
    if key not in cache:
        cache[key] = Space(mesh, kind, degree)
    return cache[key]


# ----------------------------------------------------------------------
# Strong derivative operators
# ----------------------------------------------------------------------

def _axis_derivative_1d(mesh, degree, axis):
    """1D sparse derivative: family-A coefficients -> family-B coefficients.

    Row (c*k + g) evaluates the derivative at Gauss node g of cell c; this
    is exact because the derivative of a degree-k polynomial is degree k-1,
    i.e. determined by its values at the k Gauss nodes.
    """
    k = degree
    n = mesh.cells[axis]
    h = mesh.spacing[axis]
    m = k * n
    dref = lagrange_derivatives(gll_nodes(k), gauss_nodes(k)) / h  # (k+1, k)
    rows, cols, vals = [], [], []
    c = np.arange(n)
    for g in range(k):
        for j in range(k + 1):
            rows.append(c * k + g)
            cols.append((c * k + j) % m)
            vals.append(np.full(n, dref[j, g]))
    mat = _sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def _lifted(op_by_axis, mesh, degree, axis):
    """Lift a 1D operator on `axis` to the 3D tensor grid (identity elsewhere)."""
    mx, my, mz = tuple(degree * n for n in mesh.cells)
    eye = {0: _sp.identity(mx, format="csr"),
           1: _sp.identity(my, format="csr"),
           2: _sp.identity(mz, format="csr")}
    factors = [eye[0], eye[1], eye[2]]
    factors[axis] = op_by_axis
    # global flat index is x-fastest, so kron order is (z, y, x)
    return _sp.kron(_sp.kron(factors[2], factors[1]), factors[0], format="csr")


def derivative_operator(space):
    """Strong derivative mapping into the next space of the complex.

    h1 -> hcurl (gradient), hcurl -> hdiv (curl), hdiv -> l2 (divergence).
    Cached on the space. l2 has no outgoing derivative.
    """
    if space._derivative is not None:
        return space._derivative
    mesh, k = space.mesh, space.degree
    d = [_axis_derivative_1d(mesh, k, a) for a in range(3)]
    lift = lambda a: _lifted(d[a], mesh, k, a)
    if space.kind == "h1":
        mat = _sp.vstack([lift(0), lift(1), lift(2)], format="csr")
    elif space.kind == "hcurl":
        dx, dy, dz = lift(0), lift(1), lift(2)
        n = space.comp_ndof
        zero = _sp.csr_matrix((n, n))
        mat = _sp.bmat(
            [[zero, -dz, dy], [dz, zero, -dx], [-dy, dx, zero]], format="csr"
        )
    elif space.kind == "hdiv":
        mat = _sp.hstack([lift(0), lift(1), lift(2)], format="csr")
    else:
        raise ValueError("l2 is the end of the complex; no derivative operator")
    out = SparseMatrix(mat)
    space._derivative = out
    return out


# ----------------------------------------------------------------------
# Interpolation and point evaluation
# ----------------------------------------------------------------------

def interpolate(space, fn):
    """Nodal interpolation onto the space.

    Scalar spaces take a single callable fn(x, y, z); vector spaces take a
    sequence of three callables, one per component (each component lives on
    its own tensor node grid). Reproduces any function exactly at the nodes,
    in particular constants and per-axis polynomials up to the family degree.
    """
    if space.ncomp == 1:
        fns = (fn,)
    else:
        if not isinstance(fn, (list, tuple)) or len(fn) != 3:
            raise ValueError("vector-space interpolation needs three callables")
        fns = tuple(fn)
    out = Field.zeros(space)
    for comp in range(space.ncomp):
        fam = space.families[comp]
        xs = space.axis_node_coords(0, fam[0])
        ys = space.axis_node_coords(1, fam[1])
        zs = space.axis_node_coords(2, fam[2])
        zg, yg, xg = np.meshgrid(zs, ys, xs, indexing="ij")
        vals = np.asarray(fns[comp](xg, yg, zg), dtype=float)
        out.comp(comp)[:] = np.broadcast_to(vals, zg.shape).reshape(-1)
    return out


def evaluate(field, cells, ref_axes):
    """Evaluate a field inside selected cells on a reference tensor grid.

    Args:
        field: Field to evaluate.
        cells: array of cell ids.
        ref_axes: (rx, ry, rz) 1D arrays of reference coordinates in [0, 1].

    Returns:
        (ncells, npts) for scalar spaces or (ncells, 3, npts) for vector
        spaces, points ordered x-fastest.
    """
    space = field.space
    cells = np.atleast_1d(np.asarray(cells, dtype=int))
    rx, ry, rz = (np.atleast_1d(np.asarray(r, dtype=float)) for r in ref_axes)
    npts = rx.size * ry.size * rz.size
    comps = []
    for comp in range(space.ncomp):
        fam = space.families[comp]
        k = space.degree
        tx = lagrange_values(_family_nodes(fam[0], k), rx)
        ty = lagrange_values(_family_nodes(fam[1], k), ry)
        tz = lagrange_values(_family_nodes(fam[2], k), rz)
        tab = np.einsum("cq,br,ap->cbaqrp", tz, ty, tx)
        nd = tab.shape[0] * tab.shape[1] * tab.shape[2]
        tab = tab.reshape(nd, npts)
        gathered = field.comp(comp)[space.cell_dofs(comp)[cells]]
        comps.append(gathered @ tab)
    if space.ncomp == 1:
        return comps[0]
    return np.stack(comps, axis=1)


def l2_project(space, fn, weight=None, rel_tol=1e-12):
    """Weighted L2 projection of a pointwise evaluator onto the space.

    Args:
        space: target space.
        fn: callable(points) -> values, where points has shape
            (num_cells, nq, 3); must return (num_cells, nq) for scalar
            spaces or (num_cells, 3, nq) for vector spaces.
        weight: optional positive scalar weight; a Field on a scalar space
            of the same mesh, or a callable(points) -> (num_cells, nq).
        rel_tol: tolerance for the weighted (iterative) solve.
    """
    from . import assembly

    points = assembly.cell_quad_points(space)
    alpha = np.asarray(fn(points), dtype=float)
    moments = assembly.cell_moments(space, alpha)
    if weight is None:
        sol = assembly.mass_solver(space)
        return Field(space, sol.solve(moments))
    w = assembly.weight_at_quad_points(space, weight)
    if np.any(w <= 0):
        raise ValueError("projection weight must be positive at quadrature points")
    solver = assembly.WeightedMassSolver(space, w, rel_tol=rel_tol)
    return Field(space, solver.solve(moments))
