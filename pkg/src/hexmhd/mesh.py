"""Fully periodic Cartesian box meshes of hexahedral cells.

Entity numbering (x fastest, then y, then z):

- cells:    (ix, iy, iz) -> ix + Nx*(iy + Ny*iz), cell spans
            [ix*hx, (ix+1)*hx] x [iy*hy, (iy+1)*hy] x [iz*hz, (iz+1)*hz]
- vertices: one per cell corner at (ix*hx, iy*hy, iz*hz); under periodicity
            the count equals the cell count and the numbering is the same
- edges:    three families (along x, y, z); edge (a; i) starts at vertex i
            and runs along +axis a; numbered family-major
- faces:    three families by normal axis; face (a; i) sits at coordinate
            x_a = i_a * h_a with its transverse corner at vertex i

All facets are interior (the box is periodic in all directions). For the
facet with normal axis a at index i, the "minus" cell is the one whose low
face it is (cell i) and the "plus" cell is its wrapped neighbour below
(i - e_a); the plus normal points along +a.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse as _sp

from .sparse import SparseMatrix

AXES = (0, 1, 2)


def _cyclic(axis):
    """Return (axis, next, nextnext) in right-handed cyclic order."""
    return axis, (axis + 1) % 3, (axis + 2) % 3


@dataclass(frozen=True)
class FacetRecord:
    """One interior facet: orientation, neighbours and area.

    normal_axis: 0, 1 or 2; the plus-side outward normal is +e_axis and the
    minus-side normal is its negative. area is the product of the two
    transverse cell spacings.
    """

    index: int
    normal_axis: int
    plus_cell: int
    minus_cell: int
    area: float

    @property
    def plus_normal(self):
        n = np.zeros(3)
        n[self.normal_axis] = 1.0
        return n

    @property
    def minus_normal(self):
        return -self.plus_normal


class Mesh:
    """Uniform periodic box mesh.

    Attributes:
        extents: (Lx, Ly, Lz) box side lengths.
        cells: (Nx, Ny, Nz) cell counts per axis.
        spacing: (hx, hy, hz).
    """

    def __init__(self, extents, cells):
        extents = tuple(float(e) for e in extents)
        cells = tuple(int(c) for c in cells)
        if len(extents) != 3 or len(cells) != 3:
            raise ValueError("extents and cells must each have three entries")
        if any(e <= 0 for e in extents):
            raise ValueError(f"extents must be positive, got {extents}")
        if any(c < 1 for c in cells):
            raise ValueError(f"cell counts must be >= 1, got {cells}")
        self.extents = extents
        self.cells = cells
        self.spacing = tuple(e / c for e, c in zip(extents, cells))

    # --- entity counts ------------------------------------------------

    @property
    def num_cells(self):
        nx, ny, nz = self.cells
        return nx * ny * nz

    @property
    def num_vertices(self):
        return self.num_cells

    @property
    def num_edges(self):
        return 3 * self.num_cells

    @property
    def num_faces(self):
        return 3 * self.num_cells

    @property
    def volume(self):
        lx, ly, lz = self.extents
        return lx * ly * lz

    # --- index helpers ------------------------------------------------

    def cell_index(self, ix, iy, iz):
        """Flat cell id with periodic wrapping of the per-axis indices."""
        nx, ny, nz = self.cells
        return (ix % nx) + nx * ((iy % ny) + ny * (iz % nz))

    def cell_tuple(self, index):
        nx, ny, nz = self.cells
        ix = index % nx
        iy = (index // nx) % ny
        iz = index // (nx * ny)
        return ix, iy, iz

    def shifted_cells(self, axis, offset=1):
        """Vector of cell ids shifted by `offset` cells along `axis`.

        Entry c holds the id of the cell reached from cell c by moving
        `offset` cells along the axis (wrapped).
        """
        nx, ny, nz = self.cells
        grid = np.arange(self.num_cells).reshape(nz, ny, nx)
        # numpy axis order is (z, y, x) so mesh axis a maps to array axis 2-a
        rolled = np.roll(grid, -offset, axis=2 - axis)
        return rolled.reshape(-1)

    def cell_origins(self):
        """(num_cells, 3) array of low-corner coordinates."""
        nx, ny, nz = self.cells
        hx, hy, hz = self.spacing
        iz, iy, ix = np.meshgrid(
            np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij"
        )
        out = np.empty((self.num_cells, 3))
        out[:, 0] = (ix * hx).reshape(-1)
        out[:, 1] = (iy * hy).reshape(-1)
        out[:, 2] = (iz * hz).reshape(-1)
        return out

    # --- facets ---------------------------------------------------------

    def facet_area(self, axis):
        h = self.spacing
        _, b, c = _cyclic(axis)
        return h[b] * h[c]

    def facet_cells(self, axis):
        """(plus_cells, minus_cells) id vectors for the family along `axis`.

        Facet i of family `axis` is the low face of cell i; the plus cell is
        the wrapped neighbour at i - e_axis.
        """
        minus = np.arange(self.num_cells)
        plus = self.shifted_cells(axis, offset=-1)
        return plus, minus

    def interior_facets(self):
        """Yield all facet records, family x then y then z."""
        for axis in AXES:
            area = self.facet_area(axis)
            plus, minus = self.facet_cells(axis)
            for i in range(self.num_cells):
                yield FacetRecord(
                    index=axis * self.num_cells + i,
                    normal_axis=axis,
                    plus_cell=int(plus[i]),
                    minus_cell=int(minus[i]),
                    area=area,
                )

    # --- incidence with orientation signs -------------------------------

    def edge_vertex_incidence(self):
        """(num_edges, num_vertices) signed incidence: end minus start."""
        nc = self.num_cells
        rows, cols, vals = [], [], []
        start = np.arange(nc)
        for axis in AXES:
            end = self.shifted_cells(axis, offset=1)
            rows.extend([axis * nc + start, axis * nc + start])
            cols.extend([end, start])
            vals.extend([np.ones(nc), -np.ones(nc)])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        mat = _sp.coo_matrix((vals, (rows, cols)), shape=(3 * nc, nc)).tocsr()
        mat.sum_duplicates()
        return SparseMatrix(mat)

    def face_edge_incidence(self):
        """(num_faces, num_edges) signed incidence.

        The boundary loop of face (a; i) with normal +a runs
        +edge_b(i), +edge_c(i+e_b), -edge_b(i+e_c), -edge_c(i)
        where (a, b, c) is the cyclic axis triple.
        """
        nc = self.num_cells
        base = np.arange(nc)
        rows, cols, vals = [], [], []
        for axis in AXES:
            _, b, c = _cyclic(axis)
            shift_b = self.shifted_cells(b, offset=1)
            shift_c = self.shifted_cells(c, offset=1)
            face = axis * nc + base
            for col, sign in (
                (b * nc + base, 1.0),
                (c * nc + shift_b, 1.0),
                (b * nc + shift_c, -1.0),
                (c * nc + base, -1.0),
            ):
                rows.append(face)
                cols.append(col)
                vals.append(np.full(nc, sign))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        mat = _sp.coo_matrix((vals, (rows, cols)), shape=(3 * nc, 3 * nc)).tocsr()
        mat.sum_duplicates()
        return SparseMatrix(mat)

    def cell_face_incidence(self):
        """(num_cells, num_faces) signed incidence: +high face, -low face."""
        nc = self.num_cells
        base = np.arange(nc)
        rows, cols, vals = [], [], []
        for axis in AXES:
            high = self.shifted_cells(axis, offset=1)
            rows.extend([base, base])
            cols.extend([axis * nc + high, axis * nc + base])
            vals.extend([np.ones(nc), -np.ones(nc)])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        mat = _sp.coo_matrix((vals, (rows, cols)), shape=(nc, 3 * nc)).tocsr()
        mat.sum_duplicates()
        return SparseMatrix(mat)

    def __repr__(self):
        return f"Mesh(extents={self.extents}, cells={self.cells})"


def build_periodic_box(extents, cells):
    """Build a fully periodic Cartesian box mesh.

    Args:
        extents: three positive side lengths (Lx, Ly, Lz).
        cells: three cell counts (Nx, Ny, Nz), each >= 1.
    """
    return Mesh(extents, cells)
