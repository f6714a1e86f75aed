"""Command line front end: vortex runs to CSV diagnostics and VTK files.

- MHD_THREADS is applied at import time, before numpy starts its thread
  pools (0 means sequential); under the console entry point this module
  loads first, so the cap always lands
- parse_config reads flat `key = value` text with # comments
- SimConfig joins mesh, formulation, scenario placement, cadences and
  output names; amplitudes of the vortex stay at their canonical values
- the CSV schema is fixed: one flushed row per diagnostic sample with
  header step,time,H,KE,IE,ME,HM,divB,weak_divB,normal_jump,relerrB and
  every value printed %.17g, so identical configs give identical bytes
- write_vtk emits legacy ASCII RECTILINEAR_GRID snapshots sampled at
  mesh vertices, averaging the adjacent-cell limits of discontinuous
  fields and duplicating the periodic boundary layer
- every assembly reduction in this package is sequential and bitwise
  reproducible, so the deterministic flag is accepted and recorded but
  selects nothing beyond the one code path that exists
"""

from __future__ import annotations

import os
import sys


def _cap_threads():
    raw = os.environ.get("MHD_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MHD_THREADS must be an integer, got {raw!r}") from None
    n = max(1, n)  # 0 = sequential
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "BLIS_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)


_cap_threads()

import argparse  # noqa: E402
from dataclasses import dataclass  # noqa: E402

import numpy as np  # noqa: E402  (thread caps above must land first)

from . import diagnostics, mhd, timeint, vortex  # noqa: E402
from .mesh import build_periodic_box  # noqa: E402
from .spaces import Field, evaluate  # noqa: E402

CSV_HEADER = "step,time,H,KE,IE,ME,HM,divB,weak_divB,normal_jump,relerrB"


@dataclass
class SimConfig:
    """One vortex run: mesh, scheme selectors, constants, outputs."""

    cells: tuple
    dt: float
    t_max: float
    extents: tuple = (10.0, 10.0, 2.0)
    degree: int = 2
    magnetic_kind: str = "div"
    thermal_kind: str = "temperature"
    stabilization: str = "none"
    kappa_t: float = 0.0
    kappa_b: float = 0.0
    lam: float = 1.0
    mu0: float = 0.1
    m_i: float = 1.0
    x_c: float = 5.0
    y_c: float = 5.0
    v_b: float = 0.0
    diag_every: int = 1
    output_every: int = 1
    csv_name: str = "diagnostics.csv"
    vtk_prefix: str = ""
    deterministic: bool = True
    cg_tol: float = 1e-12

    def __post_init__(self):
        self.cells = tuple(int(c) for c in self.cells)
        self.extents = tuple(float(e) for e in self.extents)
        if len(self.cells) != 3 or any(c < 1 for c in self.cells):
            raise ValueError(f"mesh needs three positive cell counts, got {self.cells}")
        if len(self.extents) != 3 or any(e <= 0 for e in self.extents):
            raise ValueError(f"extent needs three positive lengths, got {self.extents}")
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.t_max < 0.0:
            raise ValueError("t_max cannot be negative")
        if self.diag_every < 1 or self.output_every < 1:
            raise ValueError("cadences must be at least 1 step")
        if self.kappa_t < 0.0 or self.kappa_b < 0.0:
            raise ValueError("penalty coefficients cannot be negative")
        if not self.mu0 > 0.0 or not self.m_i > 0.0:
            raise ValueError("mu0 and m_i must be positive")
        if not self.cg_tol > 0.0:
            raise ValueError("cg_tol must be positive")
        if not self.csv_name:
            raise ValueError("csv name cannot be empty")
        self.formulation()  # surfaces selector typos and incompatible pairs

    def formulation(self):
        return mhd.Formulation(
            thermal_kind=self.thermal_kind,
            magnetic_kind=self.magnetic_kind,
            stabilization=self.stabilization,
            kappa_t=self.kappa_t,
            kappa_b=self.kappa_b,
            lam=self.lam,
            dt=self.dt if self.stabilization == "supg" else None,
            m_i=self.m_i,
            mu0=self.mu0,
        )

    def vortex_params(self):
        return vortex.VortexParams(
            x_c=self.x_c,
            y_c=self.y_c,
            v_b=self.v_b,
            mu0=self.mu0,
            m_i=self.m_i,
            lx=self.extents[0],
            ly=self.extents[1],
        )

    def build_mesh(self):
        return build_periodic_box(self.extents, self.cells)

    def stepper(self):
        return timeint.StepperConfig(
            dt=self.dt,
            t_max=self.t_max,
            diag_every=self.diag_every,
            output_every=self.output_every,
            cg_tol=self.cg_tol,
        )


def _parse_triple(value, conv, key):
    sep = "x" if conv is int else ","
    parts = [p.strip() for p in value.split(sep)]
    if len(parts) != 3:
        raise ValueError(f"{key} needs three values separated by {sep!r}, got {value!r}")
    try:
        return tuple(conv(p) for p in parts)
    except ValueError:
        raise ValueError(f"{key} has a malformed entry in {value!r}") from None


def _parse_bool(value, key):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    raise ValueError(f"{key} must be true or false, got {value!r}")


# config key -> (SimConfig attribute, converter); converters get (value, key)
_KEYS = {
    "mesh": ("cells", lambda v, k: _parse_triple(v, int, k)),
    "extent": ("extents", lambda v, k: _parse_triple(v, float, k)),
    "degree": ("degree", lambda v, k: int(v)),
    "magnetic_kind": ("magnetic_kind", lambda v, k: v),
    "thermal_kind": ("thermal_kind", lambda v, k: v),
    "stabilization": ("stabilization", lambda v, k: v),
    "kappa_t": ("kappa_t", lambda v, k: float(v)),
    "kappa_b": ("kappa_b", lambda v, k: float(v)),
    "lam": ("lam", lambda v, k: float(v)),
    "mu0": ("mu0", lambda v, k: float(v)),
    "m_i": ("m_i", lambda v, k: float(v)),
    "dt": ("dt", lambda v, k: float(v)),
    "t_max": ("t_max", lambda v, k: float(v)),
    "x_c": ("x_c", lambda v, k: float(v)),
    "y_c": ("y_c", lambda v, k: float(v)),
    "v_b": ("v_b", lambda v, k: float(v)),
    "diag_every": ("diag_every", lambda v, k: int(v)),
    "output_every": ("output_every", lambda v, k: int(v)),
    "csv": ("csv_name", lambda v, k: v),
    "vtk_prefix": ("vtk_prefix", lambda v, k: v),
    "deterministic": ("deterministic", _parse_bool),
    "cg_tol": ("cg_tol", lambda v, k: float(v)),
}

_REQUIRED = ("mesh", "dt", "t_max")


def parse_config(text):
    """Flat `key = value` lines into a validated SimConfig.

    `#` starts a comment anywhere on a line; blank lines are skipped;
    unknown keys, duplicates, malformed values and missing required keys
    (mesh, dt, t_max) all raise ValueError naming the offender.
    """
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, eq, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not eq or not key:
            raise ValueError(f"line {lineno}: expected key = value, got {body!r}")
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        if not value:
            raise ValueError(f"line {lineno}: empty value for key {key!r}")
        attr, conv = _KEYS[key]
        try:
            seen[key] = (attr, conv(value, key))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    missing = [k for k in _REQUIRED if k not in seen]
    if missing:
        raise ValueError(f"missing required config keys: {', '.join(missing)}")
    return SimConfig(**{attr: val for attr, val in seen.values()})


# ----------------------------------------------------------------------
# CSV serialization
# ----------------------------------------------------------------------


def format_row(row):
    """One schema line (no newline) for a diagnostics row."""
    vals = (
        row.time,
        row.H,
        row.KE,
        row.IE,
        row.ME,
        row.HM,
        row.div_b,
        row.weak_div_b,
        row.normal_jump,
        row.relerr_b,
    )
    return f"{row.step}," + ",".join("%.17g" % v for v in vals)


# ----------------------------------------------------------------------
# VTK output
# ----------------------------------------------------------------------


def _vertex_samples(fld):
    """Field limits averaged at mesh vertices, periodic layer duplicated.

    Returns (nz+1, ny+1, nx+1) for scalars and a list of three such
    grids for vector fields; each interior vertex averages the eight
    adjacent-cell corner limits, which collapses to the shared value for
    conforming components.
    """
    mesh = fld.space.mesh
    nx, ny, nz = mesh.cells
    cells = np.arange(mesh.num_cells)
    ref = ([0.0, 1.0], [0.0, 1.0], [0.0, 1.0])
    # dividing by the evaluated all-ones field restores partition of unity
    # at the corners, where the interior-node families extrapolate; this
    # keeps constant fields exactly constant in the output
    unit = evaluate(Field(fld.space, np.ones(fld.space.ndof)), cells, ref)
    corners = evaluate(fld, cells, ref) / unit

    def fold(per_cell):
        grid = per_cell.reshape(nz, ny, nx, 2, 2, 2)
        acc = np.zeros((nz, ny, nx))
        for iz in range(2):
            for iy in range(2):
                for ix in range(2):
                    acc += np.roll(grid[..., iz, iy, ix], (iz, iy, ix), (0, 1, 2))
        return np.pad(acc / 8.0, ((0, 1), (0, 1), (0, 1)), mode="wrap")

    if corners.ndim == 2:
        return fold(corners)
    return [fold(corners[:, i, :]) for i in range(3)]


def _coords_line(mesh, axis):
    n = mesh.cells[axis]
    h = mesh.spacing[axis]
    return " ".join("%.17g" % (i * h) for i in range(n + 1))


def write_vtk(state, path, formulation=None):
    """Legacy ASCII RECTILINEAR_GRID snapshot of one state.

    Point data: scalars n and T (or p), vectors V, B and E, all sampled
    at the (Nx+1)(Ny+1)(Nz+1) vertices including the duplicated periodic
    layer.  The file is written next to `path` and moved into place, so
    a failed write never leaves a partial snapshot.
    """
    f = formulation or state.formulation
    mesh = state.mesh
    nx, ny, nz = mesh.cells

    ev = mhd.electric_field(state, f)
    e_field = Field(state.A.space, -ev.adot)

    scalars = [("n", _vertex_samples(state.n))]
    scalars.append((f.thermal_name, _vertex_samples(state.thermal)))
    vectors = [
        ("V", _vertex_samples(state.V)),
        ("B", _vertex_samples(state.B)),
        ("E", _vertex_samples(e_field)),
    ]

    npts = (nx + 1) * (ny + 1) * (nz + 1)
    lines = [
        "# vtk DataFile Version 3.0",
        "hexmhd snapshot t=%.17g" % state.t,
        "ASCII",
        "DATASET RECTILINEAR_GRID",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        f"X_COORDINATES {nx + 1} double",
        _coords_line(mesh, 0),
        f"Y_COORDINATES {ny + 1} double",
        _coords_line(mesh, 1),
        f"Z_COORDINATES {nz + 1} double",
        _coords_line(mesh, 2),
        f"POINT_DATA {npts}",
    ]
    for name, grid in scalars:
        lines.append(f"SCALARS {name} double")
        lines.append("LOOKUP_TABLE default")
        lines.extend("%.17g" % v for v in grid.reshape(-1))
    for name, grids in vectors:
        lines.append(f"VECTORS {name} double")
        flat = [g.reshape(-1) for g in grids]
        lines.extend(
            "%.17g %.17g %.17g" % (a, b, c) for a, b, c in zip(*flat)
        )
    text = "\n".join(lines) + "\n"

    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# run driver
# ----------------------------------------------------------------------


def run_config(cfg, out_dir=".", quiet=False, stream=None):
    """Build the vortex state for cfg, run it, write CSV (and VTK)."""
    os.makedirs(out_dir, exist_ok=True)
    mesh = cfg.build_mesh()
    form = cfg.formulation()
    params = cfg.vortex_params()
    state = vortex.initialize_state(params, mesh, form, cfg.degree)

    csv_path = os.path.join(out_dir, cfg.csv_name)
    rows = 0

    with open(csv_path, "w", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.flush()

        def diag_sink(step, st):
            nonlocal rows
            b_fns = vortex.analytic_bundle(params, t=st.t).B
            row = diagnostics.diag_row(step, st, form, b_fns=b_fns)
            fh.write(format_row(row) + "\n")
            fh.flush()
            rows += 1

        snapshot_sink = None
        if cfg.vtk_prefix:

            def snapshot_sink(step, st):
                write_vtk(st, os.path.join(out_dir, f"{cfg.vtk_prefix}_{step:06d}.vtk"), form)

        final = timeint.run(state, form, cfg.stepper(), diag_sink, snapshot_sink)

    if not quiet:
        out = stream or sys.stdout
        print(
            f"completed {cfg.stepper().num_steps} steps to t = {final.t:.6g}; "
            f"{rows} diagnostic rows in {csv_path}",
            file=out,
        )
    return csv_path


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hexmhd",
        description="Structure-preserving MHD runs of the magnetic vortex.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a run described by a config file")
    runp.add_argument("config", help="path to a flat key = value config file")
    runp.add_argument("--out-dir", default=".", help="directory for CSV/VTK output")
    runp.add_argument("--quiet", action="store_true", help="suppress the summary line")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
        run_config(cfg, out_dir=args.out_dir, quiet=args.quiet)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
