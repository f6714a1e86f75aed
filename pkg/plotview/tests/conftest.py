"""Shared fixtures: a synthesizer for schema-exact diagnostics CSVs."""

from __future__ import annotations

import numpy as np
import pytest

from plotview.series import SCHEMA


@pytest.fixture
def write_csv():
    def _write(path, time, relerr=None, H=None, HM=None):
        time = np.asarray(time, dtype=float)
        n = time.size
        cols = {name: np.zeros(n) for name in SCHEMA}
        cols["step"] = np.arange(n, dtype=float)
        cols["time"] = time
        cols["H"] = np.full(n, 450.0) if H is None else np.asarray(H, dtype=float)
        if HM is not None:
            cols["HM"] = np.asarray(HM, dtype=float)
        cols["relerrB"] = (
            np.linspace(0.01, 0.02, n)
            if relerr is None
            else np.asarray(relerr, dtype=float)
        )
        lines = [",".join(SCHEMA)]
        for i in range(n):
            vals = [cols[name][i] for name in SCHEMA]
            lines.append(
                f"{int(vals[0])}," + ",".join("%.17g" % v for v in vals[1:])
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write
