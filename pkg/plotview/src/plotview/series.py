"""CSV reading for the diagnostics schema.

- the fixed eleven-column header shared with the simulation CLI;
  readers refuse files whose header differs, naming the offender
- Series: one labeled (time, value) track with equal lengths and
  strictly increasing time
- load_csv: one Series per requested column per file, labels from the
  file stems unless the caller provides their own
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA = (
    "step",
    "time",
    "H",
    "KE",
    "IE",
    "ME",
    "HM",
    "divB",
    "weak_divB",
    "normal_jump",
    "relerrB",
)

# style hints cycled over the input order; the renderer maps them to
# line styles so four variants stay tellable apart in grayscale
STYLE_CYCLE = ("solid", "dashed", "dashdot", "dotted")


@dataclass
class Series:
    """One labeled diagnostic track."""

    label: str
    time: np.ndarray
    values: np.ndarray
    style: str = "solid"

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.time.ndim != 1 or self.time.shape != self.values.shape:
            raise ValueError(
                f"series {self.label!r}: time and values must be "
                f"equal-length 1d arrays"
            )
        if self.time.size == 0:
            raise ValueError(f"series {self.label!r} is empty")
        if np.any(np.diff(self.time) <= 0.0):
            raise ValueError(f"series {self.label!r}: time must increase")


def read_table(path):
    """Parse one schema CSV into a dict of named column arrays."""
    lines = [
        ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()
    ]
    if not lines:
        raise ValueError(f"{path}: empty diagnostics file")
    header = tuple(lines[0].strip().split(","))
    if header != SCHEMA:
        raise ValueError(
            f"{path}: header {','.join(header)!r} does not match the "
            f"diagnostics schema {','.join(SCHEMA)!r}"
        )
    data = []
    for num, ln in enumerate(lines[1:], start=2):
        toks = ln.split(",")
        if len(toks) != len(SCHEMA):
            raise ValueError(
                f"{path}: line {num} has {len(toks)} fields, "
                f"the schema has {len(SCHEMA)}"
            )
        try:
            data.append([float(tok) for tok in toks])
        except ValueError:
            raise ValueError(f"{path}: line {num} holds a non-numeric field") from None
    if not data:
        raise ValueError(f"{path}: no data rows")
    rows = np.asarray(data, dtype=float)
    return {name: rows[:, i] for i, name in enumerate(SCHEMA)}


def load_csv(paths, columns=("relerrB",), labels=None):
    """One Series per requested column per file.

    Labels default to the file stems.  With a single requested column
    the labels are used as-is; with several, each series label gets the
    column name appended so legends stay unambiguous.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no CSV files given")
    if labels is None:
        labels = [p.stem for p in paths]
    if len(labels) != len(paths):
        raise ValueError(f"{len(labels)} labels given for {len(paths)} files")
    out = []
    for i, (path, label) in enumerate(zip(paths, labels)):
        table = read_table(path)
        for col in columns:
            if col not in table:
                raise ValueError(
                    f"{path}: no column {col!r} in the diagnostics schema"
                )
            name = label if len(columns) == 1 else f"{label}:{col}"
            out.append(
                Series(
                    name,
                    table["time"],
                    table[col],
                    style=STYLE_CYCLE[i % len(STYLE_CYCLE)],
                )
            )
    return out
