"""Read-only rendering of simulation diagnostics CSVs."""

from .render import KINDS, render
from .series import SCHEMA, Series, load_csv

__all__ = ["KINDS", "SCHEMA", "Series", "load_csv", "render"]
