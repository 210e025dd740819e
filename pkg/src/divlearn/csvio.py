"""CSV emission with reproducible float formatting."""

import csv
import math
import os

import numpy as np


def format_value(v):
    """Render one cell: floats with 17 significant digits, booleans lowercase."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    return str(v)


def write_csv(path, header, rows):
    """Write dict rows under a fixed header; missing keys become empty cells."""
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(row.get(k)) for k in header])


def read_csv(path):
    """Header and list of dict rows (all values as strings)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or ()), list(reader)
