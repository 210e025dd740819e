"""Group statistics and log-log slope fits over experiment CSVs."""

import math
from dataclasses import dataclass

import numpy as np

from .csvio import format_value, read_csv
from .errors import MissingColumn


@dataclass(frozen=True)
class GroupStats:
    key: tuple
    count: int
    median: float
    q1: float
    q3: float


@dataclass(frozen=True)
class Summary:
    """Per-group quartiles plus the OLS fit of log(median) on log(axis).

    ``slope_se`` is nan with fewer than three axis values.
    """

    group_keys: tuple
    response: str
    axis: str
    groups: tuple
    slope: float
    slope_se: float
    intercept: float


def _sort_key(text):
    try:
        return (0, float(text), "")
    except ValueError:
        return (1, 0.0, text)


def _as_float(text):
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def loglog_fit(x, y):
    """OLS of log(y) on log(x); returns (slope, stderr, intercept)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    lx, ly = np.log(x[ok]), np.log(y[ok])
    if lx.size < 2 or np.ptp(lx) == 0:
        return math.nan, math.nan, math.nan
    mx, my = lx.mean(), ly.mean()
    sxx = float(np.sum((lx - mx) ** 2))
    slope = float(np.sum((lx - mx) * (ly - my)) / sxx)
    intercept = float(my - slope * mx)
    if lx.size < 3:
        return slope, math.nan, intercept
    resid = ly - intercept - slope * lx
    se = math.sqrt(float(resid @ resid) / (lx.size - 2) / sxx)
    return slope, se, intercept


def summarize_rows(rows, group_keys, response, axis=None):
    """Summarize already-parsed dict rows; see :func:`summarize`."""
    group_keys = tuple(group_keys)
    axis = axis or (group_keys[0] if group_keys else None)
    header = set(rows[0]) if rows else set()
    for col in group_keys + (response,) + ((axis,) if axis else ()):
        if rows and col not in header:
            raise MissingColumn(col)
    rows = [r for r in rows if not r.get("error")]
    buckets, by_axis = {}, {}
    for r in rows:
        v = _as_float(r[response])
        if math.isnan(v):
            continue
        buckets.setdefault(tuple(r[k] for k in group_keys), []).append(v)
        if axis:
            by_axis.setdefault(r[axis], []).append(v)
    groups = []
    for key in sorted(buckets, key=lambda k: tuple(_sort_key(x) for x in k)):
        vals = np.asarray(buckets[key])
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        groups.append(GroupStats(key, int(vals.size), float(med), float(q1), float(q3)))
    slope = se = intercept = math.nan
    if by_axis:
        xs = sorted(by_axis, key=_sort_key)
        slope, se, intercept = loglog_fit([_as_float(x) for x in xs], [np.median(by_axis[x]) for x in xs])
    return Summary(group_keys, response, axis, tuple(groups), slope, se, intercept)


def summarize(csv_path, group_keys, response, axis=None):
    """Group a CSV by ``group_keys`` and fit the response's power law in ``axis``.

    Rows with a non-empty ``error`` cell and non-numeric responses are
    skipped. The slope is fit on the medians of the response at each axis
    value; ``axis`` defaults to the first group key.

    Raises
    ------
    MissingColumn
        If a requested column is not in the header.
    """
    header, rows = read_csv(csv_path)
    for col in tuple(group_keys) + (response,) + ((axis,) if axis else ()):
        if col not in header:
            raise MissingColumn(col)
    return summarize_rows(rows, group_keys, response, axis)


def summary_lines(summary):
    """CSV-style text lines for printing a summary."""
    head = ",".join(summary.group_keys + ("count", "median", "q1", "q3"))
    lines = [head]
    for g in summary.groups:
        lines.append(",".join(list(g.key) + [format_value(v) for v in (g.count, g.median, g.q1, g.q3)]))
    lines.append(
        f"# slope of log({summary.response}) on log({summary.axis}): "
        f"{format_value(summary.slope)} (se {format_value(summary.slope_se)})"
    )
    return lines
