"""Reporting triangles: ingestion, staircase censoring, collapse and summaries.

Delay indexing is 1-based throughout: d = 1 means "reported in the week of
occurrence", matching the convention of the rest of the package. Off-by-one
errors here corrupt everything downstream, so the staircase rule is stated
once and reused: cell (t, d) is observable iff t + (d - 1) <= present_day.

Cells outside the observed staircase are stored as zero placeholders but are
latent, not zero; every consumer must honour ``observed_mask``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .util import empirical_quantile

__all__ = [
    "CensoringSpec",
    "ReportingTriangle",
    "HorizonSelection",
    "staircase_mask",
    "parse_long_csv",
    "write_long_csv",
    "read_wide_csv",
    "write_wide_csv",
    "collapse_remainder",
    "cumulative_proportion_quantiles",
    "select_delay_horizon",
]

NA_TOKEN = "NA"


@dataclass(frozen=True)
class CensoringSpec:
    """Present-day index, modeled delay horizon D and reporting maturity.

    ``maturity`` is the number of delay units after which a total is treated
    as final; delays beyond D are collapsed into a single remainder column.
    """

    present_day: int
    delay_horizon: int
    maturity: int

    def __post_init__(self):
        if self.delay_horizon < 1:
            raise ConfigError("delay_horizon must be >= 1")
        if self.maturity < self.delay_horizon:
            raise ConfigError("maturity must be >= delay_horizon")
        if self.present_day < 0:
            raise ConfigError("present_day must be >= 0")


def staircase_mask(n_times: int, n_delays: int, present_day: int) -> np.ndarray:
    """Observability mask: cell (t, d) observed iff t + (d - 1) <= present_day."""
    t = np.arange(1, n_times + 1)[:, None]
    d = np.arange(1, n_delays + 1)[None, :]
    return (t + d - 1) <= present_day


@dataclass(frozen=True)
class ReportingTriangle:
    """Counts by occurrence time (rows) and reporting delay (columns).

    Immutable after construction; safe to share read-only across chains.
    Within each row the observed cells always form a prefix.
    """

    cells: np.ndarray
    observed_mask: np.ndarray
    series_id: str | None = None
    remainder_collapsed: bool = False

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).copy()
        mask = np.asarray(self.observed_mask, dtype=bool).copy()
        if cells.ndim != 2 or mask.shape != cells.shape:
            raise ConfigError("cells and observed_mask must be 2-d with equal shape")
        if np.any(cells < 0):
            raise ConfigError("cell counts must be >= 0")
        if cells.shape[0] and cells.shape[1] > 1:
            # prefix property: an observed cell implies the one before it is observed
            if np.any(mask[:, 1:] & ~mask[:, :-1]):
                raise ConfigError("observed cells must form a prefix within each row")
        cells.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "observed_mask", mask)

    @property
    def n_times(self) -> int:
        return self.cells.shape[0]

    @property
    def n_delays(self) -> int:
        return self.cells.shape[1]

    @property
    def totals(self) -> np.ndarray:
        """Row sums; equal to y_t only where the row is fully observed."""
        return self.cells.sum(axis=1)

    @property
    def totals_observed(self) -> np.ndarray:
        return self.observed_mask.all(axis=1)

    @property
    def prefix_lengths(self) -> np.ndarray:
        return self.observed_mask.sum(axis=1)

    @property
    def prefix_sums(self) -> np.ndarray:
        return np.where(self.observed_mask, self.cells, 0).sum(axis=1)

    def fully_observed_times(self) -> np.ndarray:
        return np.flatnonzero(self.totals_observed) + 1

    def censored_at(self, present_day: int) -> "ReportingTriangle":
        """Re-censor by the staircase rule; hidden cells become zero placeholders."""
        mask = staircase_mask(self.n_times, self.n_delays, present_day)
        return ReportingTriangle(
            cells=np.where(mask, self.cells, 0),
            observed_mask=mask,
            series_id=self.series_id,
            remainder_collapsed=self.remainder_collapsed,
        )


# ---------------------------------------------------------------------------
# long CSV ingestion
# ---------------------------------------------------------------------------


def _parse_int(token: str, what: str, line_no: int) -> int:
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"line {line_no}: non-integer {what} {token!r}") from None


def parse_long_csv(
    path,
    censoring: CensoringSpec,
    columns: tuple[str, str, str] = ("time_index", "delay", "count"),
    series_column: str = "series",
    series: str | None = None,
    n_times: int | None = None,
) -> ReportingTriangle:
    """Read a long CSV (time_index, delay, count [, series]) into a dense triangle.

    Absent (t, d) pairs inside the observed staircase are zero-filled; outside
    it they are latent. Row and column extents are inferred from the data (and
    from ``censoring.maturity``), unless ``n_times`` extends the time range.
    """
    time_col, delay_col, count_col = columns
    records: list[tuple[int, int, int]] = []
    seen: dict[tuple[int, int], int] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ParseError("no records: file is empty")
        for name in (time_col, delay_col, count_col):
            if name not in reader.fieldnames:
                raise ParseError(f"missing required column {name!r}")
        has_series = series_column in reader.fieldnames
        series_seen: set[str] = set()
        for row in reader:
            line_no = reader.line_num
            if has_series:
                row_series = (row[series_column] or "").strip()
                if series is not None and row_series != series:
                    continue
                series_seen.add(row_series)
                if series is None and len(series_seen) > 1:
                    raise ParseError(
                        f"line {line_no}: file holds multiple series "
                        f"({sorted(series_seen)}); pass series= to pick one"
                    )
            t = _parse_int(row[time_col], "time_index", line_no)
            d = _parse_int(row[delay_col], "delay", line_no)
            count = _parse_int(row[count_col], "count", line_no)
            if t < 1:
                raise ParseError(f"line {line_no}: time_index must be >= 1, got {t}")
            if d < 1:
                raise ParseError(f"line {line_no}: delay must be >= 1, got {d}")
            if d > censoring.maturity:
                raise ParseError(
                    f"line {line_no}: delay {d} exceeds maturity {censoring.maturity}"
                )
            if count < 0:
                raise ParseError(f"line {line_no}: negative count {count}")
            if (t, d) in seen:
                raise ParseError(
                    f"line {line_no}: duplicate (time_index, delay) pair "
                    f"({t}, {d}); first seen on line {seen[(t, d)]}"
                )
            if t + d - 1 > censoring.present_day:
                raise ParseError(
                    f"line {line_no}: record ({t}, {d}) lies outside the "
                    f"observable staircase for present_day {censoring.present_day}"
                )
            seen[(t, d)] = line_no
            records.append((t, d, count))
    if not records:
        raise ParseError("no records")
    t_max = max(r[0] for r in records)
    n_rows = max(t_max, n_times or 0)
    cells = np.zeros((n_rows, censoring.maturity), dtype=np.int64)
    for t, d, count in records:
        cells[t - 1, d - 1] = count
    mask = staircase_mask(n_rows, censoring.maturity, censoring.present_day)
    label = series
    if label is None and len(series_seen) == 1:
        only = next(iter(series_seen))
        label = only or None
    return ReportingTriangle(cells=cells, observed_mask=mask, series_id=label)


def write_long_csv(tri: ReportingTriangle, path, columns=("time_index", "delay", "count")) -> None:
    """Write the observed cells in long form (latent cells are omitted)."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = list(columns) + (["series"] if tri.series_id else [])
        writer.writerow(header)
        for t in range(tri.n_times):
            for d in range(tri.n_delays):
                if tri.observed_mask[t, d]:
                    row = [t + 1, d + 1, int(tri.cells[t, d])]
                    if tri.series_id:
                        row.append(tri.series_id)
                    writer.writerow(row)


# ---------------------------------------------------------------------------
# wide CSV serialization (NA marks unobserved cells)
# ---------------------------------------------------------------------------


def write_wide_csv(tri: ReportingTriangle, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["time_index"] + [f"d{d}" for d in range(1, tri.n_delays + 1)])
        for t in range(tri.n_times):
            row: list = [t + 1]
            for d in range(tri.n_delays):
                row.append(int(tri.cells[t, d]) if tri.observed_mask[t, d] else NA_TOKEN)
            writer.writerow(row)


def read_wide_csv(path, series_id: str | None = None, remainder_collapsed: bool = False) -> ReportingTriangle:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("no records: file is empty") from None
        n_delays = len(header) - 1
        if n_delays < 1 or header[0] != "time_index":
            raise ParseError("wide CSV must have a time_index column followed by delay columns")
        rows: dict[int, tuple[list[int], list[bool]]] = {}
        for row in reader:
            line_no = reader.line_num
            if len(row) != n_delays + 1:
                raise ParseError(f"line {line_no}: expected {n_delays + 1} fields")
            t = _parse_int(row[0], "time_index", line_no)
            values, mask = [], []
            for token in row[1:]:
                if token.strip() == NA_TOKEN:
                    values.append(0)
                    mask.append(False)
                else:
                    count = _parse_int(token, "count", line_no)
                    if count < 0:
                        raise ParseError(f"line {line_no}: negative count {count}")
                    values.append(count)
                    mask.append(True)
            rows[t] = (values, mask)
    if not rows:
        raise ParseError("no records")
    n_times = max(rows)
    cells = np.zeros((n_times, n_delays), dtype=np.int64)
    mask = np.zeros((n_times, n_delays), dtype=bool)
    for t, (values, row_mask) in rows.items():
        cells[t - 1] = values
        mask[t - 1] = row_mask
    return ReportingTriangle(
        cells=cells, observed_mask=mask, series_id=series_id,
        remainder_collapsed=remainder_collapsed,
    )


# ---------------------------------------------------------------------------
# remainder collapse and horizon selection
# ---------------------------------------------------------------------------


def collapse_remainder(raw: ReportingTriangle, spec: CensoringSpec) -> ReportingTriangle:
    """Collapse delays beyond D into one remainder column z[., D+1].

    The remainder column is observed only when every constituent raw cell is
    observed (vacuously true when D equals the raw maturity, in which case the
    appended remainder is structurally zero). The result keeps the per-row
    prefix property but the literal staircase formula no longer applies to the
    remainder column.
    """
    d_horizon = spec.delay_horizon
    if d_horizon > raw.n_delays:
        raise ConfigError(
            f"delay_horizon {d_horizon} exceeds the raw triangle's maturity {raw.n_delays}"
        )
    head = raw.cells[:, :d_horizon]
    head_mask = raw.observed_mask[:, :d_horizon]
    tail = raw.cells[:, d_horizon:]
    tail_mask = raw.observed_mask[:, d_horizon:]
    remainder = np.where(tail_mask, tail, 0).sum(axis=1)
    remainder_observed = tail_mask.all(axis=1)
    cells = np.concatenate([head, remainder[:, None]], axis=1)
    mask = np.concatenate([head_mask, remainder_observed[:, None]], axis=1)
    # a latent remainder is a zero placeholder, not a partial sum
    cells[:, -1] = np.where(mask[:, -1], cells[:, -1], 0)
    return ReportingTriangle(
        cells=cells, observed_mask=mask, series_id=raw.series_id, remainder_collapsed=True
    )


def cumulative_proportion_quantiles(tri: ReportingTriangle, probs) -> np.ndarray:
    """Empirical quantiles, over fully observed rows, of the share of y_t
    covered by the first d delay cells; entry (d, q) for each delay and level.

    Rows with y_t = 0 are excluded (the proportion is undefined there).
    """
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    if np.any((probs <= 0.0) | (probs >= 1.0)):
        raise ConfigError("quantile levels must lie strictly inside (0, 1)")
    full = tri.totals_observed
    if not np.any(full):
        raise ConfigError("no fully observed rows")
    cells = tri.cells[full]
    totals = cells.sum(axis=1)
    keep = totals > 0
    if not np.any(keep):
        raise ConfigError("all totals are zero in the fully observed rows")
    cells = cells[keep]
    totals = totals[keep]
    cumprop = np.cumsum(cells, axis=1) / totals[:, None]
    out = np.empty((tri.n_delays, probs.size), dtype=float)
    for d in range(tri.n_delays):
        out[d] = empirical_quantile(cumprop[:, d], probs)
    return out


@dataclass(frozen=True)
class HorizonSelection:
    """Chosen delay horizon, whether the threshold was actually reached, and
    the per-delay quantile curve used to decide."""

    delay_horizon: int
    reached: bool
    curve: np.ndarray = field(repr=False)


def select_delay_horizon(tri: ReportingTriangle, threshold: float, quantile: float) -> HorizonSelection:
    """Smallest d whose cumulative-proportion quantile reaches the threshold.

    Falls back to the triangle's maturity (with a warning) when the threshold
    is never reached.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie strictly inside (0, 1)")
    curve = cumulative_proportion_quantiles(tri, [quantile])[:, 0]
    reached = curve >= threshold
    if np.any(reached):
        return HorizonSelection(int(np.argmax(reached)) + 1, True, curve)
    warnings.warn(
        f"cumulative proportion quantile never reaches {threshold}; "
        f"falling back to maturity {tri.n_delays}",
        stacklevel=2,
    )
    return HorizonSelection(tri.n_delays, False, curve)
