"""Raw sensor series refinement: smoothing, resampling, alignment, windowing.

The refinement chain runs SMA -> HP trend -> uniform linear resampling on each
sensor independently; the two refined streams are then cut to their common
time range and turned into fixed-length windows.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np
from scipy.linalg import solveh_banded

DEFAULT_INTERVAL_S = 15.0
DEFAULT_SMA_K = 4
DEFAULT_LAMBDA_HP = 1600.0


class CsvParseError(ValueError):
    """A CSV row could not be parsed; ``line`` is 1-based."""

    def __init__(self, path, line: int, msg: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


@dataclass(frozen=True, eq=False)
class RawSeries:
    timestamps: np.ndarray  # int64 epoch ms, non-decreasing
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vs = np.asarray(self.values, dtype=np.float64)
        if ts.ndim != 1 or vs.ndim != 1 or ts.shape != vs.shape:
            raise ValueError("timestamps and values must be 1-d arrays of equal length")
        if ts.size < 1:
            raise ValueError("a raw series needs at least one point")
        if np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be sorted non-decreasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True, eq=False)
class RefinedSeries:
    start_time: int  # epoch ms
    interval: float  # seconds
    values: np.ndarray

    def __post_init__(self):
        vs = np.asarray(self.values, dtype=np.float64)
        if vs.ndim != 1:
            raise ValueError("values must be 1-d")
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if not np.all(np.isfinite(vs)):
            raise ValueError("refined values must be finite")
        object.__setattr__(self, "start_time", int(self.start_time))
        object.__setattr__(self, "interval", float(self.interval))
        object.__setattr__(self, "values", vs)

    def __len__(self):
        return self.values.size

    @property
    def interval_ms(self) -> float:
        return self.interval * 1000.0

    @property
    def times(self) -> np.ndarray:
        """Grid timestamps in epoch ms (float)."""
        return self.start_time + np.arange(len(self)) * self.interval_ms


@dataclass(frozen=True, eq=False)
class SensorPairDataset:
    x: RefinedSeries
    y: RefinedSeries

    def __post_init__(self):
        if (self.x.start_time != self.y.start_time
                or self.x.interval != self.y.interval
                or len(self.x) != len(self.y)):
            raise ValueError("x and y must share start_time, interval and length")

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class WindowView:
    values: np.ndarray
    target_index: int


@dataclass(frozen=True, eq=False)
class WindowSet:
    """All windows of a dataset as arrays.

    ``values[k]`` holds ``x[i-n+1..i]`` for ``i = target_index[k]``; ``targets[k]``
    is ``y[i]``. Iterating yields ``(WindowView, target)`` pairs.
    """

    values: np.ndarray  # (M, n)
    targets: np.ndarray  # (M,)
    target_index: np.ndarray  # (M,)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def __iter__(self) -> Iterator[tuple[WindowView, float]]:
        for k in range(len(self)):
            yield WindowView(self.values[k], int(self.target_index[k])), float(self.targets[k])

    def subset(self, mask_or_idx) -> "WindowSet":
        return WindowSet(self.values[mask_or_idx], self.targets[mask_or_idx],
                         self.target_index[mask_or_idx])


Series = Union[RawSeries, RefinedSeries]


def sma_filter(series: Series, k: int) -> Series:
    """Trailing simple moving average; the first ``k-1`` outputs average fewer points."""
    v = series.values
    if k < 1 or v.size == 0:
        raise ValueError("sma window k must be >= 1 on a non-empty series")
    if k > v.size:
        raise ValueError(f"sma window k={k} exceeds series length {v.size}")
    csum = np.concatenate(([0.0], np.cumsum(v)))
    idx = np.arange(v.size)
    lo = np.maximum(0, idx - k + 1)
    out = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    return dataclasses.replace(series, values=out)


def _hp_banded(n: int, lam: float) -> np.ndarray:
    """Upper banded storage of ``I + lam * D'D`` for ``solveh_banded``."""
    m = n - 2  # rows of the second-difference operator D
    d0 = np.zeros(n)
    d1 = np.zeros(n - 1)
    d0[:m] += 1.0
    d0[1:m + 1] += 4.0
    d0[2:] += 1.0
    d1[:m] -= 2.0
    d1[1:] -= 2.0
    ab = np.zeros((3, n))
    ab[2] = 1.0 + lam * d0
    ab[1, 1:] = lam * d1
    ab[0, 2:] = lam
    return ab


def hp_filter(series: Series, lambda_hp: float = DEFAULT_LAMBDA_HP) -> Series:
    """Hodrick-Prescott trend via a banded Cholesky solve of ``(I + lam D'D) tau = y``."""
    v = series.values
    if v.size < 3:
        raise ValueError("hp filter needs at least 3 points")
    if not lambda_hp > 0:
        raise ValueError("lambda_hp must be positive")
    trend = solveh_banded(_hp_banded(v.size, float(lambda_hp)), v, lower=False)
    return dataclasses.replace(series, values=trend)


def resample_linear(series: RawSeries, interval_s: float = DEFAULT_INTERVAL_S,
                    origin_ms: float | None = None) -> RefinedSeries:
    """Linearly interpolate a raw series onto a uniform grid.

    The grid is ``origin_ms + k * interval`` restricted to the raw time span;
    ``origin_ms`` defaults to the first raw timestamp.
    """
    if len(series) < 2:
        raise ValueError("resampling needs at least 2 raw points")
    if not interval_s > 0:
        raise ValueError("interval must be positive")
    ts = series.timestamps
    step = interval_s * 1000.0
    t0, t1 = float(ts[0]), float(ts[-1])
    if t1 - t0 < step:
        raise ValueError("raw timestamps span less than one interval")
    origin = t0 if origin_ms is None else float(origin_ms)
    k0 = math.ceil((t0 - origin) / step - 1e-9)
    k1 = math.floor((t1 - origin) / step + 1e-9)
    if k1 < k0:
        raise ValueError("no grid point falls inside the raw time span")
    grid = origin + np.arange(k0, k1 + 1) * step
    start = origin + k0 * step
    if start != int(start):
        raise ValueError("grid start must land on an integer millisecond")
    vals = np.interp(grid, ts.astype(np.float64), series.values)
    return RefinedSeries(int(start), interval_s, vals)


def align_pair(x: RefinedSeries, y: RefinedSeries) -> SensorPairDataset:
    """Truncate both series to their common time range."""
    if x.interval != y.interval:
        raise ValueError("series must share the same interval")
    step = x.interval_ms
    offset = (y.start_time - x.start_time) / step
    if abs(offset - round(offset)) > 1e-9:
        raise ValueError("series grids are not on a common lattice")
    start = max(x.start_time, y.start_time)
    end = min(x.times[-1], y.times[-1])
    if end < start:
        raise ValueError("series do not overlap in time")
    count = int(round((end - start) / step)) + 1
    ix = int(round((start - x.start_time) / step))
    iy = int(round((start - y.start_time) / step))
    return SensorPairDataset(
        RefinedSeries(start, x.interval, x.values[ix:ix + count]),
        RefinedSeries(start, y.interval, y.values[iy:iy + count]),
    )


def refine_series(raw: RawSeries, interval_s: float = DEFAULT_INTERVAL_S,
                  sma_k: int = DEFAULT_SMA_K, lambda_hp: float = DEFAULT_LAMBDA_HP,
                  origin_ms: float | None = None) -> RefinedSeries:
    smoothed = sma_filter(raw, min(sma_k, len(raw)))
    if len(raw) >= 3:
        smoothed = hp_filter(smoothed, lambda_hp)
    return resample_linear(smoothed, interval_s, origin_ms=origin_ms)


def refine_pair(raw_x: RawSeries, raw_y: RawSeries, interval_s: float = DEFAULT_INTERVAL_S,
                sma_k: int = DEFAULT_SMA_K, lambda_hp: float = DEFAULT_LAMBDA_HP) -> SensorPairDataset:
    """Full refinement of a sensor pair onto a shared grid anchored at the later start."""
    origin = float(max(raw_x.timestamps[0], raw_y.timestamps[0]))
    rx = refine_series(raw_x, interval_s, sma_k, lambda_hp, origin_ms=origin)
    ry = refine_series(raw_y, interval_s, sma_k, lambda_hp, origin_ms=origin)
    return align_pair(rx, ry)


def make_windows(ds: SensorPairDataset, n: int) -> WindowSet:
    """One window per target index ``i`` in ``[n-1, len)``, holding ``x[i-n+1..i]``."""
    length = len(ds)
    if n < 1:
        raise ValueError("window size must be positive")
    if n > length:
        raise ValueError(f"window size {n} exceeds dataset length {length}")
    xs = ds.x.values
    values = np.lib.stride_tricks.sliding_window_view(xs, n).copy()
    idx = np.arange(n - 1, length)
    return WindowSet(values, ds.y.values[idx].copy(), idx)


# -- CSV formats ---------------------------------------------------------------

RAW_HEADER = "timestamp_ms,value"
PAIR_HEADER = "t_index,x,y"


def load_csv(path) -> RawSeries:
    """Read a raw ``timestamp_ms,value`` CSV (header optional)."""
    ts, vs = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and line.replace(" ", "") == RAW_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise CsvParseError(path, lineno, f"expected 2 fields, got {len(parts)}")
            try:
                t = int(parts[0])
                v = float(parts[1])
            except ValueError:
                raise CsvParseError(path, lineno, f"non-numeric field in {line!r}") from None
            if not math.isfinite(v):
                raise CsvParseError(path, lineno, "non-finite value")
            if ts and t < ts[-1]:
                raise CsvParseError(path, lineno, "timestamps are not sorted")
            ts.append(t)
            vs.append(v)
    if not ts:
        raise CsvParseError(path, 1, "no data rows")
    return RawSeries(np.array(ts, dtype=np.int64), np.array(vs))


def save_raw_csv(series: RawSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RAW_HEADER + "\n")
        for t, v in zip(series.timestamps.tolist(), series.values.tolist()):
            fh.write(f"{t},{v!r}\n")


def save_refined_csv(ds: SensorPairDataset, path, provenance: str | None = None) -> None:
    """Write the refined-pair CSV; ``provenance`` becomes an extra comment line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# start_ms={ds.x.start_time} interval_s={ds.x.interval!r}\n")
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write(PAIR_HEADER + "\n")
        for i, (a, b) in enumerate(zip(ds.x.values.tolist(), ds.y.values.tolist())):
            fh.write(f"{i},{a!r},{b!r}\n")


def load_refined_csv(path) -> SensorPairDataset:
    start = interval = None
    xs, ys = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if lineno == 1:
                    try:
                        fields = dict(tok.split("=", 1) for tok in line[1:].split())
                        start = int(fields["start_ms"])
                        interval = float(fields["interval_s"])
                    except (KeyError, ValueError):
                        raise CsvParseError(path, lineno, "bad start_ms/interval_s comment") from None
                continue
            if line.replace(" ", "") == PAIR_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CsvParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                i = int(parts[0])
                a, b = float(parts[1]), float(parts[2])
            except ValueError:
                raise CsvParseError(path, lineno, f"non-numeric field in {line!r}") from None
            if i != len(xs):
                raise CsvParseError(path, lineno, f"expected t_index {len(xs)}, got {i}")
            xs.append(a)
            ys.append(b)
    if start is None:
        raise CsvParseError(path, 1, "missing '# start_ms=... interval_s=...' first line")
    if not xs:
        raise CsvParseError(path, 1, "no data rows")
    return SensorPairDataset(RefinedSeries(start, interval, np.array(xs)),
                             RefinedSeries(start, interval, np.array(ys)))
