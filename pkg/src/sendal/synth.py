"""Seeded synthetic sensor pairs: a mean-reverting baseline with decaying bursts.

Random numbers come from numpy's PCG64 bit generator (``np.random.default_rng``)
seeded with ``[seed, stream]``; stream 0 drives the ground truth and stream 1 the
low-cost distortion, so the two can be regenerated independently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .refine import RawSeries, SensorPairDataset, refine_pair, save_raw_csv


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 48 * 3600.0
    base_interval_s: float = 15.0
    start_ms: int = 0
    # ground truth: Ornstein-Uhlenbeck baseline
    baseline_level: float = 10.0
    reversion_per_h: float = 0.5
    baseline_sigma: float = 2.0  # stationary standard deviation
    # bursts: Poisson arrivals, instant rise, exponential decay
    event_rate_per_h: float = 0.2
    event_mag_min: float = 20.0
    event_mag_max: float = 80.0
    event_decay_s: float = 900.0
    # low-cost channel: saturating gain, offset, lag, noise, irregular sampling
    gain: float = 0.15
    offset: float = 0.3
    saturation: float = float("inf")
    lag_s: float = 30.0
    noise_sigma: float = 0.3
    jitter: float = 0.2  # fraction of the interval
    dropout: float = 0.05

    def __post_init__(self):
        positive = ("duration_s", "base_interval_s", "reversion_per_h", "event_decay_s", "saturation")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("baseline_sigma", "event_rate_per_h", "noise_sigma", "lag_s", "event_mag_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.event_mag_max < self.event_mag_min:
            raise ValueError("event_mag_max must be >= event_mag_min")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


PROFILES = {
    # moderate activity
    "env-a": SynthConfig(event_rate_per_h=0.2, noise_sigma=0.3),
    # bursty: frequent, sharp events and a saturating low-cost response
    "env-b": SynthConfig(event_rate_per_h=1.0, event_mag_min=20.0, event_mag_max=120.0,
                         event_decay_s=600.0, noise_sigma=0.4, saturation=80.0),
    # near-constant air, rare events
    "env-c": SynthConfig(event_rate_per_h=0.05, noise_sigma=0.2),
}


def profile(name: str, seed: int = 0, **overrides) -> SynthConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name].replace(seed=seed, **overrides)


@dataclass(frozen=True, eq=False)
class SynthPair:
    truth: RawSeries
    lowcost: RawSeries
    event_log: list[tuple[int, float]]  # (start epoch ms, magnitude)


def _grid(config: SynthConfig) -> np.ndarray:
    count = int(config.duration_s // config.base_interval_s)
    step = int(round(config.base_interval_s * 1000))
    return config.start_ms + np.arange(count, dtype=np.int64) * step


def event_component(times_ms: np.ndarray, event_log, decay_s: float) -> np.ndarray:
    """Sum of the decaying burst contributions at ``times_ms``."""
    t = np.asarray(times_ms, dtype=np.float64)
    out = np.zeros_like(t)
    for start, mag in event_log:
        active = t >= start
        out[active] += mag * np.exp(-(t[active] - start) / (decay_s * 1000.0))
    return out


def gen_truth(config: SynthConfig) -> tuple[RawSeries, list[tuple[int, float]]]:
    rng = np.random.default_rng([config.seed, 0])
    ts = _grid(config)
    n = ts.size
    dt_h = config.base_interval_s / 3600.0
    rho = np.exp(-config.reversion_per_h * dt_h)
    shock = config.baseline_sigma * np.sqrt(1.0 - rho * rho)
    noise = rng.standard_normal(n)
    base = np.empty(n)
    dev = 0.0
    for k in range(n):
        base[k] = config.baseline_level + dev
        dev = rho * dev + shock * noise[k]
    n_events = rng.poisson(config.event_rate_per_h * config.duration_s / 3600.0)
    starts = np.sort(rng.uniform(0.0, config.duration_s * 1000.0, n_events))
    mags = rng.uniform(config.event_mag_min, config.event_mag_max, n_events)
    events = [(int(config.start_ms + s), float(m)) for s, m in zip(starts, mags)]
    values = np.maximum(base + event_component(ts, events, config.event_decay_s), 0.0)
    return RawSeries(ts, values), events


def gen_lowcost(truth: RawSeries, config: SynthConfig) -> RawSeries:
    """Distorted, noisy, jittered and thinned reading of ``truth``."""
    rng = np.random.default_rng([config.seed, 1])
    n = len(truth)
    step = config.base_interval_s * 1000.0
    jitter = rng.uniform(-0.5, 0.5, n) * config.jitter * step
    ts = np.round(truth.timestamps + jitter).astype(np.int64)
    keep = rng.random(n) >= config.dropout
    noise = rng.standard_normal(n) * config.noise_sigma
    if keep.sum() < 2:
        keep[[0, -1]] = True
    lagged = np.interp(ts - config.lag_s * 1000.0, truth.timestamps.astype(np.float64), truth.values)
    if np.isfinite(config.saturation):
        lagged = lagged / (1.0 + lagged / config.saturation)
    values = np.maximum(config.gain * lagged + config.offset + noise, 0.0)
    return RawSeries(ts[keep], values[keep])


def gen_pair(config: SynthConfig) -> SynthPair:
    truth, events = gen_truth(config)
    return SynthPair(truth, gen_lowcost(truth, config), events)


def stable_fraction(pair: SynthPair, config: SynthConfig, threshold: float | None = None) -> float:
    """Share of the truth grid where burst contributions stay below ``threshold``.

    The default threshold is the baseline's stationary standard deviation.
    """
    thr = config.baseline_sigma if threshold is None else threshold
    ev = event_component(pair.truth.timestamps, pair.event_log, config.event_decay_s)
    return float(np.mean(ev < thr))


def gen_dataset(config: SynthConfig, out_dir=None, **refine_kw) -> tuple[SensorPairDataset, SynthPair]:
    """Generate a pair, refine it, and optionally write ``raw_x.csv`` / ``raw_y.csv``."""
    pair = gen_pair(config)
    ds = refine_pair(pair.lowcost, pair.truth, interval_s=config.base_interval_s, **refine_kw)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_raw_csv(pair.lowcost, out / "raw_x.csv")
        save_raw_csv(pair.truth, out / "raw_y.csv")
    return ds, pair
