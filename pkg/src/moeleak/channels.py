"""Forward models of the side channels.

Every simulator takes ground truth (schedules or footprints), a
:class:`NoiseModel` and a seed or ``numpy.random.Generator`` and returns a raw
trace. Units are abstract: time in cost-model units, latencies in "cycles"
with hits near 100 and misses near 400.

Cache occupancy timeline of one MoE layer (L2 level shown)::

    high |‾‾‾‾‾‾‾‾‾‾|   |‾‾‾‾‾‾‾‾|   |‾‾‾‾‾‾‾‾‾
    low  |   lead  up gate|down|up gate|down| tail
              ^   ^    ^    ^  ^
              L1 peaks at every linear-layer start

The lead-in and tail (attention, router, output merge) occupy the cache like
the wide up/gate projections, so each expert contributes exactly two level
changes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .moe import ExpertFootprint, LayerSchedule, ModelConfig, ScheduleEntry

CONTENTION_LEVELS = (0, 1, 2, 3, 4)

# Per-level label flip probabilities, fitted by demos/calibrate_contention.py
# so that downstream sequence accuracy on the lite-shape preset tracks the
# measured accuracy under 0..4 concurrent workloads. Levels 3 and 4 share a
# value because the measured accuracy saturates there.
RELOAD_FLIP_BY_LEVEL = (0.00042, 0.00545, 0.01103, 0.01306, 0.01306)
TLB_FLIP_BY_LEVEL = (0.02098, 0.1387, 0.23874, 0.39552, 0.39552)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class IcacheNoise:
    sample_period: float = 5.0
    baseline_mean: float = 100.0
    baseline_sd: float = 3.0
    peak_height: float = 40.0
    peak_miss_prob: float = 0.02


@dataclass(frozen=True)
class L2Noise:
    level_high: float = 150.0
    level_low: float = 110.0
    level_sd: float = 5.0


@dataclass(frozen=True)
class TimingNoise:
    # per-token processing time varies independently, so a phase serving
    # n tokens gains N(0, per_token_sd**2 * n) time units
    per_token_sd: float = 3.15


@dataclass(frozen=True)
class ProbeNoise:
    hit_mean: float = 100.0
    hit_sd: float = 20.0
    miss_mean: float = 400.0
    miss_sd: float = 20.0
    flip_prob: float = 0.0


@dataclass(frozen=True)
class ThreadNoise:
    per_token_threads: int = 128
    count_jitter_sd: float = 80.0


@dataclass(frozen=True)
class NoiseModel:
    icache: IcacheNoise = field(default_factory=IcacheNoise)
    l2: L2Noise = field(default_factory=L2Noise)
    timing: TimingNoise = field(default_factory=TimingNoise)
    reload: ProbeNoise = field(default_factory=lambda: ProbeNoise(flip_prob=RELOAD_FLIP_BY_LEVEL[0]))
    threads: ThreadNoise = field(default_factory=ThreadNoise)
    tlb: ProbeNoise = field(default_factory=lambda: ProbeNoise(flip_prob=TLB_FLIP_BY_LEVEL[0]))
    contention_level: int = 0

    def __post_init__(self):
        for name in ("reload", "tlb"):
            p = getattr(self, name)
            if not p.miss_mean > p.hit_mean:
                raise ValueError(f"{name}: miss_mean must exceed hit_mean")
            if not 0.0 <= p.flip_prob <= 1.0:
                raise ValueError(f"{name}: flip_prob must be a probability")
        if not 0.0 <= self.icache.peak_miss_prob <= 1.0:
            raise ValueError("peak_miss_prob must be a probability")
        if self.icache.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        if self.contention_level not in CONTENTION_LEVELS:
            raise ValueError(f"contention level must be one of {CONTENTION_LEVELS}")

    @classmethod
    def default(cls) -> "NoiseModel":
        return cls()

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        """Zero-noise model: unit sampling period and deterministic readings."""
        return cls(
            icache=IcacheNoise(sample_period=1.0, baseline_sd=0.0, peak_miss_prob=0.0),
            l2=L2Noise(level_sd=0.0),
            timing=TimingNoise(per_token_sd=0.0),
            reload=ProbeNoise(hit_sd=0.0, miss_sd=0.0, flip_prob=0.0),
            threads=ThreadNoise(count_jitter_sd=0.0),
            tlb=ProbeNoise(hit_sd=0.0, miss_sd=0.0, flip_prob=0.0),
        )

    def at_contention(self, level: int) -> "NoiseModel":
        """Same model with probe flip rates taken from the contention table."""
        if level not in CONTENTION_LEVELS:
            raise ValueError(f"contention level must be one of {CONTENTION_LEVELS}")
        return replace(
            self,
            reload=replace(self.reload, flip_prob=RELOAD_FLIP_BY_LEVEL[level]),
            tlb=replace(self.tlb, flip_prob=TLB_FLIP_BY_LEVEL[level]),
            contention_level=level,
        )

    @classmethod
    def for_contention(cls, level: int) -> "NoiseModel":
        return cls().at_contention(level)


# -- traces ------------------------------------------------------------------


@dataclass
class CacheTrace:
    l1: np.ndarray | None
    l2: np.ndarray | None
    sample_period: float

    def __post_init__(self):
        lens = {len(x) for x in (self.l1, self.l2) if x is not None}
        if len(lens) > 1:
            raise ValueError("l1 and l2 must share one time base")
        if lens and 0 in lens:
            raise ValueError("empty cache trace")


@dataclass
class ReloadTrace:
    latencies: np.ndarray  # (T, L, M); T = 1 for a prefill sweep


@dataclass
class ThreadTrace:
    counts: np.ndarray  # (L, M) int, 0 where the expert kernel never launched
    per_token_threads: int


@dataclass
class TlbTrace:
    latencies: np.ndarray  # (T, L, M + 1)


# -- schedules -----------------------------------------------------------------


def schedule_from_load(load, config: ModelConfig) -> list[LayerSchedule]:
    """Sequential expert loop implied by a load footprint."""
    load = np.asarray(load, dtype=np.int64)
    out = []
    for row in load:
        sched = []
        for i in np.flatnonzero(row):
            d = config.base_cost + int(row[i]) * config.per_token_cost
            sched.append(ScheduleEntry(int(i), int(row[i]), (d, d, d)))
        out.append(sched)
    return out


def _margin(period: float) -> float:
    # lead-in and tail long enough for a few clean samples at the high level
    return 6.0 * period


def _layer_cache_trace(sched: LayerSchedule, noise: NoiseModel, rng: np.random.Generator) -> CacheTrace:
    ic, l2 = noise.icache, noise.l2
    period = float(ic.sample_period)
    dur = np.array([e.durations for e in sched], dtype=np.float64).reshape(-1)
    if noise.timing.per_token_sd > 0 and dur.size:
        n_tok = np.repeat([e.token_count for e in sched], 3)
        dur = np.maximum(dur + noise.timing.per_token_sd * np.sqrt(n_tok) * rng.standard_normal(dur.size), 1.0)
    margin = _margin(period)
    starts = margin + np.concatenate([[0.0], np.cumsum(dur)[:-1]]) if dur.size else np.zeros(0)
    loop_end = margin + dur.sum()
    total = loop_end + margin
    n = int(np.ceil(total / period - 1e-9))
    edges = np.arange(n + 1) * period

    # time spent at the low level inside each sample window
    low_a = starts[2::3]
    low_b = low_a + dur[2::3]
    if low_a.size:
        # cumulative low time is piecewise linear: slope 1 inside down phases
        cum = np.concatenate([[0.0], np.cumsum(low_b - low_a)])
        knots_x = np.column_stack([low_a, low_b]).ravel()
        knots_y = np.column_stack([cum[:-1], cum[1:]]).ravel()
        frac_low = np.diff(np.interp(edges, knots_x, knots_y)) / period
    else:
        frac_low = np.zeros(n)
    level = l2.level_high + frac_low * (l2.level_low - l2.level_high)
    if l2.level_sd > 0:
        level = level + rng.normal(0.0, l2.level_sd, n)

    l1 = np.full(n, ic.baseline_mean)
    if ic.baseline_sd > 0:
        l1 = l1 + rng.normal(0.0, ic.baseline_sd, n)
    keep = rng.random(starts.size) >= ic.peak_miss_prob if ic.peak_miss_prob > 0 else np.ones(starts.size, bool)
    idx = np.unique(np.floor(starts[keep] / period + 1e-9).astype(np.int64))
    l1[idx] += ic.peak_height
    return CacheTrace(l1=l1, l2=level, sample_period=period)


def simulate_cache(schedules, noise: NoiseModel, rng=None) -> list[CacheTrace]:
    """Joint L1 I-cache and L2 occupancy traces, one per layer, on one time base."""
    rng = _rng(rng)
    return [_layer_cache_trace(s, noise, rng) for s in schedules]


def simulate_l1_icache(schedules, noise: NoiseModel, rng=None) -> list[CacheTrace]:
    return [CacheTrace(t.l1, None, t.sample_period) for t in simulate_cache(schedules, noise, rng)]


def simulate_l2(schedules, noise: NoiseModel, rng=None) -> list[CacheTrace]:
    return [CacheTrace(None, t.l2, t.sample_period) for t in simulate_cache(schedules, noise, rng)]


# -- probe channels --------------------------------------------------------------


def _draw_latency(hit, p: ProbeNoise, rng: np.random.Generator):
    hit = np.asarray(hit, dtype=bool)
    if p.flip_prob > 0:
        hit = hit ^ (rng.random(hit.shape) < p.flip_prob)
    mean = np.where(hit, p.hit_mean, p.miss_mean)
    sd = np.where(hit, p.hit_sd, p.miss_sd)
    lat = mean + sd * rng.standard_normal(hit.shape)
    return np.maximum(lat, 1.0)


def _active_masks(footprint) -> np.ndarray:
    """(T, L, M) activity from a sequence footprint, or (1, L, M) from loads."""
    if isinstance(footprint, ExpertFootprint):
        if footprint.kind == "load":
            return (footprint.load > 0)[None]
        return footprint.sequences.astype(bool)
    arr = np.asarray(footprint)
    if arr.ndim == 2:
        return (arr > 0)[None]
    return arr.astype(bool)


def simulate_pageout_reload(footprint, noise: NoiseModel, rng=None, mode: str = "layer") -> ReloadTrace:
    """Reload latencies of every expert's first page.

    ``mode="layer"`` probes after every layer, giving (T, L, M). ``mode="step"``
    probes once per decode step on pages shared by expert index across
    layers, so the result is the union over layers with shape (T, 1, M).
    """
    rng = _rng(rng)
    act = _active_masks(footprint)
    if mode == "step":
        act = act.any(axis=1, keepdims=True)
    elif mode != "layer":
        raise ValueError("mode must be 'layer' or 'step'")
    return ReloadTrace(_draw_latency(act, noise.reload, rng))


def simulate_perf_counter(footprint, noise: NoiseModel, rng=None) -> ThreadTrace:
    """Thread count of the once-per-expert activation kernel."""
    rng = _rng(rng)
    load = footprint.load if isinstance(footprint, ExpertFootprint) else np.asarray(footprint)
    load = np.asarray(load, dtype=np.int64)
    t = noise.threads
    counts = t.per_token_threads * load
    if t.count_jitter_sd > 0:
        counts = counts + np.rint(rng.normal(0.0, t.count_jitter_sd, load.shape)).astype(np.int64)
    # a launched kernel has at least one thread; skipped experts launch none
    counts = np.where(load > 0, np.maximum(counts, 1), 0)
    return ThreadTrace(counts.astype(np.int64), t.per_token_threads)


def tlb_block_hits(active) -> np.ndarray:
    """Noiseless block hits (..., M + 1) for activity masks (..., M)."""
    act = np.asarray(active, dtype=bool)
    m = act.shape[-1]
    hits = np.zeros(act.shape[:-1] + (m + 1,), dtype=bool)
    hits[..., :m] |= act
    hits[..., 1:] |= act
    hits[..., 0] = True
    hits[..., m] = True
    return hits


def simulate_tlb(footprint, noise: NoiseModel, rng=None, num_experts: int | None = None) -> TlbTrace:
    """Evict+Reload latencies of the M + 1 TLB entry blocks covering expert weights.

    Expert i spans blocks i and i + 1; blocks 0 and M are shared with
    always-running code and always hit.
    """
    rng = _rng(rng)
    act = _active_masks(footprint)
    if num_experts is not None and act.shape[-1] != num_experts:
        raise ValueError(f"footprint has {act.shape[-1]} experts, block layout expects {num_experts}")
    return TlbTrace(_draw_latency(tlb_block_hits(act), noise.tlb, rng))
