"""Recover execution footprints from raw side-channel traces."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channels import CacheTrace, ReloadTrace, ThreadTrace, TlbTrace
from .moe import ModelConfig

COST_MODEL = "l2-mean"
# above this many live candidates the PELT step switches to numpy
_VECTOR_CUTOFF = 48


@dataclass(frozen=True)
class Changepoints:
    indices: np.ndarray  # first sample of each new segment
    penalty: float
    cost: str = COST_MODEL

    def segments(self, n: int) -> list[tuple[int, int]]:
        bounds = [0, *self.indices.tolist(), n]
        return list(zip(bounds[:-1], bounds[1:]))


@dataclass
class LoadEstimate:
    proportions: np.ndarray           # (L, M), rows sum to 1
    counts: np.ndarray | None = None  # (L, M) ints when the token budget is known
    flags: list[str] = field(default_factory=list)  # one note per layer, "" when clean


@dataclass
class SequenceEstimate:
    mask: np.ndarray        # (T, L, M) uint8
    confidence: np.ndarray  # (T, L, M) in [0, 1]
    evidence: np.ndarray    # (T, L, M) bool, experts the raw trace implicates
    degenerate: np.ndarray  # (T, L) bool


# -- changepoints --------------------------------------------------------------


def mad_sigma(x) -> float:
    """Noise scale from the median absolute deviation of first differences."""
    d = np.diff(np.asarray(x, dtype=np.float64))
    if d.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / np.sqrt(2.0))


def default_penalty(x) -> float:
    """BIC-style penalty 2 * sigma^2 * log(n), floored for noiseless series."""
    x = np.asarray(x, dtype=np.float64)
    n = max(len(x), 2)
    beta = 2.0 * mad_sigma(x) ** 2 * np.log(n)
    floor = 1e-6 * max(1.0, float(np.mean((x - x.mean()) ** 2)))
    return max(beta, floor)


def pelt(series, penalty: float | None = None) -> Changepoints:
    """Exact penalised least-squares segmentation with PELT pruning.

    Minimises the sum of within-segment squared deviations from the segment
    mean plus ``penalty`` per changepoint. Among equal-cost solutions the one
    with the earliest last changepoint wins, recursively.
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("pelt needs at least 2 samples")
    beta = default_penalty(x) if penalty is None else float(penalty)
    if beta < 0:
        raise ValueError("penalty must be non-negative")
    x = x - x.mean()  # keeps the prefix sums well conditioned
    s1a = np.concatenate([[0.0], np.cumsum(x)])
    s2a = np.concatenate([[0.0], np.cumsum(x * x)])
    s1, s2 = s1a.tolist(), s2a.tolist()
    f = [0.0] * (n + 1)
    f[0] = -beta
    fa = np.array(f)
    last = [0] * (n + 1)
    cands = [0]
    for t in range(1, n + 1):
        a1, a2 = s1[t], s2[t]
        if len(cands) > _VECTOR_CUTOFF:
            c = np.asarray(cands)
            d = a1 - s1a[c]
            bases = (fa[c] + (a2 - s2a[c]) - d * d / (t - c)).tolist()
        else:
            bases = []
            for c in cands:
                d = a1 - s1[c]
                bases.append(f[c] + (a2 - s2[c]) - d * d / (t - c))
        j = min(range(len(bases)), key=bases.__getitem__)
        ft = bases[j] + beta
        f[t] = fa[t] = ft
        last[t] = cands[j]
        # a candidate that cannot beat f[t] now never will (cost is superadditive)
        cands = [c for c, v in zip(cands, bases) if v <= ft]
        cands.append(t)
    cps = []
    t = n
    while t > 0:
        t = last[t]
        if t > 0:
            cps.append(t)
    return Changepoints(np.array(cps[::-1], dtype=np.int64), beta)


def segment_means(x, cps: Changepoints) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.array([x[a:b].mean() for a, b in cps.segments(len(x))])


# -- clustering -------------------------------------------------------------------


def two_means(x, iters: int = 50):
    """1-D 2-means along the last axis, initialised at the min and max.

    Returns ``(low_mask, low_center, high_center)``. Rows whose values are all
    equal put everything in the low cluster with equal centers.
    """
    x = np.asarray(x, dtype=np.float64)
    c0 = x.min(axis=-1, keepdims=True)
    c1 = x.max(axis=-1, keepdims=True)
    low = x <= c0
    for _ in range(iters):
        low = (x - c0) <= (c1 - x)
        n0 = low.sum(axis=-1, keepdims=True)
        n1 = x.shape[-1] - n0
        s0 = np.where(low, x, 0.0).sum(axis=-1, keepdims=True)
        s1 = np.where(low, 0.0, x).sum(axis=-1, keepdims=True)
        new0 = np.where(n0 > 0, s0 / np.maximum(n0, 1), c0)
        new1 = np.where(n1 > 0, s1 / np.maximum(n1, 1), c1)
        if np.array_equal(new0, c0) and np.array_equal(new1, c1):
            break
        c0, c1 = new0, new1
    return low, c0[..., 0], c1[..., 0]


def _cluster_confidence(x, c0, c1):
    spread = (c1 - c0)[..., None]
    mid = ((c0 + c1) / 2)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        conf = np.abs(x - mid) / (spread / 2)
    return np.clip(np.nan_to_num(conf, nan=0.0), 0.0, 1.0)


# -- integer rounding -----------------------------------------------------------


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integers proportional to ``weights`` summing to ``total``; ties to lower index."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    s = w.sum()
    if total < 0:
        raise ValueError("total must be non-negative")
    if s == 0:
        if total == 0:
            return np.zeros(len(w), dtype=np.int64)
        raise ValueError("cannot distribute a positive total over zero weights")
    q = w * total / s
    base = np.floor(q).astype(np.int64)
    rem = total - int(base.sum())
    order = np.lexsort((np.arange(len(w)), -(q - base)))
    base[order[:rem]] += 1
    return base


# -- cache channels ----------------------------------------------------------------


def detect_icache_peaks(l1, z: float = 5.0) -> np.ndarray:
    """Start index of every run of samples above median + z * robust sd."""
    x = np.asarray(l1, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty series")
    med = np.median(x)
    sd = 1.4826 * np.median(np.abs(x - med))
    above = x > med + z * sd
    if not above.any():
        return np.zeros(0, dtype=np.int64)
    starts = above & ~np.concatenate([[False], above[:-1]])
    return np.flatnonzero(starts)


def _nearest_peak(peaks, target: float, lo: float, hi: float):
    inside = peaks[(peaks >= lo) & (peaks <= hi)]
    if inside.size == 0:
        return None
    return int(inside[np.argmin(np.abs(inside - target))])


def two_level_penalty(x) -> float:
    """Penalty 2 * sigma^2 * log(n) for a series that alternates between two levels.

    Level changes every few samples inflate the difference-based MAD, so
    sigma comes from the MAD of deviations from the nearer 2-means center.
    """
    x = np.asarray(x, dtype=np.float64)
    low, c0, c1 = two_means(x)
    resid = x - np.where(low, c0, c1)
    sigma = 1.4826 * np.median(np.abs(resid - np.median(resid)))
    floor = 1e-6 * max(1.0, float(np.mean((x - x.mean()) ** 2)))
    return max(2.0 * sigma**2 * np.log(max(len(x), 2)), floor)


def _low_runs(l2, penalty):
    """(start, end) sample ranges of the low-occupancy (down-projection) segments."""
    cps = pelt(l2, two_level_penalty(l2) if penalty is None else penalty)
    if cps.indices.size == 0:
        return []
    means = segment_means(l2, cps)
    low, _, _ = two_means(means)
    runs = []
    for (a, b), is_low in zip(cps.segments(len(l2)), low):
        if not is_low:
            continue
        if runs and runs[-1][1] == a:
            runs[-1] = (runs[-1][0], b)
        else:
            runs.append((a, b))
    # the loop begins and ends at the high level; a low edge run is spurious
    return [(a, b) for a, b in runs if a > 0 and b < len(l2)]


def expert_spans(trace: CacheTrace, z: float = 5.0, penalty: float | None = None):
    """Duration of every executed expert in one layer, in time units.

    L2 low runs are authoritative for the number of experts and for each
    expert's end. L1 peaks refine each boundary when one sits next to it and
    supply the first expert's start, which L2 cannot see; a missing first peak
    is interpolated from the down-phase length since all three phases cost
    the same.
    """
    if trace.l1 is None or trace.l2 is None:
        raise ValueError("CPU load recovery needs both L1 and L2 samples")
    p = trace.sample_period
    peaks = detect_icache_peaks(trace.l1, z)
    runs = _low_runs(trace.l2, penalty)
    if not runs:
        return np.zeros(0)

    def boundary(idx):
        q = _nearest_peak(peaks, idx - 0.5, idx - 2, idx + 1)
        return (q + 0.5) * p if q is not None else idx * p, q

    down = [boundary(a) for a, _ in runs]
    ends = [boundary(b)[0] for _, b in runs[:-1]] + [runs[-1][1] * p]

    d0, q0 = down[0]
    delta = ends[0] - d0
    guess = d0 - 2 * delta
    before = peaks[peaks < (q0 if q0 is not None else runs[0][0] - 1)]
    before = before[(before + 0.5) * p >= guess - delta]
    if before.size >= 2:
        start0 = (before[-2] + 0.5) * p
    elif before.size == 1:
        t = (before[0] + 0.5) * p
        # a lone peak is either the up start or the gate start
        start0 = t if abs(t - guess) <= abs(t - (d0 - delta)) else t - (d0 - t)
    else:
        start0 = guess
    starts = [start0] + ends[:-1]
    # a down phase too short for L2 merges two experts into one span; the
    # span then carries about three L1 peaks per expert, so split it there
    spans = []
    for s0, e0 in zip(starts, ends):
        inner = peaks[((peaks + 0.5) * p > s0 - p) & ((peaks + 0.5) * p < e0 - p)]
        j = int(round(len(inner) / 3))
        if j >= 2:
            cuts = [(inner[3 * i] + 0.5) * p for i in range(1, j) if 3 * i < len(inner)]
            bounds = [s0, *cuts, e0]
            spans.extend(b - a for a, b in zip(bounds[:-1], bounds[1:]))
        else:
            spans.append(e0 - s0)
    return np.asarray(spans)


def recover_load_cpu(
    traces,
    config: ModelConfig,
    token_budget: int | None = None,
    active=None,
    z: float = 5.0,
    penalty: float | None = None,
    sweep=None,
) -> LoadEstimate:
    """Expert loads from per-layer L1/L2 cache traces.

    ``token_budget`` is N * k; when given, the per-token cost is refit by least
    squares under the constraint that loads sum to the budget, and integer
    counts are returned. ``active`` is an optional (L, M) mask of experts seen
    running, used to place the recovered segments on expert indices when
    some experts were skipped. ``sweep`` is an alternative (L, M) array of
    page-reload latencies taken during the same prefill; the E fastest pages
    are taken as the E experts L2 found, which keeps a misread page from
    shifting every later expert.
    """
    m = config.num_experts
    props = np.zeros((len(traces), m))
    counts = np.zeros((len(traces), m), dtype=np.int64) if token_budget is not None else None
    flags = []
    for layer, tr in enumerate(traces):
        spans = expert_spans(tr, z, penalty)
        flag = ""
        work = np.clip(spans / 3.0 - config.base_cost, 0.0, None)
        e = len(work)
        if sweep is not None and 0 < e <= m:
            idx = np.sort(np.argsort(np.asarray(sweep[layer]), kind="stable")[:e])
        elif active is not None and int(np.sum(active[layer])) == e:
            idx = np.flatnonzero(active[layer])
        elif e == m:
            idx = np.arange(m)
        else:
            flag = f"found {e} experts, cannot align to {m} slots"
            idx = np.arange(min(e, m))
            work = work[: len(idx)]
        row = np.zeros(m)
        if token_budget is not None and work.sum() > 0:
            rate = work.sum() / token_budget  # least-squares per-token cost
            row[idx] = work / rate
        else:
            row[idx] = work / config.per_token_cost
        if row.sum() > 0:
            props[layer] = row / row.sum()
        else:
            props[layer] = 1.0 / m
            flag = flag or "no expert segments detected"
        if counts is not None:
            counts[layer] = largest_remainder(props[layer], token_budget)
        flags.append(flag)
    return LoadEstimate(props, counts, flags)


def recover_load_gpu(trace: ThreadTrace, token_budget: int | None = None) -> LoadEstimate:
    """Loads from per-expert kernel thread counts."""
    c = np.asarray(trace.counts, dtype=np.float64)
    est = c / trace.per_token_threads
    sums = est.sum(axis=1, keepdims=True)
    m = c.shape[1]
    props = np.where(sums > 0, est / np.where(sums > 0, sums, 1.0), 1.0 / m)
    flags = ["" if s > 0 else "no expert kernels observed" for s in sums[:, 0]]
    counts = None
    if token_budget is not None:
        counts = np.stack([largest_remainder(p, token_budget) for p in props])
    return LoadEstimate(props, counts, flags)


# -- probe channels -------------------------------------------------------------------


def recover_seq_pageout(trace: ReloadTrace, k: int | None = None) -> SequenceEstimate:
    """Active experts are the fast reloads.

    With ``k`` known the k fastest pages are taken; otherwise the low cluster
    of a 2-means split on log latency. The low cluster is always reported as
    evidence.
    """
    x = np.log(np.asarray(trace.latencies, dtype=np.float64))
    low, c0, c1 = two_means(x)
    degenerate = ~(c1 - c0 > 1e-12)
    conf = _cluster_confidence(x, c0, c1)
    if k is not None:
        if not 1 <= k <= x.shape[-1]:
            raise ValueError("k out of range")
        order = np.argsort(x, axis=-1, kind="stable")[..., :k]
        mask = np.zeros(x.shape, dtype=np.uint8)
        np.put_along_axis(mask, order, 1, axis=-1)
    else:
        mask = (low & ~degenerate[..., None]).astype(np.uint8)
    evidence = low & ~degenerate[..., None]
    return SequenceEstimate(mask, conf, evidence, degenerate)


def recover_seq_tlb(trace: TlbTrace) -> SequenceEstimate:
    """Expert i is active only when both of its blocks, i and i + 1, hit.

    Blocks 0 and M always hit. If every block reads the same, the forced
    blocks fix the orientation and all blocks count as hits.
    """
    x = np.log(np.asarray(trace.latencies, dtype=np.float64))
    hits, c0, c1 = two_means(x)
    degenerate = ~(c1 - c0 > 1e-12)
    hits = hits | degenerate[..., None]
    hits[..., 0] = True
    hits[..., -1] = True
    mask = (hits[..., :-1] & hits[..., 1:]).astype(np.uint8)
    evidence = hits[..., :-1] | hits[..., 1:]
    conf_b = _cluster_confidence(x, c0, c1)
    conf = np.minimum(conf_b[..., :-1], conf_b[..., 1:])
    return SequenceEstimate(mask, conf, evidence, degenerate)
