"""Leakage statistics and attack metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T_THRESHOLD = 4.5
VARIANCE_FLOOR = 1e-12


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class TTestReport:
    t: np.ndarray  # flattened per-expert statistics
    threshold: float
    leaky_count: int
    dof: np.ndarray | None = None

    @property
    def leaky(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.t) > self.threshold)


def welch_t(group_a, group_b, threshold: float = DEFAULT_T_THRESHOLD) -> TTestReport:
    """Welch's unequal-variance t statistic per footprint coordinate.

    Each group is an array of shape (n, ...); trailing axes are flattened
    (e.g. (n, L, M) loads become L*M coordinates).
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 samples")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("groups have different footprint sizes")
    na, nb = len(a), len(b)
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    se2 = np.maximum(va + vb, VARIANCE_FLOOR)
    t = (a.mean(axis=0) - b.mean(axis=0)) / np.sqrt(se2)
    # Welch-Satterthwaite; reported only, the decision uses |t| alone
    with np.errstate(divide="ignore", invalid="ignore"):
        dof = se2**2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
    return TTestReport(t, float(threshold), int(np.sum(np.abs(t) > threshold)), dof)


def leaky_count(t, threshold: float = DEFAULT_T_THRESHOLD) -> int:
    return int(np.sum(np.abs(np.asarray(t)) > threshold))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("zero variance input")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def token_asr(predicted, truth) -> float:
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError("predicted and true token sequences differ in length")
    if t.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean(p == t))


def topk_accuracy(scores, labels, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` best scores.

    Ties rank the lower class index first.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim != 2 or len(s) != len(y):
        raise ValueError("scores must be (n, classes) with one label per row")
    if not 1 <= k <= s.shape[1]:
        raise ValueError("k must be between 1 and the number of classes")
    true = s[np.arange(len(y)), y][:, None]
    idx = np.arange(s.shape[1])[None, :]
    rank = np.sum((s > true) | ((s == true) & (idx < y[:, None])), axis=1)
    return float(np.mean(rank < k))


def sequence_accuracy(pred, truth, evidence=None) -> float:
    """Share of trace-implicated experts whose active/inactive status is right.

    ``pred``, ``truth`` and ``evidence`` are 0/1 arrays of the same shape
    (..., M); ``evidence`` marks experts the raw trace shows any activity for
    (e.g. either TLB block hit). Experts outside ``evidence | pred | truth``
    carry no information and are not counted. Pooled over all leading axes.
    """
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    e = p.copy() if evidence is None else np.asarray(evidence, dtype=bool)
    if p.shape != t.shape or e.shape != t.shape:
        raise ValueError("shape mismatch")
    considered = int(np.sum(e | p | t))
    if considered == 0:
        return 1.0
    return 1.0 - int(np.sum(p ^ t)) / considered


def expert_error_rate(pred, truth, evidence=None) -> float:
    return 1.0 - sequence_accuracy(pred, truth, evidence)


def load_correlation(est, truth) -> float:
    """Mean over samples of the Pearson correlation of flattened (L, M) loads."""
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.ndim == 2:
        return pearson(est, truth)
    return float(np.mean([pearson(e, t) for e, t in zip(est, truth)]))
