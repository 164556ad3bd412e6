"""Channel-level recovery metrics shared by the harness, tests and demos."""
from __future__ import annotations

import numpy as np

from . import channels as ch
from . import translate as tr
from .corpus import build_rra_corpus, load_domain_text
from .moe import MoEModel
from .stats import load_correlation, sequence_accuracy

SEQUENCE_CHANNELS = ("pageout", "tlb")
LOAD_CHANNELS = ("l1l2", "perf")


def decode_sequences(model: MoEModel, pairs, limit: int | None = None) -> np.ndarray:
    """Teacher-forced (T, L, M) expert sequences for (prompt, response) pairs."""
    chosen = pairs if limit is None else pairs[:limit]
    return np.concatenate([model.teacher_forced_trace(p, r).footprint.sequences for p, r in chosen])


def reference_sequences(model: MoEModel, n_pairs: int = 60, domain: str = "general", seed: int = 0):
    """Decode footprints of the first ``n_pairs`` pairs of a shipped corpus."""
    pairs, _ = build_rra_corpus([load_domain_text(domain)], seed)
    return decode_sequences(model, pairs, n_pairs)


def recover_sequences(seqs, channel: str, noise: ch.NoiseModel, rng, k: int | None = None) -> tr.SequenceEstimate:
    """Simulate one sequence channel on ``seqs`` and translate it back."""
    if channel == "pageout":
        return tr.recover_seq_pageout(ch.simulate_pageout_reload(seqs, noise, rng), k)
    if channel == "tlb":
        return tr.recover_seq_tlb(ch.simulate_tlb(seqs, noise, rng))
    raise ValueError(f"not a sequence channel: {channel!r}")


def sequence_channel_accuracy(seqs, channel: str, noise: ch.NoiseModel, rng=0, k: int | None = None) -> float:
    """Share of trace-implicated experts whose status is recovered correctly."""
    est = recover_sequences(seqs, channel, noise, ch._rng(rng), k)
    return sequence_accuracy(est.mask, seqs, est.evidence)


def recover_loads(model: MoEModel, prefill, channel: str, noise: ch.NoiseModel, rng, n_tokens: int):
    """Simulate a load channel for one prefill result and translate it back."""
    cfg = model.config
    rng = ch._rng(rng)
    budget = n_tokens * cfg.top_k
    if channel == "perf":
        return tr.recover_load_gpu(ch.simulate_perf_counter(prefill.footprint, noise, rng), budget)
    if channel == "l1l2":
        traces = ch.simulate_cache(prefill.schedules, noise, rng)
        sweep = ch.simulate_pageout_reload(prefill.footprint, noise, rng).latencies[0]
        return tr.recover_load_cpu(traces, cfg, budget, sweep=sweep)
    raise ValueError(f"not a load channel: {channel!r}")


def load_channel_correlation(model: MoEModel, prompts, channel: str, noise: ch.NoiseModel, seed: int = 0) -> float:
    """Mean per-prompt Pearson correlation between recovered and true loads."""
    est, truth = [], []
    for i, ids in enumerate(prompts):
        pre = model.prefill(ids)
        rng = np.random.default_rng([seed, i])
        est.append(recover_loads(model, pre, channel, noise, rng, len(ids)).proportions)
        truth.append(pre.footprint.load)
    return load_correlation(np.stack(est), np.stack(truth))
