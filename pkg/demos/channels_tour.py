"""A tour of the four side channels on one prompt.

A health prompt goes through the toy model. Its prefill load is leaked
through the CPU cache timeline and the GPU thread counter, then recovered.
The first decode steps are leaked through page reloads and TLB probes.
The TLB part ends with the classic ambiguity: an inactive expert wedged
between two active ones is indistinguishable from an active one.

Run:  python demos/channels_tour.py
"""
import numpy as np

from moeleak import channels as ch
from moeleak import translate as tr
from moeleak.corpus import build_pia_dataset, health_vocabulary, load_templates
from moeleak.moe import build_model, preset
from moeleak.stats import pearson

model = build_model(preset("toy"))
cfg = model.config
vocab = health_vocabulary()
prompt = build_pia_dataset(1, "short", load_templates(), seed=3, vocab=vocab)[0]
print("prompt:", vocab.decode(prompt.token_ids))
print(f"{len(prompt.token_ids)} tokens, {cfg.num_layers} layers, {cfg.num_experts} experts, top-{cfg.top_k}\n")

pre = model.prefill(prompt.token_ids)
truth = pre.footprint.load
budget = len(prompt.token_ids) * cfg.top_k
noise = ch.NoiseModel()
rng = np.random.default_rng(0)

# CPU: L1 peaks mark expert starts, L2 dips mark the down projection
traces = ch.simulate_cache(pre.schedules, noise, rng)
sweep = ch.simulate_pageout_reload(pre.footprint, noise, rng).latencies[0]
cpu = tr.recover_load_cpu(traces, cfg, budget, sweep=sweep)
print("layer 0 L2 trace (first 40 samples):")
print(np.round(traces[0].l2[:40]).astype(int))

# GPU: thread counts are proportional to tokens served
gpu = tr.recover_load_gpu(ch.simulate_perf_counter(pre.footprint, noise, rng), budget)

print("\nlayer 0 loads")
print("  truth:", truth[0])
print("  cpu:  ", cpu.counts[0])
print("  gpu:  ", gpu.counts[0])
for name, est in (("cpu", cpu), ("gpu", gpu)):
    r = np.mean([pearson(est.proportions[i], truth[i]) for i in range(cfg.num_layers)])
    print(f"  {name} mean per-layer correlation {r:.3f}")

# decode: which experts does each new token touch?
_, fp = model.generate(prompt.token_ids, 5)
seqs = fp.sequences
page = tr.recover_seq_pageout(ch.simulate_pageout_reload(seqs, noise, rng), cfg.top_k)
tlb = tr.recover_seq_tlb(ch.simulate_tlb(seqs, noise, rng))
print("\ndecode step 0, layer 0 active experts")
print("  truth:  ", np.flatnonzero(seqs[0, 0]).tolist())
print("  pageout:", np.flatnonzero(page.mask[0, 0]).tolist())
print("  tlb:    ", np.flatnonzero(tlb.mask[0, 0]).tolist())

# the ambiguity, on a 64-expert layer
ex = np.zeros((1, 1, 64), np.uint8)
ex[0, 0, [3, 35, 38, 60, 62, 63]] = 1
hits = ch.tlb_block_hits(ex)[0, 0]
dec = tr.recover_seq_tlb(ch.simulate_tlb(ex, ch.NoiseModel.noiseless(), 0)).mask[0, 0]
print("\nTLB worked example")
print("  active:     ", np.flatnonzero(ex[0, 0]).tolist())
print("  blocks hit: ", np.flatnonzero(hits).tolist())
print("  decoded:    ", np.flatnonzero(dec).tolist(), "(61 sits between two hit blocks)")
