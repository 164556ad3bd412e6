from dataclasses import replace

import numpy as np
import pytest

from moeleak import channels as ch
from moeleak.moe import ExpertFootprint, ModelConfig, preset
from moeleak.stats import pearson
from moeleak.translate import detect_icache_peaks, pelt, recover_seq_pageout

CFG = ModelConfig()
QUIET = ch.NoiseModel.noiseless()


def one_layer(load_row):
    return ch.schedule_from_load(np.atleast_2d(load_row), CFG)


def test_schedule_from_load_matches_prefill(toy):
    pre = toy.prefill([3, 1, 4, 1, 5, 9, 2, 6])
    assert ch.schedule_from_load(pre.footprint.load, toy.config) == pre.schedules


def test_single_expert_three_peaks():
    (t,) = ch.simulate_cache(one_layer([0, 7]), QUIET, 0)
    assert len(detect_icache_peaks(t.l1)) == 3


def test_peak_positions_follow_phase_durations():
    (t,) = ch.simulate_cache(one_layer([10, 1]), QUIET, 0)
    peaks = detect_icache_peaks(t.l1)
    d_a, d_b = CFG.base_cost + 10 * CFG.per_token_cost, CFG.base_cost + CFG.per_token_cost
    assert np.diff(peaks).tolist() == [d_a, d_a, d_a, d_b, d_b]
    span_a = 3 * d_a - 3 * CFG.base_cost
    span_b = 3 * d_b - 3 * CFG.base_cost
    assert span_a / span_b == 10


def test_peak_drop_rate():
    noise = replace(QUIET, icache=replace(QUIET.icache, peak_miss_prob=0.02))
    sched = one_layer(np.ones(3334, dtype=np.int64))
    (t,) = ch.simulate_cache(sched, noise, 7)
    dropped = 3 * 3334 - len(detect_icache_peaks(t.l1))
    assert abs(dropped - 200) <= 45


def test_l2_two_changes_per_expert():
    load = np.array([0, 3, 0, 9, 1, 0, 4])
    (t,) = ch.simulate_cache(one_layer(load), QUIET, 0)
    assert np.count_nonzero(np.diff(t.l2)) == 2 * np.count_nonzero(load)
    assert len(pelt(t.l2).indices) == 2 * np.count_nonzero(load)
    assert t.l1.shape == t.l2.shape


def test_equal_levels_no_changepoints():
    noise = replace(QUIET, l2=ch.L2Noise(level_high=120.0, level_low=120.0, level_sd=0.0))
    (t,) = ch.simulate_cache(one_layer([5, 5, 5]), noise, 3)
    assert np.ptp(t.l2) == 0 and len(pelt(t.l2).indices) == 0


def test_cache_split_wrappers():
    sched = one_layer([2, 2])
    (a,), (b,), (c,) = (f(sched, ch.NoiseModel(), 4) for f in
                        (ch.simulate_cache, ch.simulate_l1_icache, ch.simulate_l2))
    assert np.array_equal(a.l1, b.l1) and np.array_equal(a.l2, c.l2)
    assert b.l2 is None and c.l1 is None


def test_pageout_six_low_points(lite):
    pre = lite.prefill([7, 8, 9])
    _, sels, _ = lite.decode_step(pre.state, pre.first_token)
    seq = np.stack([s.mask for s in sels])[None]
    lat = ch.simulate_pageout_reload(seq, QUIET, 0).latencies
    assert lat.shape == (1, 26, 64)
    assert np.all((lat < 250).sum(axis=-1) == 6)
    assert np.array_equal(recover_seq_pageout(ch.ReloadTrace(lat), 6).mask, seq)


def test_pageout_step_mode_is_union():
    seq = np.zeros((2, 3, 8), np.uint8)
    seq[0, 0, 1] = seq[0, 2, 5] = seq[1, 1, 7] = 1
    lat = ch.simulate_pageout_reload(seq, QUIET, 0, mode="step").latencies
    assert lat.shape == (2, 1, 8)
    assert np.flatnonzero(lat[0, 0] < 250).tolist() == [1, 5]
    with pytest.raises(ValueError):
        ch.simulate_pageout_reload(seq, QUIET, 0, mode="token")


def test_perf_counter_noiseless():
    load = np.array([[0, 4, 9, 1], [3, 3, 3, 3]])
    tr = ch.simulate_perf_counter(ExpertFootprint.from_load(load), QUIET, 0)
    assert np.array_equal(tr.counts, 128 * load)
    assert pearson(tr.counts, load) == pytest.approx(1.0, abs=1e-12)
    assert len(set(tr.counts[1])) == 1


def test_perf_counter_zero_iff_zero_load():
    load = np.array([[0, 1, 0, 2]] * 50)
    tr = ch.simulate_perf_counter(load, ch.NoiseModel(threads=ch.ThreadNoise(count_jitter_sd=500.0)), 1)
    assert np.array_equal(tr.counts == 0, load == 0)


def test_tlb_worked_example():
    act = np.zeros(64, bool)
    act[[3, 35, 38, 60, 62, 63]] = True
    hits = ch.tlb_block_hits(act)
    assert np.flatnonzero(hits).tolist() == [0, 3, 4, 35, 36, 38, 39, 60, 61, 62, 63, 64]
    lat = ch.simulate_tlb(act[None, None].astype(np.uint8), QUIET, 0).latencies
    assert lat.shape == (1, 1, 65) and np.array_equal(lat[0, 0] < 250, hits)


def test_tlb_no_active_only_forced_blocks():
    assert np.flatnonzero(ch.tlb_block_hits(np.zeros(64, bool))).tolist() == [0, 64]


def test_tlb_layout_mismatch():
    with pytest.raises(ValueError):
        ch.simulate_tlb(np.zeros((1, 1, 16), np.uint8), QUIET, 0, num_experts=64)


@pytest.mark.parametrize("sim", ["cache", "reload", "perf", "tlb"])
def test_simulators_deterministic(sim, toy):
    pre = toy.prefill(list(range(20)))
    seq = toy.teacher_forced_trace([1, 2], [3, 4, 5]).footprint
    noise = ch.NoiseModel.for_contention(2)
    run = {
        "cache": lambda s: [t.l1.tolist() + t.l2.tolist() for t in ch.simulate_cache(pre.schedules, noise, s)],
        "reload": lambda s: ch.simulate_pageout_reload(seq, noise, s).latencies.tolist(),
        "perf": lambda s: ch.simulate_perf_counter(pre.footprint, noise, s).counts.tolist(),
        "tlb": lambda s: ch.simulate_tlb(seq, noise, s).latencies.tolist(),
    }[sim]
    assert run(11) == run(11)
    assert run(11) != run(12)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        ch.NoiseModel(reload=ch.ProbeNoise(hit_mean=400, miss_mean=100))
    with pytest.raises(ValueError):
        ch.NoiseModel(tlb=ch.ProbeNoise(flip_prob=1.5))
    with pytest.raises(ValueError):
        ch.NoiseModel(icache=ch.IcacheNoise(peak_miss_prob=-0.1))
    with pytest.raises(ValueError):
        ch.NoiseModel().at_contention(5)


def test_contention_table_monotone():
    for table in (ch.RELOAD_FLIP_BY_LEVEL, ch.TLB_FLIP_BY_LEVEL):
        assert list(table) == sorted(table)
    n3 = ch.NoiseModel.for_contention(3)
    assert n3.contention_level == 3 and n3.tlb.flip_prob == ch.TLB_FLIP_BY_LEVEL[3]
    assert ch.NoiseModel.default() == ch.NoiseModel.for_contention(0)


def test_latencies_positive():
    noise = ch.NoiseModel(reload=ch.ProbeNoise(hit_mean=2.0, hit_sd=50.0, miss_mean=5.0))
    lat = ch.simulate_pageout_reload(np.ones((50, 2, 8), np.uint8), noise, 0).latencies
    assert lat.min() >= 1.0
