import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import KEY, channel, sim_config
from screamfuse.attack import (LeakageProfile, ProfileError, ScoreMatrix, attack_curve,
                               build_profile, correlation_attack, profile_similarity,
                               read_profile_csv, read_scores_csv, write_profile_csv,
                               write_scores_csv)
from screamfuse.preprocess import PoiSet, select_pois, time_diversity_average
from screamfuse.sim import HW, SBOX, simulate
from screamfuse.trace_model import ChannelMeta, TraceSet

META = ChannelMeta(2.4e9, "toy")
LEAK_POIS = PoiSet([[4 * b] for b in range(16)], np.zeros((16, 64)))


def sets(noise=0.0, gain=1.0, n_prof=3000, n_att=100, seed=0, **kw):
    cfg = sim_config([channel(noise_std=noise, gain=gain, **kw)], n=n_prof + n_att, master_seed=seed)
    ts = simulate(cfg)[0]
    return ts.subset(np.arange(n_prof)), ts.subset(np.arange(n_prof, n_prof + n_att))


def test_noiseless_profile_is_hamming_weight():
    prof, _ = sets(n_prof=3000)
    p = build_profile(prof, LEAK_POIS)
    for b in range(16):
        covered = ~p.missing[b]
        np.testing.assert_array_equal(p.byte_means(b)[covered], HW[covered])


def test_negative_gain_profile():
    prof, _ = sets(gain=-1.0)
    p = build_profile(prof, LEAK_POIS)
    covered = ~p.missing[3]
    np.testing.assert_array_equal(p.byte_means(3)[covered], -HW[covered].astype(float))


def test_balanced_class_counts():
    k = 3
    v = np.tile(np.arange(256), k)
    key = np.frombuffer(KEY, np.uint8)
    pts = v[:, None] ^ key[None, :]
    ts = TraceSet(META, np.zeros((len(v), 64)), pts, np.tile(key, (len(v), 1)))
    p = build_profile(ts, LEAK_POIS)
    assert (p.counts == k).all()
    assert not p.missing.any()


def test_missing_classes_are_nan():
    prof, _ = sets(n_prof=50)
    p = build_profile(prof, LEAK_POIS)
    assert p.missing.any()
    assert np.isnan(p.means[:, 0][p.missing]).all()
    assert np.isfinite(p.means[:, 0][~p.missing]).all()


def test_profile_requires_keys():
    prof, _ = sets(n_prof=20)
    with pytest.raises(ProfileError):
        build_profile(prof.without_keys(), LEAK_POIS)


def test_profile_similarity_examples():
    prof, _ = sets(noise=1.0)
    p = build_profile(prof, LEAK_POIS)
    assert profile_similarity(p, p, 0) == pytest.approx(1.0)
    assert profile_similarity(p, p.negated(), 0) == pytest.approx(-1.0)
    a = build_profile(sets(gain=2.0, distortion_seed=4, distortion_strength=0.6)[0], LEAK_POIS)
    b = build_profile(sets(gain=5.0, distortion_seed=4, distortion_strength=0.6)[0], LEAK_POIS)
    assert abs(profile_similarity(a, b, 5) - 1.0) < 1e-9


def test_noiseless_attack_recovers_key():
    prof, att = sets(n_prof=5000, n_att=300)
    p = build_profile(prof, LEAK_POIS)
    s = correlation_attack(att.without_keys(), p, LEAK_POIS)
    assert s.best_key() == KEY
    for b in range(16):
        assert abs(s.scores[b, KEY[b]] - 1.0) < 1e-9


def test_affine_invariance():
    prof, att = sets(noise=3.0, n_prof=3000, n_att=200)
    p = build_profile(prof, LEAK_POIS)
    base = correlation_attack(att, p, LEAK_POIS).scores
    moved = TraceSet(att.channel, 2.5 * att.samples.astype(np.float64) + 7.0, att.plaintexts)
    np.testing.assert_allclose(correlation_attack(moved, p, LEAK_POIS).scores, base, atol=1e-6)


def test_toy_scores_match_hand_pearson():
    # 6 traces, byte 0 takes 3 distinct values; the profile is HW for every byte
    pt0 = [0x00, 0x53, 0x10, 0x00, 0x53, 0x10]
    obs = [4.1, 6.2, 2.9, 3.8, 5.7, 3.3]
    pts = np.zeros((6, 16), dtype=np.uint8)
    pts[:, 0] = pt0
    pts[:, 1:] = np.arange(1, 16)[None, :] * np.arange(1, 7)[:, None] % 256
    samples = np.zeros((6, 16))
    samples[:, 0] = obs
    samples[:, 1:] = np.arange(6)[:, None] * np.arange(1, 16)[None, :] % 7
    att = TraceSet(META, samples, pts)
    pois = PoiSet([[b] for b in range(16)], np.zeros((16, 16)))
    means = np.tile(HW.astype(float), (16, 1, 1))
    profile = LeakageProfile(means, np.ones((16, 256), dtype=np.int64), META, pois)
    s = correlation_attack(att, profile, pois)
    x = [float(v) for v in np.float32(obs)]
    for k in range(256):
        model = [float(HW[SBOX[p ^ k]]) for p in pt0]
        if len(set(model)) == 1:
            expected = -1.0
            assert s.flagged[0, k]
        else:
            expected = statistics.correlation(model, x)
        assert s.scores[0, k] == pytest.approx(expected, abs=1e-9)


def test_constant_observation_scores_zero():
    prof, att = sets(noise=1.0, n_att=30)
    p = build_profile(prof, LEAK_POIS)
    flat = TraceSet(att.channel, np.ones_like(att.samples), att.plaintexts)
    s = correlation_attack(flat, p, LEAK_POIS)
    assert (s.scores == 0).all()
    assert s.degenerate.all()


def test_prefix_curve_matches_individual_attacks():
    prof, att = sets(noise=2.0, n_att=120)
    p = build_profile(prof, LEAK_POIS)
    grid = [10, 40, 120]
    curve = attack_curve(att, p, LEAK_POIS, grid)
    for n, sm in zip(grid, curve):
        direct = correlation_attack(att.subset(np.arange(n)), p, LEAK_POIS)
        np.testing.assert_allclose(sm.scores, direct.scores, atol=1e-9)
        assert sm.n_traces == n


def test_missing_profile_classes_flagged():
    prof, att = sets(noise=1.0, n_prof=60, n_att=200)
    p = build_profile(prof, LEAK_POIS)
    s = correlation_attack(att, p, LEAK_POIS)
    assert s.flagged.any()
    assert np.isfinite(s.scores).all()


def test_attack_rejects_uncollapsed_time_diversity():
    cfg = sim_config(n=20, time_diversity=2)
    ts = simulate(cfg)[0]
    p = build_profile(time_diversity_average(ts), LEAK_POIS)
    with pytest.raises(ValueError):
        correlation_attack(ts, p, LEAK_POIS)


def test_score_matrix_validation():
    with pytest.raises(ValueError):
        ScoreMatrix(np.zeros((2, 255)))
    bad = np.zeros((1, 256))
    bad[0, 3] = np.nan
    with pytest.raises(ValueError):
        ScoreMatrix(bad)
    s = ScoreMatrix(np.vstack([np.zeros(256), np.arange(256.0)]))
    assert s.degenerate.tolist() == [True, False]
    assert list(s.ranking(1)[:2]) == [255, 254]


def test_csv_round_trips(tmp_path):
    prof, att = sets(noise=2.0, n_prof=400, n_att=50)
    pois = select_pois(prof, 2)
    p = build_profile(prof, pois)
    s = correlation_attack(att, p, pois)
    write_scores_csv(s, tmp_path / "s.csv")
    back = read_scores_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.scores, s.scores)
    assert back.channels == s.channels and back.n_traces == 50
    write_profile_csv(p, tmp_path / "p.csv")
    q = read_profile_csv(tmp_path / "p.csv", prof.channel)
    np.testing.assert_array_equal(q.means, p.means)
    np.testing.assert_array_equal(q.counts, p.counts)
    assert q.pois.per_byte == pois.per_byte


@given(a=st.floats(0.01, 100), b=st.floats(-100, 100), seed=st.integers(0, 1000))
def test_affine_invariance_property(a, b, seed):
    rng = np.random.default_rng(seed)
    n = 40
    pts = rng.integers(0, 256, (n, 16))
    x = rng.normal(size=(n, 16)) + HW[SBOX[pts ^ np.frombuffer(KEY, np.uint8)]]
    pois = PoiSet([[c] for c in range(16)], np.zeros((16, 16)))
    profile = LeakageProfile(np.tile(HW.astype(float), (16, 1, 1)),
                             np.ones((16, 256), dtype=np.int64), META, pois)
    base = correlation_attack(TraceSet(META, x, pts), profile, pois).scores
    moved = correlation_attack(TraceSet(META, a * x.astype(np.float32).astype(np.float64) + b, pts),
                               profile, pois).scores
    np.testing.assert_allclose(moved, base, atol=1e-4)


def test_negated_samples_negate_scores():
    prof, att = sets(noise=3.0, n_prof=6000, n_att=150)
    p = build_profile(prof, LEAK_POIS)
    s = correlation_attack(att, p, LEAK_POIS)
    neg = correlation_attack(att.scaled(-1), p, LEAK_POIS)
    assert not s.flagged.any()
    np.testing.assert_allclose(neg.scores, -s.scores, atol=1e-12)
    for b in range(16):
        np.testing.assert_array_equal(np.argsort(neg.scores[b]), np.argsort(-s.scores[b]))


def test_byte_score_is_local():
    prof, att = sets(noise=3.0, n_prof=6000, n_att=150)
    p = build_profile(prof, LEAK_POIS)
    base = correlation_attack(att, p, LEAK_POIS)
    rng = np.random.default_rng(1)
    samples = att.samples.copy()
    pts = att.plaintexts.copy()
    others = [c for c in range(64) if c != 0]
    samples[:, others] += rng.normal(size=(att.n_traces, len(others))).astype(np.float32)
    pts[:, 1:] = rng.integers(0, 256, (att.n_traces, 15))
    moved = correlation_attack(TraceSet(att.channel, samples, pts), p, LEAK_POIS)
    np.testing.assert_array_equal(moved.scores[0], base.scores[0])
