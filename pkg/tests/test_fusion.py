import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import KEY, channel, sim_config
from screamfuse.attack import ScoreMatrix, build_profile, correlation_attack
from screamfuse.fusion import (AggregationFn, FusionWarning, check_fusion_compatibility,
                               data_fusion, decision_fusion, fuse_profiling, inversion_signs,
                               warn_if_inverted, write_compatibility_csv)
from screamfuse.preprocess import select_pois, zscore_columns
from screamfuse.rank import evaluate
from screamfuse.sim import simulate


def split(ts, n_prof):
    return ts.subset(np.arange(n_prof)), ts.subset(np.arange(n_prof, ts.n_traces))


@pytest.fixture(scope="module")
def pair():
    cfg = sim_config([channel("a", noise_std=2.0), channel("b", noise_std=2.0)], n=3200)
    (pa, aa), (pb, ab) = (split(ts, 3000) for ts in simulate(cfg))
    pois = select_pois(pa)
    return pa, aa, pb, ab, pois


def test_self_fusion_is_zscored_single(pair):
    pa, aa, _, _, pois = pair
    fused = data_fusion([aa, aa], pois)
    np.testing.assert_allclose(fused.values, zscore_columns(aa.samples[:, list(pois.indices)]))
    assert fused.provenance == ("a", "a")


def test_negation_cancels_without_sign_correction(pair):
    pa, aa, _, _, pois = pair
    fused = data_fusion([aa, aa.scaled(-1)], pois)
    assert np.abs(fused.values).max() < 1e-6
    profile, cols, signs = fuse_profiling([pa, pa.scaled(-1)], pois)
    scores = correlation_attack(fused.as_trace_set(), profile, cols)
    assert scores.degenerate.all()
    assert evaluate(scores, KEY).guessing_entropy == 128


def test_sign_correction_restores_attack(pair):
    pa, aa, _, _, pois = pair
    fused = data_fusion([aa, aa.scaled(-1)], pois, sign_correct=True)
    assert fused.sign_corrections == (1, -1)
    np.testing.assert_allclose(fused.values, zscore_columns(aa.samples[:, list(pois.indices)]),
                               atol=1e-12)
    profile, cols, signs = fuse_profiling([pa, pa.scaled(-1)], pois, sign_correct=True)
    assert signs == (1, -1)
    scores = correlation_attack(fused.as_trace_set(), profile, cols)
    assert evaluate(scores, KEY).guessing_entropy < 20


def test_data_fusion_rejects_plaintext_mismatch(pair):
    pa, aa, pb, ab, pois = pair
    with pytest.raises(ValueError):
        data_fusion([aa, pb.subset(np.arange(aa.n_traces))], pois)
    with pytest.raises(ValueError):
        data_fusion([aa], pois)


def test_inversion_signs(pair):
    pa, _, pb, _, pois = pair
    profiles = [build_profile(s, pois) for s in (pa, pb, pa.scaled(-1))]
    assert inversion_signs(profiles) == (1, 1, -1)


def test_decision_fusion_toy_argmax():
    a = np.zeros((1, 256))
    b = np.zeros((1, 256))
    a[0, :4] = [0.2, 0.4, 0.1, 0.3]
    b[0, :4] = [0.6, 0.8, 0.5, 0.7]
    # the remaining hypotheses sit at the minimum so only the first four compete
    a[0, 4:] = 0.1
    b[0, 4:] = 0.5
    fused = decision_fusion([ScoreMatrix(a), ScoreMatrix(b)], AggregationFn.AVG)
    assert int(np.argmax(fused.scores[0])) == 1
    np.testing.assert_allclose(fused.scores[0, :4], [1 / 3, 1.0, 0.0, 2 / 3])


def random_scores(seed, n_bytes=16):
    return ScoreMatrix(np.random.default_rng(seed).normal(size=(n_bytes, 256)), ("x",), 10)


def test_idempotent_ranking():
    s = random_scores(1)
    for agg in AggregationFn:
        fused = decision_fusion([s, s], agg)
        for b in range(16):
            np.testing.assert_array_equal(fused.ranking(b), s.ranking(b))


def test_prod_with_degenerate_matrix():
    s = random_scores(2)
    flat = ScoreMatrix(np.full((16, 256), 3.0), ("flat",), 10)
    fused = decision_fusion([s, flat], AggregationFn.PROD)
    for b in range(16):
        np.testing.assert_array_equal(fused.ranking(b), s.ranking(b))
    assert fused.flagged.all()


def test_aggregation_parse():
    assert AggregationFn.parse("MAX") is AggregationFn.MAX
    with pytest.raises(ValueError):
        AggregationFn.parse("median")


def test_decision_fusion_needs_two():
    with pytest.raises(ValueError):
        decision_fusion([random_scores(0)], "avg")
    with pytest.raises(ValueError):
        decision_fusion([random_scores(0), random_scores(1, n_bytes=2)], "avg")


@given(seeds=st.lists(st.integers(0, 10_000), min_size=2, max_size=5),
       agg=st.sampled_from(list(AggregationFn)), data=st.data())
def test_decision_fusion_order_independent(seeds, agg, data):
    mats = [random_scores(s, 2) for s in seeds]
    perm = data.draw(st.permutations(range(len(mats))))
    a = decision_fusion(mats, agg).scores
    b = decision_fusion([mats[i] for i in perm], agg).scores
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1


def test_compatibility_reports(tmp_path):
    cfg = sim_config([channel("a", noise_std=0.5),
                      channel("d", noise_std=0.5, distortion_strength=1.0, distortion_seed=11),
                      channel("e", noise_std=0.5, distortion_strength=1.0, distortion_seed=12)],
                     n=20_000)
    a, d, e = simulate(cfg)
    pois = select_pois(a)
    pa, pd, pe = (build_profile(s, pois) for s in (a, d, e))
    same = check_fusion_compatibility(pa, pa)
    assert np.allclose(same.similarity, 1) and not any(same.flip) and same.compatible
    neg = check_fusion_compatibility(pa, pa.negated())
    assert np.allclose(neg.similarity, -1) and all(neg.flip)
    distorted = check_fusion_compatibility(pd, pe)
    assert np.mean(np.abs(distorted.similarity)) < 0.2
    assert not distorted.compatible
    write_compatibility_csv([same, neg], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "channel_a,channel_b,byte,similarity,flip" and len(lines) == 33


def test_inversion_warning(pair):
    pa, _, _, _, pois = pair
    profiles = [build_profile(pa, pois), build_profile(pa.scaled(-1), pois)]
    with pytest.warns(FusionWarning, match="inverted"):
        warn_if_inverted(profiles, sign_correct=False)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        warn_if_inverted(profiles, sign_correct=True)


@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 100), b=st.floats(-50, 50))
def test_avg_ranking_invariant_to_positive_affine_transform(seed, a, b):
    s, t = random_scores(seed, 2), random_scores(seed + 1, 2)
    base = decision_fusion([s, t], "avg")
    moved = decision_fusion([ScoreMatrix(a * s.scores + b), t], "avg")
    for byte in range(2):
        np.testing.assert_array_equal(np.argsort(moved.scores[byte], kind="stable"),
                                      np.argsort(base.scores[byte], kind="stable"))


@given(seed=st.integers(0, 10_000), transform=st.sampled_from([np.exp, np.cbrt, np.arctan]))
def test_monotone_transform_of_duplicated_matrix(seed, transform):
    s = random_scores(seed, 2)
    fused = decision_fusion([ScoreMatrix(transform(s.scores)), ScoreMatrix(transform(s.scores))], "avg")
    for byte in range(2):
        np.testing.assert_array_equal(fused.ranking(byte), s.ranking(byte))


@given(seed=st.integers(0, 10_000), transform=st.sampled_from([np.exp, np.cbrt, np.arctan]))
def test_avg_and_prod_rankings_agree_on_rank_identical_inputs(seed, transform):
    s = random_scores(seed, 2)
    mats = [s, ScoreMatrix(transform(s.scores))]
    avg = decision_fusion(mats, "avg")
    prod = decision_fusion(mats, "prod")
    for byte in range(2):
        np.testing.assert_array_equal(avg.ranking(byte), prod.ranking(byte))
