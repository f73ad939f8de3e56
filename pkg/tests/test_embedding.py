import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asvmimic.embedding import (BwStats, Embedding, GmmUbm, TotalVariability, accumulate_bw,
                                average_embeddings, extract_ivector, train_tv, train_ubm, tv_objective)
from asvmimic.errors import DataError
from asvmimic.frontend import FeatureMatrix


def feats(x, flags=None):
    x = np.asarray(x, float)
    flags = np.ones(len(x), bool) if flags is None else flags
    return FeatureMatrix(x, flags, np.arange(len(x)) * 0.01)


# UBM ------------------------------------------------------------------------

def test_single_component_is_global_gaussian(rng):
    x = rng.standard_normal((500, 3)) * [1, 2, 0.5] + [3, -1, 0]
    ubm = train_ubm([feats(x)], 1, iters=3)
    assert np.allclose(ubm.means[0], x.mean(0), atol=1e-9)
    assert np.allclose(ubm.variances[0], x.var(0), atol=1e-9)
    assert ubm.weights[0] == pytest.approx(1.0, abs=1e-12)


def test_two_clusters_recovered(rng):
    centers = np.array([[-5.0, 0.0], [5.0, 2.0]])
    x = np.vstack([rng.standard_normal((400, 2)) + c for c in centers])
    # a small split sits near a symmetric saddle of EM, so give it enough iterations
    for seed in range(4):
        ubm = train_ubm([feats(x)], 2, iters=40, seed=seed)
        got = ubm.means[np.argsort(ubm.means[:, 0])]
        assert np.all(np.abs(got - centers) < 0.1)
        assert abs(ubm.weights.sum() - 1) < 1e-9


def test_constant_frames_hit_floor():
    x = np.full((200, 2), 1.5)
    ubm = train_ubm([feats(x)], 2, iters=3)
    assert np.all(ubm.variances == 1e-8)
    assert np.allclose(ubm.means, 1.5)


def test_only_speech_frames_used(rng):
    x = rng.standard_normal((300, 2))
    flags = np.arange(300) < 150
    x[~flags] = 1000.0
    ubm = train_ubm([feats(x, flags)], 1, iters=1)
    assert np.allclose(ubm.means[0], x[flags].mean(0))


def test_ubm_loglik_non_decreasing(rng):
    x = np.vstack([rng.standard_normal((300, 3)) + c for c in ([0, 0, 0], [4, 4, 0], [-4, 2, 3])])
    trace = []
    train_ubm([feats(x)], 4, iters=6, seed=1, on_iteration=lambda c, it, ll: trace.append((c, ll)))
    for (c0, a), (c1, b) in zip(trace, trace[1:]):
        if c0 == c1:
            assert b >= a - 1e-6 * abs(a)


def test_ubm_needs_data(rng):
    with pytest.raises(DataError, match="frames"):
        train_ubm([feats(rng.standard_normal((100, 2)))], 4)


def test_ubm_deterministic(rng):
    x = rng.standard_normal((600, 3))
    a = train_ubm([feats(x)], 4, seed=5)
    b = train_ubm([feats(x)], 4, seed=5)
    assert a.means.tobytes() == b.means.tobytes() and a.variances.tobytes() == b.variances.tobytes()


# Baum-Welch -----------------------------------------------------------------

def _separated_ubm():
    means = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    return GmmUbm(np.full(3, 1 / 3), means, np.ones((3, 2)))


def test_frame_at_component_mean():
    st_ = accumulate_bw(feats([[0.0, 0.0]]), _separated_ubm())
    # posterior of the other components is exp(-200) relative
    assert np.allclose(st_.n, [1, 0, 0], atol=1e-6)


def test_occupancy_sums_to_speech_frames(rng):
    x = rng.standard_normal((57, 2)) * 8
    flags = rng.random(57) < 0.6
    s = accumulate_bw(feats(x, flags), _separated_ubm())
    assert abs(s.n.sum() - flags.sum()) < 1e-9


def test_centered_first_order_zero_at_mean():
    ubm = _separated_ubm()
    s = accumulate_bw(feats(np.repeat(ubm.means[1:2], 5, axis=0)), ubm)
    assert np.allclose(s.f[1], 0, atol=1e-9)


def test_bw_needs_speech():
    with pytest.raises(DataError):
        accumulate_bw(feats(np.zeros((3, 2)), np.zeros(3, bool)), _separated_ubm())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6))
def test_shard_merge_equals_whole(seed, n_shards):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((120, 2)) * 6
    ubm = _separated_ubm()
    whole = accumulate_bw(x, ubm)
    cuts = np.sort(rng.choice(np.arange(1, 120), n_shards - 1, replace=False))
    merged = BwStats.merge([accumulate_bw(p, ubm) for p in np.split(x, cuts)])
    assert np.max(np.abs(merged.n - whole.n)) <= 1e-9
    assert np.max(np.abs(merged.f - whole.f)) <= 1e-9


# total variability ----------------------------------------------------------

def _tv_data(rng, n_utt=200, c=4, d=3, occupancy=200.0):
    truth = rng.standard_normal(c * d)
    sigma = rng.uniform(0.5, 1.5, c * d)
    stats = []
    for _ in range(n_utt):
        w = rng.standard_normal()
        n = np.full(c, occupancy)
        f = np.repeat(n, d) * truth * w + np.sqrt(np.repeat(n, d) * sigma) * rng.standard_normal(c * d)
        stats.append(BwStats(n, f.reshape(c, d)))
    ubm = GmmUbm(np.full(c, 1 / c), np.zeros((c, d)), sigma.reshape(c, d))
    return truth, ubm, stats


def test_tv_recovers_one_dim_subspace(rng):
    truth, ubm, stats = _tv_data(rng)
    tv = train_tv(stats, ubm, 1, iters=10, seed=0)
    col = tv.t_matrix[:, 0]
    assert abs(col @ truth) / (np.linalg.norm(col) * np.linalg.norm(truth)) >= 0.95


def test_tv_objective_non_decreasing(rng):
    _, ubm, stats = _tv_data(rng, n_utt=60, occupancy=30.0)
    trace = []
    train_tv(stats, ubm, 2, iters=6, seed=1, on_iteration=lambda it, o: trace.append(o))
    assert all(b >= a - 1e-4 for a, b in zip(trace, trace[1:]))


def test_tv_objective_helper_matches_trace(rng):
    _, ubm, stats = _tv_data(rng, n_utt=30)
    trace = []
    tv = train_tv(stats, ubm, 1, iters=2, seed=1, on_iteration=lambda it, o: trace.append(o))
    again = []
    train_tv(stats, ubm, 1, iters=1, init=tv.t_matrix, on_iteration=lambda it, o: again.append(o))
    assert again[0] == pytest.approx(tv_objective(stats, tv), rel=1e-9)


def test_tv_deterministic(rng):
    _, ubm, stats = _tv_data(rng, n_utt=40)
    a = train_tv(stats, ubm, 2, iters=3, seed=7)
    b = train_tv(stats, ubm, 2, iters=3, seed=7)
    assert a.t_matrix.tobytes() == b.t_matrix.tobytes()


def test_tv_rank_bound(rng):
    _, ubm, stats = _tv_data(rng, n_utt=5, c=2, d=2)
    with pytest.raises(DataError):
        train_tv(stats, ubm, 4)


def test_tv_warns_on_few_utterances(rng):
    _, ubm, stats = _tv_data(rng, n_utt=2)
    with pytest.warns(RuntimeWarning, match="utterances"):
        train_tv(stats, ubm, 3, iters=1)


# i-vectors ------------------------------------------------------------------

def _tv(rng, c=3, d=2, r=2):
    return TotalVariability(rng.standard_normal((c * d, r)), rng.uniform(0.5, 2, c * d), c)


def test_zero_stats_give_zero_vector(rng):
    tv = _tv(rng)
    e = extract_ivector(BwStats(np.zeros(3), np.zeros((3, 2))), tv)
    assert np.all(e.vector == 0)


def test_huge_occupancy_recovers_latent(rng):
    tv = _tv(rng)
    w = np.array([0.7, -1.3])
    n = np.full(3, 1e6)
    f = (np.repeat(n, 2) * (tv.t_matrix @ w)).reshape(3, 2)
    got = extract_ivector(BwStats(n, f), tv).vector
    assert np.linalg.norm(got - w) / np.linalg.norm(w) < 0.01


def test_ivector_deterministic_and_linear_in_f(rng):
    tv = _tv(rng)
    n = rng.uniform(1, 50, 3)
    f1, f2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    e1 = extract_ivector(BwStats(n, f1), tv).vector
    assert np.array_equal(e1, extract_ivector(BwStats(n, f1), tv).vector)
    e2 = extract_ivector(BwStats(n, f2), tv).vector
    e12 = extract_ivector(BwStats(n, 2.0 * f1 - 3.0 * f2), tv).vector
    assert np.allclose(e12, 2.0 * e1 - 3.0 * e2, atol=1e-10)


def test_ivector_dimension_mismatch(rng):
    with pytest.raises(DataError):
        extract_ivector(BwStats(np.ones(2), np.ones((2, 2))), _tv(rng))


# averaging ------------------------------------------------------------------

def test_average_single_is_identity(rng):
    v = rng.standard_normal(5)
    assert np.array_equal(average_embeddings([Embedding(v, "A")]).vector, v)


def test_average_symmetric_pair(rng):
    v = rng.standard_normal(5)
    assert np.allclose(average_embeddings([Embedding(v, "A"), Embedding(-v, "A")]).vector, 0)


def test_average_28_matches_reordered_sum(rng):
    vs = rng.standard_normal((28, 6))
    got = average_embeddings([Embedding(v, "B") for v in vs]).vector
    ref = np.array([math.fsum(vs[::-1, k]) / 28 for k in range(6)])
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_average_errors(rng):
    with pytest.raises(DataError):
        average_embeddings([])
    with pytest.raises(DataError, match="mixed"):
        average_embeddings([Embedding(np.ones(2), "A"), Embedding(np.ones(2), "B")])
