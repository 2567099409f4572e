import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saliency_bci.attnet import NetConfig, attention_maps, init_params, zeros_like_params
from saliency_bci.errors import IndivisibleLength, InvalidSpec, LengthMismatch, NotRowStochastic
from saliency_bci.saliency import (
    PruneConfig,
    attention_output,
    attention_vector,
    attention_vectors,
    extract_saliency,
    interval_iou,
    prune_trial,
    prune_trialset,
    rank_segments,
    segment_means,
    select_segments,
)
from saliency_bci.trialio import Label, SynthSpec, Trial, TrialSet, generate_synthetic


def _trial(data):
    return Trial(np.asarray(data, float), 250.0, Label.LEFT, "s", "t")


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- examples


def test_identity_attention_is_uniform():
    np.testing.assert_allclose(attention_vector(np.eye(4)), 0.25)


def test_attention_vector_small_case():
    lam = np.array([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.2, 0.2, 0.6]])
    np.testing.assert_allclose(attention_vector(lam), [0.7 / 3, 1.7 / 3, 0.6 / 3])


def test_attention_vector_rejects_bad_rows():
    with pytest.raises(NotRowStochastic):
        attention_vector(np.array([[0.5, 0.4], [0.5, 0.5]]))
    with pytest.raises(NotRowStochastic):
        attention_vector(np.array([[1.5, -0.5], [0.5, 0.5]]))
    with pytest.raises(NotRowStochastic):
        attention_vector(np.ones((2, 3)) / 3)


def test_segment_ranking_example():
    A = np.array([0.1, 0.1, 0.3, 0.3, 0.05, 0.05, 0.05, 0.05]) / 1.0
    assert list(rank_segments(A, 4)) == [1, 0, 2, 3]
    assert select_segments(A, PruneConfig(4, 2)) == [0, 1]


def test_ties_go_to_lower_index():
    assert select_segments(np.full(12, 1 / 12), PruneConfig(4, 2)) == [0, 1]
    A = np.array([1, 1, 3, 3, 1, 1, 3, 3], float) / 16
    assert select_segments(A, PruneConfig(4, 1)) == [1]


def test_prune_example_keeps_temporal_order():
    data = np.arange(2 * 8, dtype=float).reshape(2, 8)
    A = np.array([0, 0, 1, 1, 0, 0, 2, 2], float) / 6
    res = prune_trial(_trial(data), A, PruneConfig(4, 2))
    assert res.kept_segments == (1, 3)
    assert res.kept_sample_ranges == ((2, 4), (6, 8))
    np.testing.assert_array_equal(res.pruned_trial.data, data[:, [2, 3, 6, 7]])
    assert res.pruned_trial.label is Label.LEFT


def test_prune_config_validation():
    with pytest.raises(InvalidSpec):
        PruneConfig(4, 0)
    with pytest.raises(InvalidSpec):
        PruneConfig(4, 5)
    with pytest.raises(IndivisibleLength):
        PruneConfig(3, 1).segment_length(10)
    assert PruneConfig(10, 4).kept_length(500) == 200
    assert PruneConfig(10, 4).ratio == 0.4


def test_prune_length_mismatch():
    with pytest.raises(LengthMismatch):
        prune_trial(_trial(np.zeros((2, 8))), np.full(6, 1 / 6), PruneConfig(2, 1))


def test_indivisible_length_in_extract():
    p = init_params(NetConfig(n_c=2), 0)
    with pytest.raises(IndivisibleLength):
        extract_saliency(p, _trial(np.zeros((2, 10))), PruneConfig(3, 1))


def test_interval_iou():
    assert interval_iou(((100, 200),), 100, 100) == 1.0
    assert interval_iou(((0, 100),), 100, 100) == 0.0
    assert interval_iou(((50, 150),), 100, 100) == pytest.approx(50 / 150)


# -- properties


@st.composite
def stochastic_matrices(draw):
    T = draw(st.integers(1, 24))
    z = draw(arrays(np.float64, (T, T), elements=st.floats(-30, 30)))
    return _softmax_rows(z)


@given(stochastic_matrices())
def test_attention_vector_sums_to_one(lam):
    A = attention_vector(lam)
    assert A.shape == (lam.shape[0],)
    assert np.all(A >= 0)
    assert abs(A.sum() - 1.0) <= 1e-9


@st.composite
def vector_and_config(draw):
    n = draw(st.integers(1, 12))
    seg = draw(st.integers(1, 6))
    r = draw(st.integers(1, n))
    A = draw(arrays(np.float64, (n * seg,), elements=st.floats(0, 1)))
    return A, PruneConfig(n, r)


@given(vector_and_config())
def test_selection_is_sorted_unique_and_of_length_r(case):
    A, cfg = case
    kept = select_segments(A, cfg)
    assert len(kept) == cfg.r
    assert all(a < b for a, b in zip(kept, kept[1:]))
    assert all(0 <= i < cfg.n for i in kept)


@given(vector_and_config())
def test_selection_grows_monotonically_with_r(case):
    A, cfg = case
    prev = set()
    for r in range(1, cfg.n + 1):
        now = set(select_segments(A, PruneConfig(cfg.n, r)))
        assert prev <= now
        prev = now


@given(vector_and_config())
def test_kept_segments_dominate_dropped(case):
    A, cfg = case
    means = segment_means(A, cfg.n)
    kept = select_segments(A, cfg)
    dropped = [i for i in range(cfg.n) if i not in kept]
    if dropped:
        assert means[kept].min() >= means[dropped].max()


@settings(max_examples=50)
@given(vector_and_config(), st.integers(1, 4), st.randoms(use_true_random=False))
def test_pruning_commutes_with_channel_permutation(case, n_c, rnd):
    A, cfg = case
    T = A.size
    data = np.arange(n_c * T, dtype=float).reshape(n_c, T)
    perm = list(range(n_c))
    rnd.shuffle(perm)
    a = prune_trial(_trial(data), A, cfg).pruned_trial.data
    b = prune_trial(_trial(data[perm]), A, cfg).pruned_trial.data
    np.testing.assert_array_equal(a[perm], b)


@given(vector_and_config())
def test_keeping_everything_is_identity(case):
    A, cfg = case
    data = np.random.default_rng(0).standard_normal((3, A.size))
    res = prune_trial(_trial(data), A, PruneConfig(cfg.n, cfg.n))
    assert res.pruned_trial.data.tobytes() == np.ascontiguousarray(data).tobytes()


def test_model_attention_is_channel_permutation_equivariant():
    cfg = NetConfig(n_c=4)
    p = init_params(cfg, 3)
    perm = [2, 0, 3, 1]
    permuted = replace(p, embed_kernels=p.embed_kernels[:, perm, :])
    x = np.random.default_rng(3).standard_normal((4, 20))
    np.testing.assert_allclose(attention_maps(p, x), attention_maps(permuted, x[perm]), atol=1e-14)


def test_zero_model_selects_leading_segments():
    p = zeros_like_params(NetConfig(n_c=3))
    t = _trial(np.random.default_rng(0).standard_normal((3, 40)))
    out = attention_output(p, t)
    np.testing.assert_allclose(out.A, 1 / 40)
    assert extract_saliency(p, t, PruneConfig(8, 3)).kept_segments == (0, 1, 2)


def test_model_attention_rows_are_stochastic():
    p = init_params(NetConfig(n_c=3), 1)
    t = _trial(np.random.default_rng(1).standard_normal((3, 30)))
    out = attention_output(p, t)
    assert out.Lambda.shape[-2:] == (30, 30)
    np.testing.assert_allclose(out.Lambda.sum(axis=-1), 1.0, atol=1e-9)
    assert abs(out.A.sum() - 1.0) < 1e-9


def test_batched_vectors_match_single_trials():
    ts = generate_synthetic(SynthSpec(n_c=3, T=60, trials_per_class=3, salient_start=10, salient_len=20))
    p = init_params(NetConfig(n_c=3), 2)
    vecs = attention_vectors(p, ts, batch_size=4)
    assert vecs.shape == (6, 60)
    for t, v in zip(ts, vecs):
        np.testing.assert_allclose(v, attention_output(p, t).A, atol=1e-14)
    pruned = prune_trialset(ts, vecs, PruneConfig(6, 2))
    assert isinstance(pruned, TrialSet) and pruned.n_samples == 20
    assert [t.trial_id for t in pruned] == [t.trial_id for t in ts]
