import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tristatekv.attn_stats import AttnWindow
from tristatekv.hh_scoring import DEFAULT_GAMMA, ScoreSmoother, group_map_for, hh_scores, top_b
from tristatekv.oracle import oracle_topk


def test_constant_attention():
    s = hh_scores(np.full((2, 3, 5), 0.2))
    np.testing.assert_allclose(s.scores, 0.2, rtol=1e-15)


def test_gamma_zero_is_mean(rng):
    w = rng.random((3, 4, 6))
    s = hh_scores(w, gamma=0.0)
    np.testing.assert_array_equal(s.scores, w.reshape(-1, 6).mean(axis=0))


def test_hand_example():
    w = np.array([[[0.2], [0.4]]])
    s = hh_scores(AttnWindow(5, w), gamma=DEFAULT_GAMMA)
    assert s.layer_id == 5
    assert s.scores[0] == pytest.approx(2.9381, rel=1e-12)


def test_group_map():
    assert group_map_for(8, 2) == (0, 0, 0, 0, 1, 1, 1, 1)
    assert group_map_for(4, 4) == (0, 1, 2, 3)


def test_mha_group_size_one_is_head_average(rng):
    w = rng.random((4, 5, 7))
    s = hh_scores(w, gamma=3.0, group_map=group_map_for(4, 4)).scores
    per_head = [w[h].mean(0) + 3.0 * w[h].var(0) for h in range(4)]
    np.testing.assert_allclose(s, np.mean(per_head, axis=0), rtol=1e-14)


def test_gqa_groups_average(rng):
    w = rng.random((4, 3, 6))
    s = hh_scores(w, gamma=2.0, group_map=(0, 0, 1, 1)).scores
    g0 = w[:2].reshape(-1, 6)
    g1 = w[2:].reshape(-1, 6)
    ref = (g0.mean(0) + 2 * g0.var(0) + g1.mean(0) + 2 * g1.var(0)) / 2
    np.testing.assert_allclose(s, ref, rtol=1e-14)


def test_group_map_length_checked():
    with pytest.raises(ValueError):
        hh_scores(np.ones((4, 2, 3)), group_map=(0, 1))


def test_permutation_equivariance(rng):
    w = rng.random((2, 4, 9))
    perm = rng.permutation(9)
    a = hh_scores(w).scores
    b = hh_scores(w[:, :, perm]).scores
    np.testing.assert_array_equal(a[perm], b)


def test_scaling_gamma_zero(rng):
    w = rng.random((2, 4, 20))
    a = hh_scores(w, gamma=0.0).scores
    b = hh_scores(w * 4.0, gamma=0.0).scores
    np.testing.assert_array_equal(b, a * 4.0)
    for k in range(21):
        assert set(top_b(a, k).tolist()) == set(top_b(b, k).tolist())


def test_top_b_examples():
    assert set(top_b(np.array([0.1, 0.9, 0.5]), 2).tolist()) == {1, 2}
    assert top_b(np.array([0.1, 0.9, 0.5]), 0).size == 0
    assert top_b(np.ones(6), 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        top_b(np.ones(3), 4)
    with pytest.raises(ValueError):
        top_b(np.ones(3), -1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.data())
def test_top_b_matches_oracle_with_ties(vals, data):
    s = np.array(vals, dtype=np.float64) / 4
    b = data.draw(st.integers(0, len(s)))
    assert set(top_b(s, b).tolist()) == oracle_topk(s.tolist(), b)


def test_smoother_identity_at_zero():
    sm = ScoreSmoother(0.0)
    s = np.array([1.0, 2.0])
    assert sm(s, np.array([0, 1])) is s


def test_smoother_tracks_positions():
    sm = ScoreSmoother(0.5)
    sm(np.array([1.0, 3.0]), np.array([10, 11]))
    out = sm(np.array([3.0, 5.0]), np.array([11, 12]))
    assert out.tolist() == [3.0, 5.0]  # 0.5*3 + 0.5*3, new key unchanged
    with pytest.raises(ValueError):
        ScoreSmoother(1.0)
