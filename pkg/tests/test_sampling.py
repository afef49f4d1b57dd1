import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mist.sampling import bag_indices, gather_subbags, make_bag, sparse_continuous_starts, uniform_segment_starts


def test_tiling_96_clips():
    assert sparse_continuous_starts(96, 32, 3).tolist() == list(range(0, 96, 3))


@pytest.mark.parametrize("L", [1, 2, 5, 32])
def test_single_window(L):
    assert sparse_continuous_starts(3, L, 3).tolist() == [0] * L


def test_rounding_rule_short_video():
    # 7/3 * l = 0, 2.33, 4.67, 7
    assert sparse_continuous_starts(10, 4, 3).tolist() == [0, 2, 5, 7]


def test_round_half_up():
    # span 3 over 2 gaps: 1.5 rounds up to 2
    assert sparse_continuous_starts(5, 3, 2).tolist() == [0, 2, 3]


def test_gather_disjoint():
    data = np.arange(12).reshape(6, 2)
    bag = gather_subbags(data, [0, 3], 3)
    assert bag.subbags.shape == (2, 3, 2)
    np.testing.assert_array_equal(bag.subbags[0], data[0:3])
    np.testing.assert_array_equal(bag.subbags[1], data[3:6])


def test_gather_pads_short_video():
    data = np.array([[1.0], [2.0]])
    bag = gather_subbags(data, sparse_continuous_starts(2, 1, 3), 3)
    assert bag.subbags[0, :, 0].tolist() == [1.0, 2.0, 2.0]


def test_gather_overlap(rng):
    data = rng.standard_normal((4, 5))
    bag = gather_subbags(data, [0, 1], 3)
    for l, start in enumerate([0, 1]):
        for t in range(3):
            np.testing.assert_array_equal(bag.subbags[l, t], data[start + t])


def test_gather_out_of_bounds():
    with pytest.raises(IndexError):
        gather_subbags(np.zeros((5, 1)), [0, 3], 3)


def test_uniform_identity():
    assert uniform_segment_starts(32, 32).tolist() == list(range(32))


def test_uniform_even():
    assert uniform_segment_starts(64, 32).tolist() == list(range(0, 64, 2))


def test_uniform_floor_rule():
    # floor(10 l / 4) = 0, 2.5, 5, 7.5
    assert uniform_segment_starts(10, 4).tolist() == [0, 2, 5, 7]


@given(st.integers(1, 200), st.integers(1, 64), st.integers(1, 9))
def test_starts_properties(n, L, T):
    starts = sparse_continuous_starts(n, L, T)
    assert starts.shape == (L,)
    assert starts[0] == 0
    assert np.all(np.diff(starts) >= 0)
    assert starts.max() <= max(n, T) - T
    if L > 1:
        assert starts[-1] == max(n, T) - T


@given(st.integers(1, 16), st.integers(1, 8))
def test_exact_tiling_when_n_is_l_times_t(L, T):
    starts = sparse_continuous_starts(L * T, L, T)
    covered = np.concatenate([np.arange(s, s + T) for s in starts])
    assert covered.tolist() == list(range(L * T))


@given(st.integers(1, 40))
def test_t1_agrees_with_uniform_one_clip_per_segment(L):
    # with T=1 the two rules coincide when every segment is a single clip (N = L)
    np.testing.assert_array_equal(sparse_continuous_starts(L, L, 1), uniform_segment_starts(L, L))


def test_t1_rules_differ_on_longer_videos():
    # sparse windows always reach the last clip; uniform segments start at their left edge
    assert sparse_continuous_starts(4, 2, 1).tolist() == [0, 3]
    assert uniform_segment_starts(4, 2).tolist() == [0, 2]


def test_uniform_mode_matches_clip_budget(rng):
    data = rng.standard_normal((40, 3))
    sparse = make_bag(data, 4, 3, "sparse-continuous")
    uniform = make_bag(data, 4, 3, "uniform")
    assert sparse.subbags.shape == (4, 3, 3)
    assert uniform.subbags.shape == (12, 1, 3)
    index, width = bag_indices(40, 4, 3, "uniform")
    assert width == 1
    assert index[:, 0].tolist() == uniform_segment_starts(40, 12).tolist()


def test_bag_indices_clamp_padding():
    index, width = bag_indices(2, 4, 3, "sparse-continuous")
    assert width == 3
    assert index.max() == 1
