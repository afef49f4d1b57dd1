import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mist.core import HyperParams
from mist.dataio import select
from mist.milgen import train_generator
from mist.pseudolabel import (
    generate_pseudo_labels,
    label_path,
    load_label_map,
    minmax,
    read_pseudo_labels,
    refine,
    smooth,
)


def test_smooth_constant():
    np.testing.assert_allclose(smooth([0.5] * 10, 5), [0.5] * 10, atol=1e-15)


def test_smooth_k0_identity(rng):
    s = rng.random(9)
    np.testing.assert_array_equal(smooth(s, 0), s)


def test_smooth_impulse():
    s = np.zeros(21)
    s[10] = 1.0
    expected = np.zeros(21)
    expected[5:16] = 1 / 11
    np.testing.assert_allclose(smooth(s, 5), expected, atol=1e-15)


def test_smooth_truncated_boundary():
    # windows at the ends are shorter and renormalised
    out = smooth([1.0, 0.0, 0.0, 0.0], 1)
    np.testing.assert_allclose(out, [0.5, 1 / 3, 0.0, 0.0], atol=1e-15)


def windowed_mean_oracle(s, k):
    n = len(s)
    return np.array([np.mean(s[max(0, i - k) : min(n - 1, i + k) + 1]) for i in range(n)])


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), st.integers(0, 8))
def test_smooth_matches_loop_oracle(s, k):
    np.testing.assert_allclose(smooth(s, k), windowed_mean_oracle(s, k), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), st.integers(0, 8))
def test_smooth_never_expands_range(s, k):
    out = smooth(s, k)
    assert out.min() >= s.min() and out.max() <= s.max()


def test_minmax_example():
    values, degenerate = minmax([0.2, 0.5, 0.8])
    np.testing.assert_allclose(values, [0, 0.5, 1], atol=1e-15)
    assert not degenerate


def test_minmax_constant():
    values, degenerate = minmax([0.3] * 5)
    assert degenerate
    assert values.tolist() == [0.0] * 5


def test_minmax_random_order_preserved(rng):
    s = rng.random(20)
    values, _ = minmax(s)
    assert values.min() == 0.0 and values.max() == 1.0
    np.testing.assert_array_equal(np.argsort(values, kind="stable"), np.argsort(s, kind="stable"))


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-3, 3)))
def test_minmax_idempotent(s):
    once, degenerate = minmax(s)
    if degenerate:
        return
    twice, _ = minmax(once)
    np.testing.assert_allclose(twice, once, atol=1e-12)


@given(
    arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)),
    st.integers(0, 6),
    st.floats(0.05, 50),
    st.floats(-10, 10),
)
def test_refine_affine_invariant(s, k, a, b):
    base, deg = refine(s, k)
    moved, deg2 = refine(a * s + b, k)
    if deg or deg2 or np.ptp(smooth(s, k)) < 1e-6:
        return
    np.testing.assert_allclose(moved, base, atol=1e-9)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1)), st.integers(0, 6))
def test_refined_labels_in_unit_interval(s, k):
    values, _ = refine(s, k)
    assert np.all((values >= 0) & (values <= 1))


def test_increasing_scores_give_increasing_labels():
    values, _ = refine(np.linspace(0.1, 0.9, 12), 0)
    assert values[0] == 0 and values[-1] == 1
    assert np.all(np.diff(values) > 0)


HP = HyperParams(gen_iters=60, gen_batch_abnormal=8, gen_batch_normal=8, L=8, T=3)


@pytest.fixture(scope="module")
def labels_on_disk(tiny_synth, tmp_path_factory):
    model, _ = train_generator(tiny_synth.records, HP, seed=0)
    out = tmp_path_factory.mktemp("labels")
    return generate_pseudo_labels(model, tiny_synth.records, HP, out, "gen.pt"), out


def test_normal_videos_get_zero_labels(tiny_synth, labels_on_disk):
    labels, out = labels_on_disk
    for rec in select(tiny_synth.records, split="train", label=0):
        assert labels[rec.video_id].tolist() == [0.0] * rec.num_clips
        assert not label_path(out, rec.video_id).exists()


def test_abnormal_labels_persisted(tiny_synth, labels_on_disk):
    labels, out = labels_on_disk
    for rec in select(tiny_synth.records, split="train", label=1):
        series = read_pseudo_labels(out, rec)
        np.testing.assert_array_equal(series.labels, labels[rec.video_id])
        assert series.provenance == {"generator_checkpoint": "gen.pt", "k": 5}
        assert series.labels.min() == 0.0 and series.labels.max() == 1.0
    assert set(load_label_map(tiny_synth.records, out)) == {
        r.video_id for r in select(tiny_synth.records, split="train")
    }


def test_pseudo_labels_highlight_anomalies(tiny_synth, labels_on_disk):
    labels, _ = labels_on_disk
    for rec in select(tiny_synth.records, split="train", label=1):
        (start, end), = tiny_synth.ground_truth[rec.video_id].intervals
        inside = np.zeros(rec.num_clips, bool)
        inside[start // rec.frames_per_clip : end // rec.frames_per_clip] = True
        assert labels[rec.video_id][inside].mean() > labels[rec.video_id][~inside].mean()


def test_missing_feature_file_names_video(tiny_synth, tmp_path):
    rec = select(tiny_synth.records, split="train", label=1)[0]
    broken = type(rec)(rec.video_id, 1, "train", rec.num_clips, rec.frames_per_clip, tmp_path / "nope.feat")
    model, _ = train_generator(tiny_synth.records, HP.replace(gen_iters=1), seed=0)
    with pytest.raises(FileNotFoundError, match=rec.video_id):
        generate_pseudo_labels(model, [broken], HP)


def test_missing_label_file(tiny_synth, tmp_path):
    rec = select(tiny_synth.records, split="train", label=1)[0]
    with pytest.raises(FileNotFoundError, match=rec.video_id):
        read_pseudo_labels(tmp_path, rec)
