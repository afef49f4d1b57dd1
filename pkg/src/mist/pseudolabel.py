"""Refining generator scores into soft clip-level pseudo labels."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mist.core import HyperParams, VideoRecord
from mist.dataio import ScoreSeries, read_feature_file, read_score_file, select, write_score_file
from mist.errors import ValidationError
from mist.milgen import PseudoLabelGenerator, score_video

log = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-8


@dataclass
class PseudoLabelSeries:
    video_id: str
    labels: np.ndarray
    degenerate: bool = False
    provenance: dict = field(default_factory=dict)


def smooth(scores: np.ndarray, k: int) -> np.ndarray:
    """Centered moving average of half-width ``k``.

    Windows are truncated at the sequence ends and divided by their actual
    length, so a constant series stays constant.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValidationError("empty score series", "scores")
    if k < 0:
        raise ValidationError(f"must be >= 0, got {k}", "k")
    if k == 0:
        return s.copy()
    n = s.size
    window = np.ones(2 * k + 1)
    sums = np.convolve(s, window, mode="full")[k : k + n]
    counts = np.convolve(np.ones(n), window, mode="full")[k : k + n]
    # rounding can leak a few ulps outside the input range
    return np.clip(sums / counts, s.min(), s.max())


def minmax(scores: np.ndarray) -> tuple[np.ndarray, bool]:
    """Rescale to [0, 1]. Returns ``(values, degenerate)``; a flat input maps to zeros."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    lo, hi = s.min(), s.max()
    if hi - lo < DEGENERATE_RANGE:
        return np.zeros_like(s), True
    return (s - lo) / (hi - lo), False


def refine(scores: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    return minmax(smooth(scores, k))


def label_path(label_dir: str | Path, video_id: str) -> Path:
    return Path(label_dir) / f"{video_id}.label"


def write_pseudo_labels(series: PseudoLabelSeries, label_dir: str | Path) -> Path:
    path = label_path(label_dir, series.video_id)
    write_score_file(ScoreSeries(series.video_id, series.labels), path)
    sidecar = {"degenerate": series.degenerate, **series.provenance}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def read_pseudo_labels(label_dir: str | Path, rec: VideoRecord) -> PseudoLabelSeries:
    path = label_path(label_dir, rec.video_id)
    if not path.exists():
        raise FileNotFoundError(f"missing pseudo label file for {rec.video_id}: {path}")
    series = read_score_file(path, rec.video_id, expected_len=rec.num_clips)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return PseudoLabelSeries(rec.video_id, series.scores, bool(meta.pop("degenerate", False)), meta)


def generate_pseudo_labels(
    model: PseudoLabelGenerator,
    records: list[VideoRecord],
    hp: HyperParams,
    out_dir: str | Path | None = None,
    checkpoint_id: str = "",
) -> dict[str, np.ndarray]:
    """Label every training clip: refined generator scores for abnormal videos, zeros for normal ones.

    Abnormal-video labels are also written to ``out_dir`` when given.
    """
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    labels: dict[str, np.ndarray] = {}
    for rec in select(records, split="train"):
        if not rec.is_abnormal:
            labels[rec.video_id] = np.zeros(rec.num_clips, dtype=np.float32)
            continue
        try:
            seq = read_feature_file(rec.feature_path, rec.video_id)
        except FileNotFoundError:
            raise FileNotFoundError(f"feature file for {rec.video_id} not found: {rec.feature_path}") from None
        values, degenerate = refine(score_video(model, seq).scores, hp.k)
        if degenerate:
            log.warning("%s: generator scores are flat; assigning all-zero pseudo labels", rec.video_id)
        series = PseudoLabelSeries(
            rec.video_id,
            values.astype(np.float32),
            degenerate,
            {"generator_checkpoint": checkpoint_id, "k": hp.k},
        )
        labels[rec.video_id] = series.labels
        if out_dir is not None:
            write_pseudo_labels(series, out_dir)
    return labels


def load_label_map(records: list[VideoRecord], label_dir: str | Path) -> dict[str, np.ndarray]:
    """Stage-II targets for the training split from a pseudo label directory."""
    labels = {}
    for rec in select(records, split="train"):
        if rec.is_abnormal:
            labels[rec.video_id] = read_pseudo_labels(label_dir, rec).labels
        else:
            labels[rec.video_id] = np.zeros(rec.num_clips, dtype=np.float32)
    return labels
