"""Frame-level ROC AUC, false alarm rate and score gap."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from mist.dataio import FrameGroundTruth, ScoreSeries
from mist.errors import AlignmentError, UndefinedMetricError, ValidationError

FAR_SUBSETS = ("all", "normal", "abnormal")


def expand_to_frames(series: ScoreSeries | np.ndarray, frames_per_clip: int, total_frames: int) -> np.ndarray:
    """Give frame ``f`` the score of clip ``f // frames_per_clip``, clamped to the last clip."""
    scores = series.scores if isinstance(series, ScoreSeries) else np.asarray(series, dtype=np.float64)
    n = scores.size
    covered = n * frames_per_clip
    if abs(covered - total_frames) > frames_per_clip:
        raise AlignmentError(
            f"{n} clips x {frames_per_clip} frames cannot cover {total_frames} frames", "total_frames"
        )
    clip = np.minimum(np.arange(total_frames) // frames_per_clip, n - 1)
    return scores[clip].astype(np.float64)


def _check_binary(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.size != labels.size:
        raise ValidationError(f"{scores.size} scores vs {labels.size} labels", "labels")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("ROC AUC needs both anomalous and normal frames")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Rank-sum (Mann-Whitney) AUC; tied scores count one half."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Mean over every (positive, negative) pair of 1 / 0.5 / 0 for win / tie / loss."""
    scores, labels = _check_binary(scores, labels)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for s in pos:
        for t in neg:
            if s > t:
                wins += 1.0
            elif s == t:
                wins += 0.5
    return wins / (pos.size * neg.size)


def pooled_frames(
    frame_scores: dict[str, np.ndarray], ground_truth: dict[str, FrameGroundTruth]
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-video frame scores and labels in sorted video-id order."""
    scores, labels = [], []
    for vid in sorted(frame_scores):
        if vid not in ground_truth:
            raise ValidationError(f"no ground truth for {vid}", "ground_truth")
        gt_labels = ground_truth[vid].frame_labels()
        if gt_labels.size != frame_scores[vid].size:
            raise AlignmentError(
                f"{vid}: {frame_scores[vid].size} frame scores vs {gt_labels.size} ground-truth frames",
                "total_frames",
            )
        scores.append(frame_scores[vid])
        labels.append(gt_labels)
    if not scores:
        raise UndefinedMetricError("no videos to evaluate")
    return np.concatenate(scores), np.concatenate(labels)


def frame_auc(frame_scores: dict[str, np.ndarray], ground_truth: dict[str, FrameGroundTruth]) -> float:
    """Micro-averaged AUC over all frames of all videos."""
    return roc_auc(*pooled_frames(frame_scores, ground_truth))


def far(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of normal frames (label 0) scored at or above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}", "far_threshold")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    normal = ~np.asarray(labels).reshape(-1).astype(bool)
    if not normal.any():
        raise UndefinedMetricError("false alarm rate needs at least one normal frame")
    return float(np.count_nonzero(scores[normal] >= threshold) / np.count_nonzero(normal))


def score_gap(scores, labels) -> float:
    """Mean score on anomalous frames minus mean score on normal frames."""
    scores, labels = _check_binary(scores, labels)
    return float(scores[labels].mean() - scores[~labels].mean())


@dataclass
class EvalReport:
    frame_auc: float
    far: float
    score_gap: float
    threshold: float
    far_subset: str
    num_videos: int
    num_frames: int
    per_video: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frame_auc": self.frame_auc,
            "far": self.far,
            "score_gap": self.score_gap,
            "threshold": self.threshold,
            "far_subset": self.far_subset,
            "num_videos": self.num_videos,
            "num_frames": self.num_frames,
            "per_video": self.per_video,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def evaluate(
    scores: dict[str, ScoreSeries | np.ndarray],
    ground_truth: dict[str, FrameGroundTruth],
    frames_per_clip: dict[str, int] | int,
    threshold: float = 0.5,
    far_subset: str = "all",
) -> EvalReport:
    """Expand clip scores to frames and compute AUC, FAR and score gap over the given videos.

    ``far_subset`` picks the videos FAR is computed on: every evaluated
    video, only those with no anomalous frames, or only those with some.
    """
    if far_subset not in FAR_SUBSETS:
        raise ValidationError(f"far_subset must be one of {FAR_SUBSETS}", "far_subset")
    frame_scores = {}
    for vid, series in scores.items():
        if vid not in ground_truth:
            raise ValidationError(f"no ground truth for {vid}", "ground_truth")
        fpc = frames_per_clip if isinstance(frames_per_clip, int) else frames_per_clip[vid]
        frame_scores[vid] = expand_to_frames(series, fpc, ground_truth[vid].total_frames)
    all_scores, all_labels = pooled_frames(frame_scores, ground_truth)

    per_video = {}
    far_scores, far_labels = [], []
    for vid in sorted(frame_scores):
        s = frame_scores[vid]
        lab = ground_truth[vid].frame_labels().astype(bool)
        abnormal = bool(lab.any())
        per_video[vid] = {
            "frames": int(s.size),
            "anomalous_frames": int(lab.sum()),
            "mean_score": float(s.mean()),
            "max_score": float(s.max()),
            "false_alarm_frames": int(np.count_nonzero(s[~lab] >= threshold)),
        }
        if far_subset == "all" or (far_subset == "abnormal") == abnormal:
            far_scores.append(s)
            far_labels.append(lab)
    if not far_scores:
        raise UndefinedMetricError(f"no {far_subset} videos to compute the false alarm rate on")
    return EvalReport(
        frame_auc=roc_auc(all_scores, all_labels),
        far=far(np.concatenate(far_scores), np.concatenate(far_labels), threshold),
        score_gap=score_gap(all_scores, all_labels),
        threshold=threshold,
        far_subset=far_subset,
        num_videos=len(frame_scores),
        num_frames=int(all_scores.size),
        per_video=per_video,
    )


def clip_labels(gt: FrameGroundTruth, num_clips: int, frames_per_clip: int) -> np.ndarray:
    """A clip is anomalous if any of its frames is."""
    frames = gt.frame_labels()
    labels = np.zeros(num_clips, dtype=np.int8)
    for i in range(num_clips):
        labels[i] = frames[i * frames_per_clip : (i + 1) * frames_per_clip].any()
    return labels
