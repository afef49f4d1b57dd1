"""Bag construction from clip sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mist.errors import ValidationError

SPARSE_CONTINUOUS = "sparse-continuous"
UNIFORM = "uniform"
SAMPLING_MODES = (SPARSE_CONTINUOUS, UNIFORM)


@dataclass
class BagSample:
    video_id: str
    subbags: np.ndarray  # (L, T, D)
    start_indices: np.ndarray  # (L,)


def _check_positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ValidationError(f"must be >= 1, got {value}", name)


def sparse_continuous_starts(n: int, L: int, T: int) -> np.ndarray:
    """Start indices of ``L`` windows of ``T`` consecutive clips spread evenly over ``n`` clips.

    ``start_l = round(l * (n' - T) / max(L - 1, 1))`` with ``n' = max(n, T)``,
    rounding halves up. Windows overlap when the video is shorter than ``L * T``.
    """
    _check_positive(N=n, L=L, T=T)
    span = max(n, T) - T
    denom = max(L - 1, 1)
    l = np.arange(L, dtype=np.int64)
    # floor(x + 1/2) in integer arithmetic
    return (2 * l * span + denom) // (2 * denom)


def uniform_segment_starts(n: int, L: int) -> np.ndarray:
    """One clip per segment: ``start_l = floor(l * n / L)``."""
    _check_positive(N=n, L=L)
    return np.arange(L, dtype=np.int64) * n // L


def pad_to_length(data: np.ndarray, T: int) -> np.ndarray:
    """Repeat the final row until ``data`` has at least ``T`` rows."""
    n = data.shape[0]
    if n >= T:
        return data
    return np.concatenate([data, np.repeat(data[-1:], T - n, axis=0)], axis=0)


def gather_subbags(data: np.ndarray, starts: np.ndarray, T: int, video_id: str = "") -> BagSample:
    """Stack ``data[start : start + T]`` for every start into an (L, T, ...) array."""
    _check_positive(T=T)
    data = pad_to_length(np.asarray(data), T)
    starts = np.asarray(starts, dtype=np.int64)
    n = data.shape[0]
    if starts.size and (starts.min() < 0 or starts.max() > n - T):
        raise IndexError(f"sub-bag start out of range [0, {n - T}]: {starts.tolist()}")
    index = starts[:, None] + np.arange(T)[None, :]
    return BagSample(video_id, data[index], starts)


def bag_indices(n: int, L: int, T: int, mode: str = SPARSE_CONTINUOUS) -> tuple[np.ndarray, int]:
    """Clip index grid (L', T') for a bag under ``mode``, plus the effective T'.

    ``uniform`` draws ``L * T`` single clips so both modes look at the same
    number of clips per bag.
    """
    if mode == SPARSE_CONTINUOUS:
        starts = sparse_continuous_starts(n, L, T)
        width = T
    elif mode == UNIFORM:
        starts = uniform_segment_starts(n, L * T)
        width = 1
    else:
        raise ValidationError(f"unknown sampling mode {mode!r}; choose from {SAMPLING_MODES}", "sampling")
    index = starts[:, None] + np.arange(width)[None, :]
    # padded positions map onto the last real clip
    return np.minimum(index, n - 1), width


def make_bag(data: np.ndarray, L: int, T: int, mode: str = SPARSE_CONTINUOUS, video_id: str = "") -> BagSample:
    n = data.shape[0]
    if mode == SPARSE_CONTINUOUS:
        return gather_subbags(data, sparse_continuous_starts(n, L, T), T, video_id)
    index, _ = bag_indices(n, L, T, mode)
    return BagSample(video_id, np.asarray(data)[index], index[:, 0])
