"""Multiple instance pseudo label generator: MLP scorer, MIL ranking loss and Stage-I training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from mist.core import HyperParams, VideoRecord
from mist.dataio import FeatureSequence, ScoreSeries, read_feature_file, select
from mist.errors import ShapeError, ValidationError
from mist.sampling import SPARSE_CONTINUOUS, bag_indices

log = logging.getLogger(__name__)

HIDDEN_UNITS = (512, 32)


def _dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    # inverted dropout, so eval mode needs no rescaling
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class PseudoLabelGenerator(nn.Module):
    """D -> 512 -> 32 -> 1 MLP; ReLU after the first layer, sigmoid after the last."""

    def __init__(self, feature_dim: int, dropout_p: float = 0.6, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.dropout_p = dropout_p
        self.fc1 = nn.Linear(feature_dim, HIDDEN_UNITS[0])
        self.fc2 = nn.Linear(HIDDEN_UNITS[0], HIDDEN_UNITS[1])
        self.fc3 = nn.Linear(HIDDEN_UNITS[1], 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2, self.fc3):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.uniform_(-bound, bound, generator=g)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Per-clip scores in (0, 1); ``x`` is (..., D), output is (...)."""
        if x.shape[-1] != self.feature_dim:
            raise ShapeError(f"expected feature dim {self.feature_dim}, got {x.shape[-1]}", "features")
        p = self.dropout_p if self.training else 0.0
        h = _dropout(torch.relu(self.fc1(x)), p, generator)
        h = _dropout(self.fc2(h), p, generator)
        return torch.sigmoid(self.fc3(h)).squeeze(-1)


@dataclass
class SubBagScores:
    instance: torch.Tensor  # (..., L, T)
    pooled: torch.Tensor  # (..., L)


def generator_forward(
    features: torch.Tensor | np.ndarray,
    model: PseudoLabelGenerator,
    training: bool = False,
    seed: int | None = None,
) -> SubBagScores:
    """Score bags of shape (B, L, T, D) and average-pool each sub-bag over T."""
    x = torch.as_tensor(features, dtype=next(model.parameters()).dtype)
    if x.ndim < 3:
        raise ShapeError(f"expected (..., L, T, D) features, got shape {tuple(x.shape)}", "features")
    generator = torch.Generator().manual_seed(seed) if seed is not None else None
    was_training = model.training
    model.train(training)
    try:
        instance = model(x, generator)
    finally:
        model.train(was_training)
    return SubBagScores(instance, instance.mean(dim=-1))


def mil_ranking_loss(
    pooled_abnormal: torch.Tensor,
    pooled_normal: torch.Tensor,
    epsilon: float = 1.0,
    lam: float = 0.01,
) -> torch.Tensor:
    """Hinge between the top abnormal and top normal sub-bag plus sparsity on the abnormal bag.

    ``(epsilon - max S_a + max S_n)_+ + lam / L * sum S_a``, taken over the
    last axis; leading axes are independent (abnormal, normal) pairs.
    """
    s_a = torch.as_tensor(pooled_abnormal)
    s_n = torch.as_tensor(pooled_normal)
    if s_a.numel() == 0 or s_n.numel() == 0 or s_a.shape[-1] == 0:
        raise ValidationError("empty sub-bag score vector", "scores")
    hinge = torch.relu(epsilon - s_a.max(dim=-1).values + s_n.max(dim=-1).values)
    sparsity = lam * s_a.mean(dim=-1)
    return hinge + sparsity


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": len(self.losses), "loss": self.losses}


def load_features(records: list[VideoRecord]) -> dict[str, np.ndarray]:
    feats = {}
    for rec in records:
        try:
            seq = read_feature_file(rec.feature_path, rec.video_id)
        except FileNotFoundError:
            raise FileNotFoundError(f"feature file for {rec.video_id} not found: {rec.feature_path}") from None
        if seq.num_clips != rec.num_clips:
            raise ValidationError(
                f"{rec.video_id}: manifest says {rec.num_clips} clips, feature file has {seq.num_clips}",
                "num_clips",
            )
        feats[rec.video_id] = seq.data
    return feats


def _bags(records, feats, hp: HyperParams, sampling: str) -> np.ndarray:
    out = []
    for rec in records:
        index, _ = bag_indices(feats[rec.video_id].shape[0], hp.L, hp.T, sampling)
        out.append(feats[rec.video_id][index])
    return np.stack(out)


def _draw(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size=size, replace=size > n)


def train_generator(
    records: list[VideoRecord],
    hp: HyperParams,
    seed: int | None = None,
    sampling: str = SPARSE_CONTINUOUS,
    features: dict[str, np.ndarray] | None = None,
) -> tuple[PseudoLabelGenerator, TrainLog]:
    """Stage I: fit the generator on the training split with bag-level labels only."""
    seed = hp.seed if seed is None else seed
    train = select(records, split="train")
    abnormal = select(train, label=1)
    normal = select(train, label=0)
    if not abnormal:
        raise ValidationError("no abnormal training videos; cannot train the generator", "manifest")
    if not normal:
        raise ValidationError("no normal training videos; cannot train the generator", "manifest")
    if features is None:
        features = load_features(abnormal + normal)

    bags_a = torch.from_numpy(_bags(abnormal, features, hp, sampling))
    bags_n = torch.from_numpy(_bags(normal, features, hp, sampling))
    dim = bags_a.shape[-1]

    torch_gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = PseudoLabelGenerator(dim, hp.dropout_p, seed)
    optimizer = torch.optim.Adagrad(model.parameters(), lr=hp.gen_lr)
    model.train()
    pairs = min(hp.gen_batch_abnormal, hp.gen_batch_normal)
    train_log = TrainLog()
    for it in range(hp.gen_iters):
        idx_a = _draw(rng, len(abnormal), hp.gen_batch_abnormal)
        idx_n = _draw(rng, len(normal), hp.gen_batch_normal)
        batch = torch.cat([bags_a[idx_a], bags_n[idx_n]])
        pooled = model(batch, torch_gen).mean(dim=-1)
        s_a, s_n = pooled[: len(idx_a)], pooled[len(idx_a) :]
        loss = mil_ranking_loss(s_a[:pairs], s_n[:pairs], hp.epsilon, hp.lambda_).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        train_log.losses.append(float(loss.detach()))
        if (it + 1) % 50 == 0:
            log.info("generator iter %d loss %.4f", it + 1, train_log.losses[-1])
    model.eval()
    return model, train_log


@torch.no_grad()
def score_features(model: PseudoLabelGenerator, data: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        return model(torch.as_tensor(data, dtype=torch.float32)).numpy().astype(np.float32)
    finally:
        model.train(was_training)


def score_video(model: PseudoLabelGenerator, seq: FeatureSequence) -> ScoreSeries:
    """Per-clip anomaly scores with dropout disabled."""
    if seq.dim != model.feature_dim:
        raise ShapeError(f"feature dim {seq.dim} does not match generator dim {model.feature_dim}", "features")
    return ScoreSeries(seq.video_id, score_features(model, seq.data))


def save_generator(
    model: PseudoLabelGenerator, path: str | Path, hp: HyperParams, seed: int, iterations: int, **extra
) -> None:
    path = Path(path)
    torch.save(model.state_dict(), path)
    sidecar = {
        "feature_dim": model.feature_dim,
        "hp": hp.to_dict(),
        "seed": seed,
        "iterations": iterations,
        **extra,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_generator(path: str | Path) -> tuple[PseudoLabelGenerator, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise FileNotFoundError(f"generator checkpoint {path} (or its .json sidecar) not found")
    meta = json.loads(sidecar_path.read_text())
    model = PseudoLabelGenerator(meta["feature_dim"], meta["hp"]["dropout_p"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta
