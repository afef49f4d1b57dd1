"""Self-guided attention boosted feature encoder and Stage-II fine-tuning.

The encoder taps the 4th and 5th blocks of a 3D-conv backbone. Block-4
features go through ``F1`` (3x3x3 stride-2 conv + 1x1x1 conv to 2K
channels, both ReLU) to give the class-wise map ``M*``. ``F2`` (1x1x1 conv,
sigmoid) turns ``M*`` into the attention map ``A``, which re-weights block-5
features as ``M_A = M_b5 + A * M_b5``. ``F3`` (1x1x1 conv) turns ``M*`` into
``M``, whose pooled K-detector averages give the guided head's class
probabilities. The weighted-classification head is a linear layer over the
globally pooled ``M_A``.

Class index 0 is normal, 1 is abnormal.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mist.core import HyperParams, VideoRecord
from mist.dataio import ScoreSeries, read_clips, select
from mist.errors import ShapeError, ValidationError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DEFAULT_WIDTHS = (8, 16, 16, 32, 32)


@dataclass
class BackboneOutputs:
    m_b4: torch.Tensor  # (B, C4, t, h, w)
    m_b5: torch.Tensor  # (B, C5, t', h', w')


@dataclass
class SgaTensors:
    m_star_b4: torch.Tensor
    attention: torch.Tensor  # resized to M_b5's extent, 1 channel
    m_a: torch.Tensor
    m: torch.Tensor
    p_hat: torch.Tensor  # (B, 2)


@dataclass
class EncoderOutput:
    p: torch.Tensor  # (B, 2) from the weighted-classification head
    logits: torch.Tensor
    backbone: BackboneOutputs
    sga: SgaTensors | None = None

    @property
    def score(self) -> torch.Tensor:
        return self.p[:, 1]


class Backbone(nn.Module):
    """Anything that maps (B, C, F, H, W) clips to block-4 and block-5 feature maps.

    Pretrained C3D/I3D networks plug in by subclassing this and returning
    their 4th/5th block activations; set ``channels_b4``/``channels_b5``.
    """

    channels_b4: int
    channels_b5: int

    def forward(self, clips: torch.Tensor) -> BackboneOutputs:  # pragma: no cover - interface
        raise NotImplementedError


class ToyBackbone(Backbone):
    """Five conv blocks, each a 3x3x3 stride-2 convolution followed by ReLU."""

    def __init__(self, in_channels: int = 1, widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 5:
            raise ValidationError(f"need 5 block widths, got {len(widths)}", "widths")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        chans = (in_channels, *widths)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ReLU())
            for i in range(5)
        )
        self.channels_b4 = widths[3]
        self.channels_b5 = widths[4]

    def forward(self, clips: torch.Tensor) -> BackboneOutputs:
        if clips.ndim != 5 or clips.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, F, H, W) clips, got {tuple(clips.shape)}", "clips"
            )
        x = clips
        for block in self.blocks[:4]:
            x = block(x)
        m_b4 = x
        return BackboneOutputs(m_b4, self.blocks[4](m_b4))


class SelfGuidedAttention(nn.Module):
    def __init__(self, channels_b4: int, K: int = 8):
        super().__init__()
        self.K = K
        self.f1 = nn.Sequential(
            nn.Conv3d(channels_b4, channels_b4, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv3d(channels_b4, 2 * K, 1),
            nn.ReLU(),
        )
        self.f2 = nn.Sequential(nn.Conv3d(2 * K, 1, 1), nn.Sigmoid())
        self.f3 = nn.Conv3d(2 * K, 2 * K, 1)

    def forward(self, outs: BackboneOutputs, attention: torch.Tensor | None = None) -> SgaTensors:
        """``attention`` replaces F2's output when given (used to probe M_A's algebra)."""
        m_b4, m_b5 = outs.m_b4, outs.m_b5
        if m_b4.shape[1] != self.f1[0].in_channels:
            raise ShapeError(
                f"block-4 map has {m_b4.shape[1]} channels, SGA expects {self.f1[0].in_channels}", "m_b4"
            )
        m_star = self.f1(m_b4)
        a = self.f2(m_star) if attention is None else torch.as_tensor(attention, dtype=m_b5.dtype)
        if a.shape[2:] != m_b5.shape[2:]:
            a = F.interpolate(a, size=m_b5.shape[2:], mode="trilinear", align_corners=False)
        m_a = m_b5 + a * m_b5
        m = self.f3(m_star)
        return SgaTensors(m_star, a, m_a, m, class_pool(m, self.K).softmax(dim=1))


def class_pool(m: torch.Tensor, K: int) -> torch.Tensor:
    """Spatiotemporal mean, then mean over each class's K detector channels: (B, 2K, ...) -> (B, 2)."""
    pooled = m.flatten(2).mean(dim=2)
    return pooled.view(pooled.shape[0], 2, K).mean(dim=2)


class SgaEncoder(nn.Module):
    def __init__(
        self,
        backbone: Backbone | None = None,
        K: int = 8,
        use_sga: bool = True,
        in_channels: int = 1,
        widths: tuple[int, ...] = DEFAULT_WIDTHS,
    ):
        super().__init__()
        self.backbone = backbone if backbone is not None else ToyBackbone(in_channels, widths)
        self.K = K
        self.use_sga = use_sga
        self.sga = SelfGuidedAttention(self.backbone.channels_b4, K) if use_sga else None
        self.head_c = nn.Linear(self.backbone.channels_b5, 2)
        # symmetric start: both classes equally likely for every input
        nn.init.zeros_(self.head_c.weight)
        nn.init.zeros_(self.head_c.bias)

    def forward(self, clips: torch.Tensor, attention: torch.Tensor | None = None) -> EncoderOutput:
        outs = self.backbone(clips)
        sga = self.sga(outs, attention) if self.sga is not None else None
        fmap = sga.m_a if sga is not None else outs.m_b5
        logits = self.head_c(fmap.flatten(2).mean(dim=2))
        return EncoderOutput(logits.softmax(dim=1), logits, outs, sga)


def backbone_forward(clips, model: SgaEncoder | Backbone) -> BackboneOutputs:
    backbone = model.backbone if isinstance(model, SgaEncoder) else model
    return backbone(torch.as_tensor(clips, dtype=next(backbone.parameters()).dtype))


def sga_forward(outs: BackboneOutputs, model: SgaEncoder | SelfGuidedAttention, training: bool = False,
                seed: int | None = None, attention: torch.Tensor | None = None) -> SgaTensors:
    """Run the attention module on backbone outputs.

    The module is deterministic (no dropout), so ``training`` and ``seed``
    only exist for signature symmetry with the other forward functions.
    """
    sga = model.sga if isinstance(model, SgaEncoder) else model
    if sga is None:
        raise ValidationError("encoder was built without the attention module", "use_sga")
    return sga(outs, attention)


def weighted_ce(p_abnormal, y, w0: float = 1.2, w1: float = 0.8) -> torch.Tensor:
    """Class-weighted cross entropy, elementwise; ``y`` may be a soft target in [0, 1]."""
    p = torch.as_tensor(p_abnormal).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = torch.as_tensor(y, dtype=p.dtype)
    return -w0 * y * torch.log(p) - w1 * (1.0 - y) * torch.log1p(-p)


def encoder_loss(
    out: EncoderOutput, y: torch.Tensor, hp: HyperParams, use_hg: bool = True, reduction: str = "mean"
) -> torch.Tensor:
    """L1 (weighted-classification head) plus, with SGA and H_g enabled, L2 (guided head)."""
    per_clip = weighted_ce(out.p[:, 1], y, hp.w0, hp.w1)
    if use_hg and out.sga is not None:
        per_clip = per_clip + weighted_ce(out.sga.p_hat[:, 1], y, hp.w0, hp.w1)
    return per_clip.mean() if reduction == "mean" else per_clip.sum()


def build_encoder(hp: HyperParams, seed: int, in_channels: int = 1, widths=DEFAULT_WIDTHS,
                  disable_sga: bool = False) -> SgaEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SgaEncoder(K=hp.K, use_sga=not disable_sga, in_channels=in_channels, widths=tuple(widths))


def accumulate_gradients(
    model: SgaEncoder, clips: torch.Tensor, y: torch.Tensor, hp: HyperParams, use_hg: bool = True,
    micro_batches: int = 1,
) -> float:
    """Backpropagate the batch-mean loss, optionally split into micro-batches."""
    total = clips.shape[0]
    loss_value = 0.0
    for chunk in torch.arange(total).tensor_split(micro_batches):
        if chunk.numel() == 0:
            continue
        out = model(clips[chunk])
        loss = encoder_loss(out, y[chunk], hp, use_hg, reduction="sum") / total
        loss.backward()
        loss_value += float(loss.detach())
    return loss_value


@dataclass
class FinetuneLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def to_dict(self) -> dict:
        return {"steps_per_epoch": self.steps_per_epoch, "loss": self.losses, "lr": self.lrs}


def load_clip_bank(records: list[VideoRecord]) -> dict[str, np.ndarray]:
    return {rec.video_id: read_clips(rec) for rec in records}


def finetune(
    records: list[VideoRecord],
    labels: dict[str, np.ndarray],
    hp: HyperParams,
    seed: int | None = None,
    disable_sga: bool = False,
    disable_hg: bool = False,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    micro_batches: int = 1,
    clips: dict[str, np.ndarray] | None = None,
) -> tuple[SgaEncoder, FinetuneLog]:
    """Stage II: train the encoder on normal clips (target 0) and pseudo-labelled abnormal clips."""
    seed = hp.seed if seed is None else seed
    train = select(records, split="train")
    abnormal = select(train, label=1)
    normal = select(train, label=0)
    if not abnormal or not normal:
        raise ValidationError("fine-tuning needs abnormal and normal training videos", "manifest")
    for rec in abnormal:
        if rec.video_id not in labels:
            raise FileNotFoundError(f"missing pseudo labels for {rec.video_id}")
        if len(labels[rec.video_id]) != rec.num_clips:
            raise ValidationError(f"{rec.video_id}: label length does not match num_clips", "labels")
    if clips is None:
        clips = load_clip_bank(abnormal + normal)
    in_channels = next(iter(clips.values())).shape[1]

    model = build_encoder(hp, seed, in_channels, widths, disable_sga)
    optimizer = torch.optim.Adam(model.parameters(), lr=hp.ft_lr, weight_decay=hp.ft_weight_decay)
    per_class = hp.ft_videos_per_class_per_batch
    steps_per_epoch = math.ceil(max(len(abnormal), len(normal)) / per_class)
    warmup_steps = hp.ft_warmup_epochs * steps_per_epoch
    rng = np.random.default_rng(seed)
    ft_log = FinetuneLog(steps_per_epoch=steps_per_epoch)
    use_hg = not disable_hg

    model.train()
    step = 0
    for epoch in range(hp.ft_epochs):
        for _ in range(steps_per_epoch):
            lr = hp.ft_lr * min(1.0, (step + 1) / warmup_steps) if warmup_steps else hp.ft_lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            x, y = _sample_batch(rng, abnormal, normal, labels, clips, per_class, hp.ft_clips_per_video)
            optimizer.zero_grad()
            loss = accumulate_gradients(model, x, y, hp, use_hg, micro_batches)
            optimizer.step()
            ft_log.losses.append(loss)
            ft_log.lrs.append(lr)
            step += 1
        if (epoch + 1) % 10 == 0:
            log.info("finetune epoch %d loss %.4f", epoch + 1, ft_log.losses[-1])
    model.eval()
    return model, ft_log


def _sample_batch(rng, abnormal, normal, labels, clips, per_class, clips_per_video):
    xs, ys = [], []
    for group in (abnormal, normal):
        picks = rng.choice(len(group), size=per_class, replace=per_class > len(group))
        for i in picks:
            rec = group[i]
            n = rec.num_clips
            idx = np.sort(rng.choice(n, size=clips_per_video, replace=clips_per_video > n))
            xs.append(clips[rec.video_id][idx])
            target = labels[rec.video_id] if rec.is_abnormal else np.zeros(n, dtype=np.float32)
            ys.append(np.asarray(target, dtype=np.float32)[idx])
    return torch.from_numpy(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys))


@torch.no_grad()
def encoder_score_video(model: SgaEncoder, clips: np.ndarray, video_id: str = "", chunk: int = 64) -> ScoreSeries:
    """Abnormal-class probability from the weighted-classification head, one per clip."""
    model.eval()
    x = torch.as_tensor(np.asarray(clips), dtype=next(model.parameters()).dtype)
    scores = [model(x[i : i + chunk]).score for i in range(0, x.shape[0], chunk)]
    return ScoreSeries(video_id, torch.cat(scores).numpy())


@torch.no_grad()
def attention_maps(model: SgaEncoder, clips: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Per-clip attention maps ``A`` at block-5 resolution: (N, t', h', w')."""
    if model.sga is None:
        raise ValidationError("encoder was built without the attention module", "use_sga")
    model.eval()
    x = torch.as_tensor(np.asarray(clips), dtype=next(model.parameters()).dtype)
    maps = [model(x[i : i + chunk]).sga.attention[:, 0] for i in range(0, x.shape[0], chunk)]
    return torch.cat(maps).numpy().astype(np.float32)


_HEADER_LEN = struct.Struct("<I")


def write_attention_file(maps: np.ndarray, path: str | Path, video_id: str = "") -> None:
    """u32 header length, UTF-8 JSON header ``{video_id, shape, dtype}``, then float32 LE data."""
    maps = np.ascontiguousarray(maps, dtype="<f4")
    header = json.dumps({"video_id": video_id, "shape": list(maps.shape), "dtype": "float32"}).encode()
    Path(path).write_bytes(_HEADER_LEN.pack(len(header)) + header + maps.tobytes())


def read_attention_file(path: str | Path) -> tuple[dict, np.ndarray]:
    buf = Path(path).read_bytes()
    (n,) = _HEADER_LEN.unpack_from(buf, 0)
    header = json.loads(buf[4 : 4 + n].decode())
    data = np.frombuffer(buf, dtype="<f4", offset=4 + n).reshape(header["shape"])
    return header, data.astype(np.float32)


def save_encoder(model: SgaEncoder, path: str | Path, hp: HyperParams, seed: int, epochs: int,
                 disable_hg: bool = False, **extra) -> None:
    path = Path(path)
    if not isinstance(model.backbone, ToyBackbone):
        raise ValidationError("only toy-backbone encoders can be checkpointed", "backbone")
    torch.save(model.state_dict(), path)
    sidecar = {
        "hp": hp.to_dict(),
        "seed": seed,
        "epochs": epochs,
        "ablation": {"disable_sga": not model.use_sga, "disable_hg": disable_hg},
        "backbone": {"in_channels": model.backbone.in_channels, "widths": list(model.backbone.widths)},
        **extra,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_encoder(path: str | Path) -> tuple[SgaEncoder, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise FileNotFoundError(f"encoder checkpoint {path} (or its .json sidecar) not found")
    meta = json.loads(sidecar_path.read_text())
    model = SgaEncoder(
        K=meta["hp"]["K"],
        use_sga=not meta["ablation"]["disable_sga"],
        in_channels=meta["backbone"]["in_channels"],
        widths=tuple(meta["backbone"]["widths"]),
    )
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta
