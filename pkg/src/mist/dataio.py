"""File formats (features, scores, manifests, frame ground truth) and the synthetic dataset.

Feature file::

    b"MISTFEAT" | u32 version=1 | u32 N | u32 D | N*D float32, row-major

Score file::

    b"MISTSCOR" | u32 version=1 | u32 N | N float32

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mist.core import VideoRecord
from mist.errors import FormatError, ValidationError

FEATURE_MAGIC = b"MISTFEAT"
SCORE_MAGIC = b"MISTSCOR"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class FeatureSequence:
    video_id: str
    data: np.ndarray  # (N, D) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError(f"expected an N x D matrix, got shape {self.data.shape}", "data")
        n, d = self.data.shape
        if n < 1 or d < 1:
            raise ValidationError(f"need N >= 1 and D >= 1, got {self.data.shape}", "data")
        if not np.isfinite(self.data).all():
            raise ValidationError("features must be finite", "data")

    @property
    def num_clips(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class ScoreSeries:
    video_id: str
    scores: np.ndarray  # (N,) float32

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32).reshape(-1)
        if self.scores.size < 1:
            raise ValidationError("empty score series", "scores")
        if not np.isfinite(self.scores).all():
            raise ValidationError("scores must be finite", "scores")

    def __len__(self) -> int:
        return self.scores.size


@dataclass
class FrameGroundTruth:
    video_id: str
    total_frames: int
    intervals: list[tuple[int, int]]  # half-open [start, end)

    def __post_init__(self):
        self.intervals = [(int(a), int(b)) for a, b in self.intervals]
        if self.total_frames < 1:
            raise ValidationError(f"total_frames must be >= 1 ({self.video_id})", "total_frames")
        prev_end = 0
        for start, end in self.intervals:
            if not (prev_end <= start < end <= self.total_frames):
                raise ValidationError(
                    f"intervals must be sorted, non-overlapping and within "
                    f"[0, {self.total_frames}); bad interval [{start}, {end}) in {self.video_id}",
                    "intervals",
                )
            prev_end = end

    def frame_labels(self) -> np.ndarray:
        labels = np.zeros(self.total_frames, dtype=np.int8)
        for start, end in self.intervals:
            labels[start:end] = 1
        return labels


# -- binary readers/writers ---------------------------------------------------


def _read_header(buf: bytes, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    if len(buf) < len(magic):
        raise FormatError("file shorter than magic", len(buf), path)
    if buf[: len(magic)] != magic:
        raise FormatError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}", 0, path)
    fields = []
    offset = len(magic)
    for _ in range(n_fields + 1):
        if len(buf) < offset + 4:
            raise FormatError("truncated header", len(buf), path)
        fields.append(_U32.unpack_from(buf, offset)[0])
        offset += 4
    if fields[0] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {fields[0]}", len(magic), path)
    return tuple(fields[1:])


def _read_payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    expected = offset + 4 * count
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(buf)}", len(buf), path)
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected, path)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32)


def write_feature_file(seq: FeatureSequence, path: str | Path) -> None:
    n, d = seq.data.shape
    header = FEATURE_MAGIC + _U32.pack(FORMAT_VERSION) + _U32.pack(n) + _U32.pack(d)
    Path(path).write_bytes(header + np.ascontiguousarray(seq.data, dtype="<f4").tobytes())


def read_feature_file(path: str | Path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    buf = path.read_bytes()
    n, d = _read_header(buf, FEATURE_MAGIC, 2, path)
    if n < 1 or d < 1:
        raise FormatError(f"invalid dimensions N={n} D={d}", len(FEATURE_MAGIC) + 4, path)
    data = _read_payload(buf, len(FEATURE_MAGIC) + 12, n * d, path).reshape(n, d)
    return FeatureSequence(video_id or path.stem, data)


def write_score_file(series: ScoreSeries, path: str | Path) -> None:
    header = SCORE_MAGIC + _U32.pack(FORMAT_VERSION) + _U32.pack(series.scores.size)
    Path(path).write_bytes(header + np.ascontiguousarray(series.scores, dtype="<f4").tobytes())


def read_score_file(
    path: str | Path, video_id: str | None = None, expected_len: int | None = None
) -> ScoreSeries:
    path = Path(path)
    buf = path.read_bytes()
    (n,) = _read_header(buf, SCORE_MAGIC, 1, path)
    if n < 1:
        raise FormatError("empty score series", len(SCORE_MAGIC) + 4, path)
    scores = _read_payload(buf, len(SCORE_MAGIC) + 8, n, path)
    if expected_len is not None and n != expected_len:
        raise ValidationError(
            f"{path}: score series has {n} entries but the video has {expected_len} clips", "scores"
        )
    return ScoreSeries(video_id or path.stem, scores)


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- manifest and ground truth -------------------------------------------------


def read_manifest(path: str | Path, check_files: bool = True) -> list[VideoRecord]:
    """Read a manifest; relative file references resolve against the manifest's directory."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc.msg}", "manifest") from None
    if not isinstance(entries, list):
        raise ValidationError("manifest must be a JSON array", "manifest")
    base = path.parent
    records = []
    seen = set()
    required = ("video_id", "label", "split", "num_clips", "frames_per_clip", "feature_path")
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ValidationError(f"entry {i} is not an object", "manifest")
        missing = [key for key in required if key not in entry]
        if missing:
            raise ValidationError(f"entry {i} is missing {', '.join(missing)}", missing[0])
        video_id = entry["video_id"]
        if video_id in seen:
            raise ValidationError(f"duplicate video_id {video_id!r}", "video_id")
        seen.add(video_id)
        feature_path = base / entry["feature_path"]
        clip_path = base / entry["clip_path"] if entry.get("clip_path") else None
        if check_files:
            for ref in (feature_path, clip_path):
                if ref is not None and not ref.exists():
                    raise FileNotFoundError(f"{video_id}: referenced file {ref} does not exist")
        extra = {k: v for k, v in entry.items() if k not in required and k != "clip_path"}
        records.append(
            VideoRecord(
                video_id=video_id,
                label=entry["label"],
                split=entry["split"],
                num_clips=int(entry["num_clips"]),
                frames_per_clip=int(entry["frames_per_clip"]),
                feature_path=feature_path,
                clip_path=clip_path,
                extra=extra,
            )
        )
    return records


def write_manifest(records: list[VideoRecord], path: str | Path) -> None:
    base = Path(path).parent
    entries = []
    for rec in records:
        entry = {
            "video_id": rec.video_id,
            "label": rec.label,
            "split": rec.split,
            "num_clips": rec.num_clips,
            "frames_per_clip": rec.frames_per_clip,
            "feature_path": _relative(rec.feature_path, base),
        }
        if rec.clip_path is not None:
            entry["clip_path"] = _relative(rec.clip_path, base)
        entries.append(entry)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")


def _relative(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def read_ground_truth(path: str | Path) -> dict[str, FrameGroundTruth]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValidationError("ground truth must be a JSON object keyed by video_id", "ground_truth")
    gt = {}
    for video_id, item in data.items():
        try:
            gt[video_id] = FrameGroundTruth(video_id, int(item["total_frames"]), item["intervals"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed entry for {video_id}: {exc}", "ground_truth") from None
    return gt


def write_ground_truth(gt: dict[str, FrameGroundTruth], path: str | Path) -> None:
    data = {
        vid: {"total_frames": g.total_frames, "intervals": [list(iv) for iv in g.intervals]}
        for vid, g in gt.items()
    }
    write_json(data, path)


def select(records: list[VideoRecord], split: str | None = None, label: int | None = None) -> list[VideoRecord]:
    return [
        r for r in records
        if (split is None or r.split == split) and (label is None or r.label == label)
    ]


def read_clips(rec: VideoRecord) -> np.ndarray:
    """Raw clips of one video as a (N, C, F, H, W) float32 array."""
    if rec.clip_path is None:
        raise ValidationError(f"{rec.video_id} has no clip_path", "clip_path")
    clips = np.load(rec.clip_path, allow_pickle=False)
    if clips.ndim != 5 or clips.shape[0] != rec.num_clips:
        raise ValidationError(
            f"{rec.clip_path}: expected ({rec.num_clips}, C, F, H, W) clips, got {clips.shape}", "clip_path"
        )
    return clips.astype(np.float32, copy=False)


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Planted mean-shift dataset.

    Features: normal clips are N(0, I_D); anomalous clips add
    ``anomaly_shift * u`` where ``u`` is a fixed random +-1 vector, so every
    coordinate moves by ``anomaly_shift``. Raw clips: N(0, 1) pixels; an
    anomalous clip carries a bright square of amplitude ``anomaly_shift``
    drifting across its frames.
    """

    num_normal: int = 20
    num_abnormal: int = 20
    num_test_normal: int | None = None  # None -> half the train count
    num_test_abnormal: int | None = None
    clips_min: int = 32
    clips_max: int = 64
    feature_dim: int = 64
    anomaly_shift: float = 2.0
    anomaly_min_len: int = 4
    anomaly_max_len: int = 12
    frames_per_clip: int = 16
    raw_size: int = 16
    raw_channels: int = 1
    blob_size: int = 4
    write_clips: bool = True

    def __post_init__(self):
        if self.num_normal < 0 or self.num_abnormal < 0:
            raise ValidationError("video counts must be >= 0", "num_normal")
        if not self.anomaly_shift > 0:
            raise ValidationError(f"must be > 0, got {self.anomaly_shift}", "anomaly_shift")
        if self.anomaly_min_len < 1:
            raise ValidationError(f"must be >= 1, got {self.anomaly_min_len}", "anomaly_min_len")
        if self.anomaly_min_len > self.anomaly_max_len:
            raise ValidationError("anomaly_min_len exceeds anomaly_max_len", "anomaly_min_len")
        if not 1 <= self.clips_min <= self.clips_max:
            raise ValidationError("need 1 <= clips_min <= clips_max", "clips_min")
        if self.anomaly_max_len > self.clips_min:
            raise ValidationError(
                f"anomaly_max_len={self.anomaly_max_len} exceeds clips_min={self.clips_min}",
                "anomaly_max_len",
            )
        if self.feature_dim < 1 or self.frames_per_clip < 1:
            raise ValidationError("feature_dim and frames_per_clip must be >= 1", "feature_dim")
        if not 1 <= self.blob_size <= self.raw_size:
            raise ValidationError("need 1 <= blob_size <= raw_size", "blob_size")

    @property
    def test_counts(self) -> tuple[int, int]:
        n = self.num_normal // 2 if self.num_test_normal is None else self.num_test_normal
        a = self.num_abnormal // 2 if self.num_test_abnormal is None else self.num_test_abnormal
        return n, a


@dataclass
class SynthOutput:
    manifest_path: Path
    ground_truth_path: Path
    records: list[VideoRecord]
    ground_truth: dict[str, FrameGroundTruth]


def _raw_clips(rng: np.random.Generator, spec: SynthSpec, n: int, span: tuple[int, int] | None) -> np.ndarray:
    f, s, c = spec.frames_per_clip, spec.raw_size, spec.raw_channels
    clips = rng.standard_normal((n, c, f, s, s), dtype=np.float32)
    if span is None:
        return clips
    b = spec.blob_size
    room = s - b
    y0, x0 = rng.integers(0, room + 1, size=2)
    dy, dx = rng.choice([-1, 1], size=2)
    for i in range(span[0], span[1]):
        for t in range(f):
            # bounce inside the frame
            y = _bounce(y0 + dy * (t + i * f) // 2, room)
            x = _bounce(x0 + dx * (t + i * f) // 2, room)
            clips[i, :, t, y : y + b, x : x + b] += spec.anomaly_shift
    return clips


def _bounce(pos: int, room: int) -> int:
    if room == 0:
        return 0
    period = 2 * room
    pos %= period
    return pos if pos <= room else period - pos


def synth_dataset(spec: SynthSpec, out_dir: str | Path, seed: int = 0) -> SynthOutput:
    """Write a synthetic dataset (manifest.json, ground_truth.json, features/, clips/) to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    if spec.write_clips:
        (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    direction = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=spec.feature_dim)

    test_normal, test_abnormal = spec.test_counts
    plan = (
        [("train", 0)] * spec.num_normal
        + [("train", 1)] * spec.num_abnormal
        + [("test", 0)] * test_normal
        + [("test", 1)] * test_abnormal
    )
    records: list[VideoRecord] = []
    gt: dict[str, FrameGroundTruth] = {}
    counters = {}
    for split, label in plan:
        tag = f"{split}_{'abnormal' if label else 'normal'}"
        idx = counters.get(tag, 0)
        counters[tag] = idx + 1
        video_id = f"{tag}_{idx:03d}"

        n = int(rng.integers(spec.clips_min, spec.clips_max + 1))
        feats = rng.standard_normal((n, spec.feature_dim), dtype=np.float32)
        span = None
        if label == 1:
            length = int(rng.integers(spec.anomaly_min_len, spec.anomaly_max_len + 1))
            start = int(rng.integers(0, n - length + 1))
            span = (start, start + length)
            feats[start : start + length] += spec.anomaly_shift * direction

        feature_path = out_dir / "features" / f"{video_id}.feat"
        write_feature_file(FeatureSequence(video_id, feats), feature_path)
        clip_path = None
        if spec.write_clips:
            clip_path = out_dir / "clips" / f"{video_id}.npy"
            np.save(clip_path, _raw_clips(rng, spec, n, span), allow_pickle=False)

        fpc = spec.frames_per_clip
        intervals = [] if span is None else [(span[0] * fpc, span[1] * fpc)]
        gt[video_id] = FrameGroundTruth(video_id, n * fpc, intervals)
        records.append(VideoRecord(video_id, label, split, n, fpc, feature_path, clip_path))

    manifest_path = out_dir / "manifest.json"
    gt_path = out_dir / "ground_truth.json"
    write_manifest(records, manifest_path)
    write_ground_truth(gt, gt_path)
    write_json(
        {"seed": seed, **{k: v for k, v in spec.__dict__.items()}}, out_dir / "synth_spec.json"
    )
    return SynthOutput(manifest_path, gt_path, records, gt)
