"""Stage runners shared by the individual CLI commands and the end-to-end pipeline."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mist.core import HyperParams, VideoRecord
from mist.dataio import (
    ScoreSeries,
    read_clips,
    read_feature_file,
    read_ground_truth,
    read_manifest,
    read_score_file,
    select,
    write_json,
    write_score_file,
)
from mist.encoder import (
    attention_maps,
    encoder_score_video,
    finetune,
    load_encoder,
    save_encoder,
    write_attention_file,
)
from mist.evaluation import EvalReport, evaluate
from mist.milgen import load_generator, save_generator, score_video, train_generator
from mist.pseudolabel import generate_pseudo_labels, load_label_map
from mist.sampling import SPARSE_CONTINUOUS

log = logging.getLogger(__name__)

GENERATOR = "generator"
ENCODER = "encoder"


def run_train_gen(manifest: str | Path, hp: HyperParams, out: str | Path, seed: int,
                  sampling: str = SPARSE_CONTINUOUS) -> Path:
    records = read_manifest(manifest)
    model, train_log = train_generator(records, hp, seed, sampling)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_generator(model, out, hp, seed, hp.gen_iters, sampling=sampling)
    write_json(train_log.to_dict(), out.with_name(out.stem + "_log.json"))
    return out


def run_pseudo(manifest: str | Path, gen_ckpt: str | Path, hp: HyperParams, out_dir: str | Path) -> Path:
    records = read_manifest(manifest)
    model, _ = load_generator(gen_ckpt)
    generate_pseudo_labels(model, records, hp, out_dir, checkpoint_id=Path(gen_ckpt).name)
    return Path(out_dir)


def run_finetune(manifest: str | Path, label_dir: str | Path, hp: HyperParams, out: str | Path, seed: int,
                 disable_sga: bool = False, disable_hg: bool = False) -> Path:
    records = read_manifest(manifest)
    labels = load_label_map(records, label_dir)
    model, ft_log = finetune(records, labels, hp, seed, disable_sga=disable_sga, disable_hg=disable_hg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(model, out, hp, seed, hp.ft_epochs, disable_hg=disable_hg)
    write_json(ft_log.to_dict(), out.with_name(out.stem + "_log.json"))
    return out


def score_path(score_dir: str | Path, video_id: str) -> Path:
    return Path(score_dir) / f"{video_id}.score"


def run_score(manifest: str | Path, ckpt: str | Path, model_kind: str, out_dir: str | Path,
              split: str | None = "test", attention_dir: str | Path | None = None) -> Path:
    """Score every video of ``split`` with a generator (features) or encoder (raw clips) checkpoint."""
    records = select(read_manifest(manifest), split=split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model_kind == GENERATOR:
        model, _ = load_generator(ckpt)
        for rec in records:
            series = score_video(model, read_feature_file(rec.feature_path, rec.video_id))
            write_score_file(series, score_path(out_dir, rec.video_id))
    elif model_kind == ENCODER:
        model, _ = load_encoder(ckpt)
        if attention_dir is not None:
            Path(attention_dir).mkdir(parents=True, exist_ok=True)
        for rec in records:
            clips = read_clips(rec)
            write_score_file(encoder_score_video(model, clips, rec.video_id), score_path(out_dir, rec.video_id))
            if attention_dir is not None and model.sga is not None:
                write_attention_file(
                    attention_maps(model, clips), Path(attention_dir) / f"{rec.video_id}.attn", rec.video_id
                )
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    return out_dir


def load_scores(records: list[VideoRecord], score_dir: str | Path) -> dict[str, ScoreSeries]:
    scores = {}
    for rec in records:
        path = score_path(score_dir, rec.video_id)
        if not path.exists():
            raise FileNotFoundError(f"missing score file for {rec.video_id}: {path}")
        scores[rec.video_id] = read_score_file(path, rec.video_id, expected_len=rec.num_clips)
    return scores


def run_eval(manifest: str | Path, gt_path: str | Path, score_dir: str | Path, out: str | Path | None,
             threshold: float = 0.5, split: str | None = "test", far_subset: str = "all") -> EvalReport:
    records = select(read_manifest(manifest), split=split)
    gt = read_ground_truth(gt_path)
    scores = load_scores(records, score_dir)
    report = evaluate(scores, gt, {r.video_id: r.frames_per_clip for r in records}, threshold, far_subset)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        report.write(out)
    return report


def run_plot(manifest: str | Path, gt_path: str | Path, score_dir: str | Path, out_dir: str | Path,
             split: str | None = "test", videos: list[str] | None = None) -> list[Path]:
    """Per-video anomaly score curves over frames with ground-truth spans shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from mist.evaluation import expand_to_frames

    records = select(read_manifest(manifest), split=split)
    if videos:
        wanted = set(videos)
        records = [r for r in records if r.video_id in wanted]
    gt = read_ground_truth(gt_path)
    scores = load_scores(records, score_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        g = gt[rec.video_id]
        frames = expand_to_frames(scores[rec.video_id], rec.frames_per_clip, g.total_frames)
        fig, ax = plt.subplots(figsize=(6, 2.4))
        for start, end in g.intervals:
            ax.axvspan(start, end, color="tab:red", alpha=0.25, lw=0)
        ax.plot(np.arange(frames.size), frames, color="tab:blue", lw=1.2)
        ax.set_ylim(0, 1)
        ax.set_xlim(0, max(frames.size - 1, 1))
        ax.set_xlabel("frame")
        ax.set_ylabel("anomaly score")
        ax.set_title(rec.video_id, fontsize=9)
        fig.tight_layout()
        path = out_dir / f"{rec.video_id}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


@dataclass
class PipelineRunRecord:
    run_id: str
    seed: int
    config: dict
    options: dict
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        write_json(asdict(self), path)


def run_pipeline(
    manifest: str | Path,
    gt_path: str | Path,
    hp: HyperParams,
    out_dir: str | Path,
    seed: int,
    sampling: str = SPARSE_CONTINUOUS,
    disable_sga: bool = False,
    disable_hg: bool = False,
    far_subset: str = "all",
    plot: bool = False,
) -> PipelineRunRecord:
    """Stage I (generator + pseudo labels), Stage II (encoder fine-tuning), then test-split evaluation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    options = {
        "sampling": sampling, "disable_sga": disable_sga, "disable_hg": disable_hg, "far_subset": far_subset,
    }
    digest = hashlib.sha256(
        json.dumps({"hp": hp.to_dict(), "seed": seed, **options}, sort_keys=True).encode()
    ).hexdigest()[:12]
    record = PipelineRunRecord(run_id=digest, seed=seed, config=hp.to_dict(), options=options)
    art = record.artifacts

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        record.timings[name] = round(time.perf_counter() - t0, 3)
        log.info("%s done in %.1fs", name, record.timings[name])
        return result

    art["generator_checkpoint"] = str(
        timed("train_gen", run_train_gen, manifest, hp, out_dir / "generator.pt", seed, sampling)
    )
    art["pseudo_label_dir"] = str(
        timed("pseudo", run_pseudo, manifest, art["generator_checkpoint"], hp, out_dir / "pseudo_labels")
    )
    art["generator_scores"] = str(
        timed("score_gen", run_score, manifest, art["generator_checkpoint"], GENERATOR,
              out_dir / "scores" / GENERATOR)
    )
    art["generator_report"] = str(out_dir / "report_generator.json")
    timed("eval_gen", run_eval, manifest, gt_path, art["generator_scores"], art["generator_report"],
          hp.far_threshold, "test", far_subset)

    art["encoder_checkpoint"] = str(
        timed("finetune", run_finetune, manifest, art["pseudo_label_dir"], hp, out_dir / "encoder.pt", seed,
              disable_sga, disable_hg)
    )
    attention_dir = None if disable_sga else out_dir / "attention"
    art["encoder_scores"] = str(
        timed("score_enc", run_score, manifest, art["encoder_checkpoint"], ENCODER,
              out_dir / "scores" / ENCODER, "test", attention_dir)
    )
    if attention_dir is not None:
        art["attention_dir"] = str(attention_dir)
    art["report"] = str(out_dir / "report.json")
    timed("eval", run_eval, manifest, gt_path, art["encoder_scores"], art["report"], hp.far_threshold,
          "test", far_subset)
    if plot:
        art["plot_dir"] = str(out_dir / "plots")
        timed("plot", run_plot, manifest, gt_path, art["encoder_scores"], art["plot_dir"])
    record.write(out_dir / "run.json")
    return record
