"""Command-line entry point: ``mist <command> [options]``.

Exit codes: 0 success, 2 validation/config, 3 I/O, 4 undefined metric, 5 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from mist import pipeline
from mist.core import HyperParams, load_config, parse_override
from mist.dataio import SynthSpec, synth_dataset
from mist.errors import ConfigError, FormatError, UndefinedMetricError, ValidationError
from mist.evaluation import FAR_SUBSETS
from mist.sampling import SAMPLING_MODES, SPARSE_CONTINUOUS

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_METRIC = 4
EXIT_INTERNAL = 5

log = logging.getLogger("mist")


def _hp(args) -> HyperParams:
    hp = load_config(args.config)
    overrides = dict(parse_override(item) for item in args.set or [])
    if overrides:
        hp = hp.with_overrides(overrides)
    return hp


def _seed(args, hp: HyperParams) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MIST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MIST_SEED must be an integer, got {env!r}", "MIST_SEED") from None
    return hp.seed


def _split(value: str) -> str | None:
    return None if value == "all" else value


def cmd_synth(args) -> None:
    fields = {f.name for f in dataclasses.fields(SynthSpec)}
    kwargs = {name: getattr(args, name) for name in fields if getattr(args, name, None) is not None}
    if args.no_clips:
        kwargs["write_clips"] = False
    seed = args.seed if args.seed is not None else int(os.environ.get("MIST_SEED", 0))
    out = synth_dataset(SynthSpec(**kwargs), args.out, seed)
    print(out.manifest_path)


def cmd_train_gen(args) -> None:
    hp = _hp(args)
    print(pipeline.run_train_gen(args.manifest, hp, args.out, _seed(args, hp), args.sampling))


def cmd_pseudo(args) -> None:
    print(pipeline.run_pseudo(args.manifest, args.generator, _hp(args), args.out))


def cmd_finetune(args) -> None:
    hp = _hp(args)
    print(pipeline.run_finetune(args.manifest, args.labels, hp, args.out, _seed(args, hp),
                                args.disable_sga, args.disable_hg))


def cmd_score(args) -> None:
    print(pipeline.run_score(args.manifest, args.checkpoint, args.model, args.out, _split(args.split),
                             args.attention_out))


def cmd_eval(args) -> None:
    hp = _hp(args)
    threshold = args.threshold if args.threshold is not None else hp.far_threshold
    report = pipeline.run_eval(args.manifest, args.gt, args.scores, args.out, threshold,
                               _split(args.split), args.far_videos)
    print(f"frame_auc={report.frame_auc:.4f} far={report.far:.4f} score_gap={report.score_gap:.4f}")


def cmd_plot(args) -> None:
    paths = pipeline.run_plot(args.manifest, args.gt, args.scores, args.out, _split(args.split), args.videos)
    print(f"wrote {len(paths)} plots to {args.out}")


def cmd_pipeline(args) -> None:
    hp = _hp(args)
    record = pipeline.run_pipeline(
        args.manifest, args.gt, hp, args.out, _seed(args, hp), args.sampling,
        args.disable_sga, args.disable_hg, args.far_videos, args.plot,
    )
    print(Path(record.artifacts["report"]).read_text(), end="")


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON hyperparameter file (missing keys use defaults)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key; VALUE is JSON (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (falls back to $MIST_SEED, then the config)")


def _add_ablation(p: argparse.ArgumentParser, sampling: bool = True, encoder: bool = True) -> None:
    if sampling:
        p.add_argument("--sampling", choices=SAMPLING_MODES, default=SPARSE_CONTINUOUS)
    if encoder:
        p.add_argument("--disable-sga", action="store_true", help="drop the self-guided attention module")
        p.add_argument("--disable-hg", action="store_true", help="train without the guided head's loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mist", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    _add_common(p, config=False)
    for f in dataclasses.fields(SynthSpec):
        if f.name == "write_clips":
            continue
        kind = float if f.name == "anomaly_shift" else int
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind)
    p.add_argument("--no-clips", action="store_true", help="skip raw clip arrays")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-gen", help="Stage I: train the pseudo label generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)
    _add_ablation(p, encoder=False)
    p.set_defaults(func=cmd_train_gen)

    p = sub.add_parser("pseudo", help="Stage I: write pseudo labels for abnormal training videos")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generator", required=True, help="generator checkpoint")
    p.add_argument("--out", required=True, help="label directory")
    _add_common(p)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("finetune", help="Stage II: fine-tune the attention encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="pseudo label directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)
    _add_ablation(p, sampling=False)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("score", help="write per-clip score files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", choices=(pipeline.GENERATOR, pipeline.ENCODER), required=True)
    p.add_argument("--out", required=True, help="score directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--attention-out", help="also export encoder attention maps here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level AUC, FAR and score gap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True, help="frame ground truth JSON")
    p.add_argument("--scores", required=True, help="score directory")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--threshold", type=float, help="FAR threshold (default: config far_threshold)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--far-videos", choices=FAR_SUBSETS, default="all")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render score curves with ground truth shaded")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="image directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--videos", nargs="*", help="restrict to these video ids")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("pipeline", help="run both stages and evaluate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--far-videos", choices=FAR_SUBSETS, default="all")
    p.add_argument("--plot", action="store_true", help="also render score plots")
    _add_common(p)
    _add_ablation(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except UndefinedMetricError as exc:
        print(f"mist: undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (ConfigError, ValidationError) as exc:
        print(f"mist: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"mist: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"mist: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
