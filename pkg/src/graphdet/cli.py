"""Command line front end.

Subcommands: generate (synthetic episode datasets), train (episodic SGD),
eval (ablation report over a dataset), cosine-matrix (prototype similarity
dump), gradcheck (analytic-vs-numeric gradient audit).

Exit codes: 0 success, 1 usage errors, 2 unreadable or inconsistent data
files, 3 failed checks (gradient check mismatch, diverged training). Output
is deterministic: no timestamps, floats printed with shortest round-trip
repr, files written with fixed key order.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Sequence

import numpy as np

from .core import Episode, ShapeError
from .evaluation import EvalRun, ReportRow, ablation_report, write_report_csv
from .fileio import (
    Checkpoint,
    FileFormatError,
    check_shape_compatible,
    read_checkpoint,
    read_episode,
    read_manifest,
    write_checkpoint,
    write_episode,
    write_manifest,
)
from .gcn import CPDirection, EdgeToggles, GcnParams, PPContext
from .graph import DEFAULT_IOU_THETA
from .pipeline import DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD, MatchHead, cosine_matrix
from .synth import GenConfig, GenerationError, generate_episode
from .training import (
    TrainConfig,
    TrainingDiverged,
    gradient_check,
    initialize_parameters,
    train,
)

_PRESETS = {
    "full": EdgeToggles.full,
    "none": EdgeToggles.none,
    "mlp": EdgeToggles.mlp,
    "cc": EdgeToggles.class_class_only,
    "cp": EdgeToggles.class_proposal_only,
    "pp": EdgeToggles.proposal_proposal_only,
}

_PP_VALUES = [p.value for p in PPContext]
_CP_VALUES = [c.value for c in CPDirection]


def _add_toggle_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("graph ablation")
    group.add_argument("--mlp", action="store_true", help="replace the graph with the per-node linear update")
    group.add_argument("--no-class-class", action="store_true", help="disable the prototype graph")
    group.add_argument("--cp-direction", choices=_CP_VALUES, default="bidirectional",
                       help="class-proposal edge directions")
    group.add_argument("--pp-context", choices=_PP_VALUES, default="both",
                       help="proposal-proposal context edges")
    group.add_argument("--base-memory", type=int, default=None, metavar="K",
                       help="keep only the first K base prototypes (default: all)")


def _toggles_from_args(args: argparse.Namespace) -> EdgeToggles:
    if args.mlp:
        if (args.no_class_class or args.cp_direction != "bidirectional"
                or args.pp_context != "both" or args.base_memory is not None):
            raise ValueError("--mlp cannot be combined with other ablation flags")
        return EdgeToggles.mlp()
    return EdgeToggles(
        class_class=not args.no_class_class,
        class_proposal=CPDirection(args.cp_direction),
        proposal_proposal=PPContext(args.pp_context),
        base_memory_size=args.base_memory,
    )


def _add_gen_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("scene generator")
    group.add_argument("--seed", type=int, default=0)
    group.add_argument("--num-base", type=int, default=10)
    group.add_argument("--num-novel", type=int, default=5)
    group.add_argument("--shots", type=int, default=2)
    group.add_argument("--proposals", type=int, default=16, help="proposals per novel class")
    group.add_argument("--grid-height", type=int, default=2)
    group.add_argument("--grid-width", type=int, default=2)
    group.add_argument("--channels", type=int, default=32)
    group.add_argument("--cluster-spread", type=float, default=0.2)
    group.add_argument("--support-shift", type=float, default=0.6)
    group.add_argument("--jitter", type=float, default=0.1)
    group.add_argument("--image-width", type=float, default=128.0)
    group.add_argument("--image-height", type=float, default=128.0)
    group.add_argument("--posenc-scale", type=float, default=0.3)
    group.add_argument("--label-iou", type=float, default=0.5)


def _genconfig_from_args(args: argparse.Namespace) -> GenConfig:
    return GenConfig(
        num_base=args.num_base,
        num_novel=args.num_novel,
        shots=args.shots,
        proposals_per_class=args.proposals,
        grid_height=args.grid_height,
        grid_width=args.grid_width,
        channels=args.channels,
        cluster_spread=args.cluster_spread,
        support_shift=args.support_shift,
        jitter=args.jitter,
        image_width=args.image_width,
        image_height=args.image_height,
        posenc_scale=args.posenc_scale,
        label_iou=args.label_iou,
        seed=args.seed,
    )


def _genconfig_from_manifest(config: dict, seed: int | None = None) -> GenConfig:
    generator = config.get("generator")
    if not isinstance(generator, dict):
        raise ValueError("manifest config has no 'generator' section")
    fields = {f.name for f in dataclasses.fields(GenConfig)}
    unknown = set(generator) - fields
    if unknown:
        raise ValueError(f"manifest generator config has unknown keys {sorted(unknown)}")
    if seed is not None:
        generator = {**generator, "seed": seed}
    return GenConfig(**generator)


def _cmd_generate(args: argparse.Namespace) -> int:
    cfg = _genconfig_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i in range(args.episodes):
        episode, _ = generate_episode(cfg, args.start_index + i, args.split)
        name = f"episode_{args.start_index + i:04d}.json"
        write_episode(episode, os.path.join(args.out, name))
        names.append(name)
    manifest_config = {
        "generator": dataclasses.asdict(cfg),
        "start_index": args.start_index,
    }
    write_manifest(os.path.join(args.out, "manifest.json"), manifest_config, names, args.split)
    print(f"wrote {len(names)} {args.split} episodes to {args.out}")
    return 0


def _load_dataset(path: str, expected_split: str) -> tuple[list[Episode], dict, str]:
    manifest = read_manifest(path)
    if manifest.split != expected_split:
        raise ValueError(
            f"{path} is a {manifest.split!r} manifest, this command needs {expected_split!r}"
        )
    episodes = [read_episode(p) for p in manifest.episode_paths()]
    if not episodes:
        raise ValueError(f"{path} lists no episodes")
    return episodes, manifest.config, path


def _cmd_train(args: argparse.Namespace) -> int:
    if (args.init is None) != (not args.finetune):
        raise ValueError("--finetune and --init must be given together")
    episodes, config, _ = _load_dataset(args.data, "train")
    toggles = _toggles_from_args(args)
    train_config = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_episodes=args.batch,
        iterations=args.iterations,
        lr_decay_at=args.lr_decay_at,
        positive_iou=args.positive_iou,
        seed=args.seed,
    )

    params = head = None
    shape = episodes[0].shape
    if args.init is not None:
        ckpt = read_checkpoint(args.init)
        if tuple(ckpt.shape) != tuple(shape):
            raise ShapeError(
                f"checkpoint shape {list(ckpt.shape)} does not match dataset shape {list(shape)}"
            )
        if args.layers_inter is not None or args.layers_intra is not None:
            raise ValueError("layer counts come from the checkpoint when --init is used")
        params, head = ckpt.params, ckpt.head
    else:
        params, head = initialize_parameters(
            shape, args.seed,
            layers_inter=args.layers_inter if args.layers_inter is not None else 1,
            layers_intra=args.layers_intra if args.layers_intra is not None else 1,
        )

    result = train(
        episodes, train_config, toggles, theta=args.theta,
        params=params, head=head, regression_weight=args.regression_weight,
    )

    echo = dataclasses.asdict(train_config)
    echo.update(
        toggles=toggles.label(),
        theta=args.theta,
        regression_weight=args.regression_weight,
        layers_inter=result.params.layers_inter,
        layers_intra=result.params.layers_intra,
        finetune=bool(args.finetune),
    )
    write_checkpoint(args.out, result.params, result.head, shape,
                     seed=args.seed, train_config=echo)
    if args.trace is not None:
        with open(args.trace, "w") as fh:
            fh.write("iteration,total,bce,smooth_l1\n")
            for row in result.trace:
                fh.write(f"{row.iteration},{row.total!r},{row.bce!r},{row.smooth_l1!r}\n")
    last = result.trace[-1].total if result.trace else float("nan")
    print(f"trained {train_config.iterations} iterations, final loss {last!r}, wrote {args.out}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ValueError(f"--seeds expects comma separated integers, got {text!r}") from None


def _eval_runs(args: argparse.Namespace, ckpt: Checkpoint) -> list[EvalRun]:
    manifest = read_manifest(args.data)
    if manifest.split != "eval":
        raise ValueError(f"{args.data} is a {manifest.split!r} manifest, eval needs 'eval'")
    shots = int(manifest.config.get("generator", {}).get("shots", 0))
    if args.seeds is None:
        episodes = [read_episode(p) for p in manifest.episode_paths()]
        if not episodes:
            raise ValueError(f"{args.data} lists no episodes")
        for path, ep in zip(manifest.episode_paths(), episodes):
            check_shape_compatible(ckpt, ep, path)
        seed = int(manifest.config.get("generator", {}).get("seed", 0))
        return [EvalRun(seed, episodes, ckpt.params, ckpt.head, shots)]
    count = len(manifest.episodes)
    start = int(manifest.config.get("start_index", 0))
    runs = []
    for seed in _parse_seeds(args.seeds):
        cfg = _genconfig_from_manifest(manifest.config, seed=seed)
        if cfg.shape != tuple(ckpt.shape):
            raise ShapeError(
                f"manifest shape {list(cfg.shape)} does not match checkpoint shape {list(ckpt.shape)}"
            )
        episodes = [generate_episode(cfg, start + i, "eval")[0] for i in range(count)]
        runs.append(EvalRun(seed, episodes, ckpt.params, ckpt.head, shots))
    return runs


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    runs = _eval_runs(args, ckpt)
    if args.ablate is not None:
        names = [n.strip() for n in args.ablate.split(",") if n.strip()]
        bad = [n for n in names if n not in _PRESETS]
        if bad:
            raise ValueError(f"unknown ablation presets {bad}; choose from {sorted(_PRESETS)}")
        if not names:
            raise ValueError("--ablate needs at least one preset name")
        grid = [_PRESETS[n]() for n in names]
    else:
        grid = [_toggles_from_args(args)]
    rows = ablation_report(
        runs, grid,
        score_threshold=args.score_threshold, nms_iou=args.nms_iou, theta=args.theta,
    )
    for row in rows:
        print(f"toggles={row.toggles} shots={row.shots} seed={row.seed} "
              f"ap={row.ap!r} ap50={row.ap50!r} ap75={row.ap75!r}")
    if args.out is not None:
        write_report_csv(rows, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_cosine_matrix(args: argparse.Namespace) -> int:
    episode = read_episode(args.episode)
    table = episode.class_table
    matrix = cosine_matrix(table)
    ids = [f"{p.class_id.kind.value}:{p.class_id.id}" for p in table]
    print("class " + " ".join(ids))
    for label, row in zip(ids, matrix):
        print(label + " " + " ".join(repr(float(v)) for v in row))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = GenConfig(
        num_base=args.num_base, num_novel=args.num_novel, shots=args.shots,
        proposals_per_class=args.proposals, grid_height=args.grid_height,
        grid_width=args.grid_width, channels=args.channels, seed=args.seed,
    )
    episode, labels = generate_episode(cfg, 0, "eval")
    params, head = initialize_parameters(cfg.shape, args.seed)
    # Nonzero regressor so the localization branch exercises the W gradient.
    head = head.replace(regressor=np.full((params.dim, 4), 0.01))
    report = gradient_check(
        episode, labels, params, head,
        toggles=_toggles_from_args(args), theta=args.theta,
        step=args.step, tolerance=args.tolerance, inject_bug=args.inject_bug,
    )
    for name in ("weight", "scale", "bias", "regressor"):
        print(f"{name}: rel_err={report.per_parameter[name]!r}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max rel_err {report.max_rel_err!r} vs tolerance {report.tolerance!r}: {verdict}")
    return 0 if report.passed else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdet",
        description="Few-shot detection with class-graph feature enhancement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic episode dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--split", choices=["train", "eval"], required=True)
    gen.add_argument("--episodes", type=int, required=True)
    gen.add_argument("--start-index", type=int, default=0)
    _add_gen_args(gen)
    gen.set_defaults(func=_cmd_generate)

    tr = sub.add_parser("train", help="train the matching head and graph weight")
    tr.add_argument("--data", required=True, help="train manifest path")
    tr.add_argument("--out", required=True, help="checkpoint path to write")
    tr.add_argument("--trace", default=None, help="optional loss trace CSV")
    tr.add_argument("--iterations", type=int, default=1000)
    tr.add_argument("--lr", type=float, default=0.002)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--weight-decay", type=float, default=0.0001)
    tr.add_argument("--batch", type=int, default=4)
    tr.add_argument("--lr-decay-at", type=int, default=None)
    tr.add_argument("--positive-iou", type=float, default=0.5)
    tr.add_argument("--regression-weight", type=float, default=1.0)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--theta", type=float, default=DEFAULT_IOU_THETA)
    tr.add_argument("--layers-inter", type=int, default=None)
    tr.add_argument("--layers-intra", type=int, default=None)
    tr.add_argument("--init", default=None, help="checkpoint to start from")
    tr.add_argument("--finetune", action="store_true",
                    help="continue from --init instead of a fresh start")
    _add_toggle_args(tr)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint and report AP")
    ev.add_argument("--data", required=True, help="eval manifest path")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default=None, help="optional report CSV")
    ev.add_argument("--ablate", default=None,
                    help=f"comma separated presets from {sorted(_PRESETS)}")
    ev.add_argument("--seeds", default=None,
                    help="comma separated seeds; regenerates the eval set per seed")
    ev.add_argument("--score-threshold", type=float, default=DEFAULT_SCORE_THRESHOLD)
    ev.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU)
    ev.add_argument("--theta", type=float, default=DEFAULT_IOU_THETA)
    _add_toggle_args(ev)
    ev.set_defaults(func=_cmd_eval)

    cm = sub.add_parser("cosine-matrix", help="print prototype cosine similarities")
    cm.add_argument("--episode", required=True, help="episode file")
    cm.set_defaults(func=_cmd_cosine_matrix)

    gc = sub.add_parser("gradcheck", help="audit analytic gradients against finite differences")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--inject-bug", action="store_true",
                    help="corrupt one analytic entry to prove the check can fail")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--theta", type=float, default=DEFAULT_IOU_THETA)
    gc.add_argument("--num-base", type=int, default=4)
    gc.add_argument("--num-novel", type=int, default=2)
    gc.add_argument("--shots", type=int, default=2)
    gc.add_argument("--proposals", type=int, default=5)
    gc.add_argument("--grid-height", type=int, default=1)
    gc.add_argument("--grid-width", type=int, default=1)
    gc.add_argument("--channels", type=int, default=8)
    _add_toggle_args(gc)
    gc.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; fold usage into 1.
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (FileFormatError, GenerationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
