"""Command-line front end.

Subcommands mirror the pipeline stages so each can be driven by hand:

    vdc generate      write a synthetic micro dataset directory
    vdc stats         summarize a dataset directory
    vdc trajectories  train an expert pool and save snapshot files
    vdc condense      run one selection or distillation method
    vdc evaluate      train fresh networks on a condensed set, report accuracy
    vdc run           execute a whole config end to end
    vdc table         re-render a results.json as a text table

`vdc run` consumes a YAML config (defaults applied for missing keys) and is
the cached, manifest-writing path; the other subcommands are uncached
one-offs for poking at individual pieces.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataio import compute_stats, make_micro_dataset, read_dataset, write_dataset
from .datm import TmConfig, run_datm
from .edc import DmConfig, run_edc
from .errors import CondensationError, ConfigError
from .evaluation import EvalConfig, evaluate
from .models import ModelSpec, build_model
from .pipeline import render_table, run_pipeline
from .selection import select_herding, select_random, select_rded
from .trajectory import (ExpertConfig, Teacher, load_trajectory,
                         save_trajectory, train_expert)

METHODS = ("random", "herding", "rded", "edc", "datm")


def _cmd_generate(args) -> int:
    ds = make_micro_dataset(
        num_classes=args.classes, videos_per_class=args.per_class,
        num_frames=args.frames, height=args.height, width=args.width,
        seed=args.seed, id_prefix=args.prefix)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} videos ({ds.num_classes} classes) to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    ds = read_dataset(args.data)
    s = compute_stats(ds)
    if args.json:
        print(json.dumps(s.to_dict(), sort_keys=True))
        return 0
    print(f"videos          {s.num_videos}")
    print(f"classes         {s.num_classes}")
    print(f"mean frames     {s.mean_frames:g}")
    print(f"median frames   {s.median_frames:g}")
    print(f"videos/class    {s.per_class_mean:g}")
    return 0


def _spec_for(ds, args) -> ModelSpec:
    c, h, w = ds[0].frame_shape()
    return ModelSpec(arch=args.arch,
                     input_size=(args.input_length, c, h, w),
                     num_classes=ds.num_classes,
                     width_mult=args.width_mult)


def _cmd_trajectories(args) -> int:
    ds = read_dataset(args.data)
    spec = _spec_for(ds, args)
    cfg = ExpertConfig(lr=args.lr, momentum=args.momentum,
                       batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(args.count):
        model = build_model(spec, seed=s)
        traj = train_expert(model, ds, epochs=args.epochs, config=cfg, seed=s)
        path = save_trajectory(traj, out / f"expert-{s}.traj")
        print(f"expert {s}: {args.epochs} epochs -> {path}")
    return 0


def _load_experts(path):
    files = sorted(Path(path).glob("*.traj"))
    if not files:
        raise ConfigError(f"no .traj files under {path}")
    trajs = [load_trajectory(f) for f in files]
    return trajs, trajs[0].model_spec()


def _cmd_condense(args) -> int:
    ds = read_dataset(args.data)
    if args.method == "random":
        out = select_random(ds, args.ipc, args.stored_length, seed=args.seed,
                            input_length=args.input_length)
    else:
        if not args.experts:
            raise ConfigError(f"method {args.method!r} needs --experts")
        trajs, spec = _load_experts(args.experts)
        teacher = Teacher.from_trajectory(trajs[0], spec)
        if args.method == "herding":
            out = select_herding(ds, args.ipc, args.stored_length, teacher)
        elif args.method == "rded":
            out = select_rded(ds, args.ipc, args.stored_length, teacher,
                              clips_per_video=args.clips_per_video,
                              seed=args.seed)
        else:
            init = select_random(ds, args.ipc, args.stored_length,
                                 seed=args.seed,
                                 input_length=args.input_length)
            if args.method == "datm":
                cfg = TmConfig(iterations=args.iterations,
                               expert_span=args.expert_span,
                               student_steps=args.student_steps,
                               pixel_lr=args.pixel_lr,
                               student_lr=args.student_lr)
                out = run_datm(trajs, init, cfg, seed=args.seed)
            else:
                cfg = DmConfig(iterations=args.iterations,
                               pixel_lr=args.pixel_lr)
                nets = [Teacher.from_trajectory(t, spec)
                        for t in trajs[:args.networks]]
                out = run_edc(ds, cfg, init, nets, seed=args.seed)
    write_dataset(out, args.out)
    print(f"{args.method}: {len(out)} videos "
          f"(ipc={out.ipc}, T_c={out.plan.stored_length}) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    condensed = read_dataset(args.condensed)
    val = read_dataset(args.val)
    labeling = args.labeling or condensed.labeling
    if not args.experts:
        raise ConfigError("--experts is required (defines the evaluated network)")
    trajs, spec = _load_experts(args.experts)
    teacher = Teacher.from_trajectory(trajs[0], spec) \
        if labeling in ("soft", "multi_sl") else None
    cfg = EvalConfig(labeling=labeling, loss=args.loss, epochs=args.epochs,
                     base_batch=args.base_batch, lr=args.lr,
                     cutmix=args.cutmix, seeds=tuple(args.seeds),
                     metric=args.metric,
                     teacher=teacher.id if teacher else None)
    report = evaluate(condensed, spec, cfg, val, teacher=teacher)
    for s, a in zip(report.seeds, report.accuracies):
        print(f"seed {s}: {report.metric} {a:.4f}")
    print(f"mean {report.mean:.4f} std {report.std:.4f}")
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=1))
        print(f"report -> {args.report}")
    return 0


def _cmd_run(args) -> int:
    manifest, _, table = run_pipeline(args.config, out_dir=args.out)
    cached = sum(s["cached"] for s in manifest.stages)
    print(table)
    print(f"{len(manifest.stages)} stages, {cached} cached")
    return 0


def _cmd_table(args) -> int:
    rows = json.loads(Path(args.results).read_text())
    print(render_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdc",
                                description="video dataset condensation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic micro dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prefix", default="v")
    g.set_defaults(func=_cmd_generate)

    s = sub.add_parser("stats", help="summarize a dataset directory")
    s.add_argument("data")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cmd_stats)

    t = sub.add_parser("trajectories", help="train an expert pool")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--count", type=int, default=3)
    t.add_argument("--epochs", type=int, default=24)
    t.add_argument("--arch", default="mini_c3d")
    t.add_argument("--input-length", type=int, default=8)
    t.add_argument("--width-mult", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--batch-size", type=int, default=8)
    t.set_defaults(func=_cmd_trajectories)

    c = sub.add_parser("condense", help="run one condensation method")
    c.add_argument("--method", required=True, choices=METHODS)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--experts", help="directory of .traj files")
    c.add_argument("--ipc", type=int, default=1)
    c.add_argument("--stored-length", type=int, default=8)
    c.add_argument("--input-length", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--clips-per-video", type=int, default=10)
    c.add_argument("--iterations", type=int, default=200)
    c.add_argument("--pixel-lr", type=float, default=1.0)
    c.add_argument("--expert-span", type=int, default=2)
    c.add_argument("--student-steps", type=int, default=8)
    c.add_argument("--student-lr", type=float, default=0.1)
    c.add_argument("--networks", type=int, default=1)
    c.set_defaults(func=_cmd_condense)

    e = sub.add_parser("evaluate", help="evaluate a condensed set")
    e.add_argument("--condensed", required=True)
    e.add_argument("--val", required=True)
    e.add_argument("--experts", help="directory of .traj files")
    e.add_argument("--labeling", choices=("hard", "soft", "multi_sl"),
                   help="default: the labeling recorded in the condensed set")
    e.add_argument("--loss", default="mse_gt", choices=("mse_gt", "kl"))
    e.add_argument("--epochs", type=int, default=300)
    e.add_argument("--base-batch", type=int, default=10)
    e.add_argument("--lr", type=float, default=1e-3)
    e.add_argument("--cutmix", action="store_true")
    e.add_argument("--seeds", type=int, nargs="+", default=[0])
    e.add_argument("--metric", default="top1", choices=("top1", "top5"))
    e.add_argument("--report", help="also write the report as JSON here")
    e.set_defaults(func=_cmd_evaluate)

    r = sub.add_parser("run", help="run a config end to end (cached)")
    r.add_argument("config")
    r.add_argument("--out", help="override the config's out_dir")
    r.set_defaults(func=_cmd_run)

    tb = sub.add_parser("table", help="re-render a results.json")
    tb.add_argument("results")
    tb.set_defaults(func=_cmd_table)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CondensationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
