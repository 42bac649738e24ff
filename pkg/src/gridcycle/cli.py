"""Command-line entry point.

    gridcycle dataset   --n 1000 --out data.jsonl
    gridcycle train     --stage 1 --run demo --profile desk
    gridcycle train     --stage 2 --run demo           (warm start from demo/stage1)
    gridcycle eval      --checkpoint runs/demo/stage2/ckpt_0000300.json
    gridcycle gradcheck
    gridcycle ablate    --plan stages --profile desk --seeds 0 1 2

Exit status: 0 on success, 1 on validation failure, 2 on divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import ablate, data
from .net import BadCheckpoint
from .runs import (PROFILES, RunConfig, latest_checkpoint, load_run_config, resolve_run_dir,
                   stage_dir, train_stage, evaluate_checkpoint, output_root)
from .seqcodec import CodecError
from .training import DivergenceError, MissingWarmStart
from .world import WorldConfig, WorldError, layout_to_dict, render, sample_layout

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "layout_source", None):
        over["layout_source"] = args.layout_source
    stage = getattr(args, "stage", None)
    for flag in ("steps", "lr", "batch"):
        v = getattr(args, flag, None)
        if v is not None:
            if stage is None:
                raise ValueError(f"--{flag} needs --stage")
            over[f"stage{stage}.{flag}"] = v
    return over


def _base_config(args, run_dir: Path | None = None) -> RunConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        # accept both a bare config and a run directory's config.json
        cfg = RunConfig.from_dict(doc.get("config", doc))
    elif run_dir is not None and (run_dir / "config.json").exists():
        cfg = load_run_config(run_dir)
    else:
        cfg = PROFILES[args.profile]()
    return cfg.merged(_overrides(args))


# -- subcommands ------------------------------------------------------------------

def cmd_dataset(args) -> int:
    world = WorldConfig(H=args.H, W=args.W, C=args.C, K_max=args.K_max, seed=args.seed)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to replace it")
    rng = data.rng_for(args.seed, data.TRAIN)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as f:
        f.write(json.dumps({"header": {"world": world.to_dict(), "n": args.n, "seed": args.seed}}) + "\n")
        for _ in range(args.n):
            lay = sample_layout(rng, world)
            img = render(lay, world) if not args.layouts_only else None
            f.write(json.dumps(layout_to_dict(lay, world, img)) + "\n")
    print(f"wrote {args.n} records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = resolve_run_dir(args.run)
    cfg = _base_config(args, run_dir)
    sdir = stage_dir(run_dir, args.stage)
    resume = args.resume and latest_checkpoint(sdir) is not None
    warm = args.warm
    if warm is None and args.stage > 1 and not resume:
        prev = latest_checkpoint(stage_dir(run_dir, args.stage - 1))
        if prev is None:
            raise MissingWarmStart(f"stage {args.stage} needs --warm or a finished stage {args.stage - 1} in {run_dir}")
        warm = prev[1]
    path = train_stage(cfg, args.stage, run_dir, warm=warm, resume=resume, stop_after=args.stop_after)
    print(f"checkpoint: {path}")
    print(f"metrics:    {sdir / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    rep = evaluate_checkpoint(ckpt, args.n, args.seed)
    print(rep.table())
    out = Path(args.out) if args.out else ckpt.with_name(ckpt.stem + f".eval_n{args.n}_s{args.seed}.json")
    out.write_text(rep.to_json())
    print(f"report: {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(corrupt=args.corrupt, only=args.suite)
    for r in results:
        print(r.line())
    if args.out:
        Path(args.out).write_text(json.dumps([{"suite": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol,
                                               "passed": r.passed, "worst": r.worst} for r in results], indent=1))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def _plan(args) -> ablate.ExperimentPlan:
    if args.plan == "stages":
        return ablate.stages_plan()
    if args.plan == "transition12":
        return ablate.transition12_plan(args.budgets)
    if args.plan == "transition23":
        return ablate.transition23_plan(args.budgets)
    if args.plan == "sources":
        return ablate.sources_plan()
    if args.plan == "shortcut":
        return ablate.shortcut_plan()
    return ablate.anchor_plan(args.beta)


def cmd_ablate(args) -> int:
    if args.plan in ("transition12", "transition23") and not args.budgets:
        raise ValueError(f"plan {args.plan} needs --budgets")
    cfg = _base_config(args)
    root = Path(args.out) if args.out else output_root() / "ablate"
    rows = ablate.execute(_plan(args), cfg, root / "runs", args.seeds, eval_n=args.eval_n)
    csv_path, json_path = ablate.write_table(rows, root, args.plan)
    print(f"table: {csv_path}\n       {json_path}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridcycle", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=1,
                   help="torch intra-op threads (1 keeps reruns bit-exact)")
    sub = p.add_subparsers(dest="cmd", required=True)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. stage2.lam=0.5 (repeatable)")
        sp.add_argument("--seed", type=int)

    d = sub.add_parser("dataset", help="write sampled layouts (+ rendered grids) as JSON lines")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--H", type=int, default=16)
    d.add_argument("--W", type=int, default=16)
    d.add_argument("--C", type=int, default=6)
    d.add_argument("--K-max", dest="K_max", type=int, default=5)
    d.add_argument("--layouts-only", action="store_true")
    d.add_argument("--force", action="store_true")
    d.set_defaults(fn=cmd_dataset)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--run", required=True, help="run directory (relative paths live under the output root)")
    t.add_argument("--warm", help="warm-start checkpoint manifest for stages 2 and 3")
    t.add_argument("--resume", action="store_true", help="continue from the stage's latest checkpoint")
    t.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this step")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--layout-source", choices=data.LAYOUT_SOURCES)
    config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=256)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every objective")
    g.add_argument("--suite", action="append", choices=("net_ce", "stage1", "loop", "grpo"))
    g.add_argument("--corrupt", action="store_true", help="perturb the analytic gradient (must fail)")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="run an experiment plan and tabulate the results")
    a.add_argument("--plan", required=True,
                   choices=("stages", "transition12", "transition23", "sources", "shortcut", "anchor"))
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--budgets", type=int, nargs="+", help="stage-1 budgets for the transition sweeps")
    a.add_argument("--beta", type=float, default=10.0)
    a.add_argument("--eval-n", type=int, default=256)
    a.add_argument("--out")
    config_flags(a)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingWarmStart, BadCheckpoint, CodecError, WorldError, FileExistsError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
