"""Experiment plans: sequences of stage invocations, executed with shared lineages.

Runs that share a prefix of stage invocations share run directories, so the
stage ablation, the transition sweeps and the layout-source comparison reuse
each other's checkpoints.  Every directory is keyed by its lineage label and
lives under a code-version folder, which makes cached results safe to reuse.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .djo import heldout_loop_loss
from .evaluation import EvalReport
from .net import load_checkpoint, param_distance, param_norm
from .runs import (RunConfig, RunConflict, checkpoint_at, code_version, evaluate_checkpoint,
                   latest_checkpoint, list_checkpoints, stage_dir, stage_seconds, train_stage)
from .seqcodec import Vocab
from .world import WorldConfig


@dataclass(frozen=True)
class Step:
    stage: int
    warm_step: int | None = None          # start from the parent's checkpoint at this step
    tag: str = ""
    overrides: tuple = ()                 # ((dotted key, value), ...)

    @property
    def label(self) -> str:
        s = f"s{self.stage}{self.tag}"
        return s if self.warm_step is None else f"{s}@{self.warm_step}"


@dataclass
class PlanRow:
    name: str
    steps: list[Step]


@dataclass
class ExperimentPlan:
    name: str
    rows: list[PlanRow]
    sweep: bool = False     # rows report entry metrics and stage gains

    def __post_init__(self):
        for row in self.rows:
            stages = [s.stage for s in row.steps]
            if not stages or stages != sorted(set(stages)) or stages[0] != 1:
                raise ValueError(f"row {row.name!r}: stages must start at 1 and increase")


@dataclass
class _Node:
    key: tuple[str, ...]
    step: Step
    parent: tuple[str, ...]
    save_steps: set[int] = field(default_factory=set)


# -- plan library ----------------------------------------------------------------

def stages_plan() -> ExperimentPlan:
    s1, s2, s3 = Step(1), Step(2), Step(3)
    return ExperimentPlan("stages", [PlanRow("1", [s1]), PlanRow("1+2", [s1, s2]),
                                     PlanRow("1+3", [s1, s3]), PlanRow("1+2+3", [s1, s2, s3])])


def transition12_plan(budgets: list[int]) -> ExperimentPlan:
    return ExperimentPlan("transition12", [PlanRow(f"s1={b}", [Step(1), Step(2, warm_step=b)])
                                           for b in budgets], sweep=True)


def transition23_plan(budgets: list[int]) -> ExperimentPlan:
    """Stage-3 entrants of varying strength: Stage 2 (fixed budget) after each Stage-1 budget.

    The lineages coincide with ``transition12_plan`` up to Stage 2, so the two
    sweeps share their Stage-1 and Stage-2 runs.
    """
    return ExperimentPlan("transition23", [PlanRow(f"s1={b}", [Step(1), Step(2, warm_step=b), Step(3)])
                                           for b in budgets], sweep=True)


def sources_plan(sources=("heldout_real_like", "random", "scripted")) -> ExperimentPlan:
    rows = []
    for src in sources:
        s3 = Step(3) if src == "heldout_real_like" else Step(3, tag=src, overrides=(("layout_source", src),))
        rows.append(PlanRow(src, [Step(1), Step(2), s3]))
    return ExperimentPlan("sources", rows)


def shortcut_plan(steps: int | None = 2000) -> ExperimentPlan:
    """Joint Stage 2 against loop-only Stage 2, both for ``steps`` steps (None keeps the profile's)."""
    budget = (("stage2.steps", steps),) if steps else ()
    joint = Step(2, tag="joint" if steps else "", overrides=budget)
    loop = Step(2, tag="looponly", overrides=budget + (("stage2.loop_only", True),))
    return ExperimentPlan("shortcut", [PlanRow("joint", [Step(1), joint]),
                                       PlanRow("loop_only", [Step(1), loop])], sweep=True)


def anchor_plan(beta: float = 10.0) -> ExperimentPlan:
    s3 = Step(3, tag="beta", overrides=(("stage3.beta", beta),))
    return ExperimentPlan("anchor", [PlanRow(f"beta={beta:g}", [Step(1), Step(2), s3])], sweep=True)


# -- execution --------------------------------------------------------------------

def _nodes(plan: ExperimentPlan) -> dict[tuple, _Node]:
    nodes: dict[tuple, _Node] = {}
    for row in plan.rows:
        key: tuple[str, ...] = ()
        for st in row.steps:
            parent, key = key, key + (st.label,)
            nodes.setdefault(key, _Node(key, st, parent))
            if st.warm_step is not None:
                nodes[parent].save_steps.add(st.warm_step)
    return nodes


def lineage_dir(root: Path, seed: int, key: tuple[str, ...]) -> Path:
    return Path(root) / code_version() / f"seed{seed}" / "-".join(key)


def _node_config(base: RunConfig, seed: int, node: _Node, nodes: dict) -> RunConfig:
    over = {"seed": seed}
    k = node.key
    while k:                                  # overrides accumulate along the lineage
        over.update(dict(nodes[k].step.overrides))
        k = nodes[k].parent
    return base.merged(over)


def _complete(sdir: Path, steps: int, needed: set[int]) -> bool:
    have = {s for s, _ in list_checkpoints(sdir)}
    return steps in have and needed <= have


def _warm_path(root, seed, nodes, node, cfgs) -> Path | None:
    if not node.parent:
        return None
    parent = nodes[node.parent]
    pdir = stage_dir(lineage_dir(root, seed, parent.key), parent.step.stage)
    if node.step.warm_step is not None:
        return checkpoint_at(pdir, node.step.warm_step)
    return checkpoint_at(pdir, cfgs[parent.key].stage_config(parent.step.stage).steps)


def execute(plan: ExperimentPlan, base: RunConfig, root: str | Path, seeds, *, eval_n: int = 256,
            log=print) -> list[dict]:
    """Train every lineage node (reusing finished ones), evaluate, and return table rows."""
    root = Path(root)
    nodes = _nodes(plan)
    out = []
    for seed in seeds:
        cfgs = {k: _node_config(base, seed, n, nodes) for k, n in nodes.items()}
        for key in sorted(nodes, key=len):
            node = nodes[key]
            cfg = cfgs[key]
            rdir = lineage_dir(root, seed, key)
            sdir = stage_dir(rdir, node.step.stage)
            steps = cfg.stage_config(node.step.stage).steps
            if _complete(sdir, steps, node.save_steps):
                continue
            resume = latest_checkpoint(sdir) is not None
            if resume and latest_checkpoint(sdir)[0] >= steps:
                raise RunConflict(f"{sdir} is finished but lacks checkpoints {sorted(node.save_steps)}")
            log(f"[seed {seed}] training {'-'.join(key)}")
            train_stage(cfg, node.step.stage, rdir, warm=_warm_path(root, seed, nodes, node, cfgs),
                        resume=resume, save_steps=tuple(sorted(node.save_steps)))
        for row in plan.rows:
            out.append(_row_result(plan, row, root, seed, nodes, cfgs, eval_n))
            log(_fmt(out[-1]))
    return out


def plan_seconds(plan: ExperimentPlan, base: RunConfig, root: str | Path, seeds) -> float:
    """Training wall-clock recorded for every lineage node of ``plan``."""
    nodes = _nodes(plan)
    return sum(stage_seconds(stage_dir(lineage_dir(root, seed, k), n.step.stage))
               for seed in seeds for k, n in nodes.items())


def cached_report(ckpt: Path, n: int, seed: int) -> EvalReport:
    path = Path(ckpt).with_name(Path(ckpt).stem + f".eval_n{n}_s{seed}.json")
    if path.exists():
        return EvalReport(**json.loads(path.read_text()))
    rep = evaluate_checkpoint(ckpt, n, seed)
    path.write_text(rep.to_json())
    return rep


def cached_loop_loss(ckpt: Path, n: int, seed: int) -> float:
    path = Path(ckpt).with_name(Path(ckpt).stem + f".loop_n{n}_s{seed}.json")
    if path.exists():
        return json.loads(path.read_text())["loop_loss"]
    model, manifest, _ = load_checkpoint(ckpt)
    world = WorldConfig.from_dict(manifest["meta"]["world"])
    value = heldout_loop_loss(model, world, Vocab.from_dict(manifest["vocab"]), seed, n)
    path.write_text(json.dumps({"loop_loss": value}))
    return value


def _metrics_rows(sdir: Path) -> list[dict]:
    p = sdir / "metrics.jsonl"
    return [json.loads(l) for l in p.read_text().splitlines() if l.strip()] if p.exists() else []


def _row_result(plan, row, root, seed, nodes, cfgs, eval_n) -> dict:
    key = tuple(s.label for s in row.steps)
    node = nodes[key]
    cfg = cfgs[key]
    ckpt = checkpoint_at(stage_dir(lineage_dir(root, seed, key), node.step.stage),
                         cfg.stage_config(node.step.stage).steps)
    rep = cached_report(ckpt, eval_n, cfg.eval_seed)
    res = {"plan": plan.name, "row": row.name, "seed": seed, "stages": "+".join(str(s.stage) for s in row.steps)}
    res.update({k: v for k, v in rep.to_dict().items() if k not in ("n_samples", "seed")})
    if plan.sweep:
        warm = _warm_path(root, seed, nodes, node, cfgs)
        entry = cached_report(warm, eval_n, cfg.eval_seed)
        for k in ("AP", "acc50", "mAcc", "cycle_iou", "cell_accuracy"):
            res[f"entry_{k}"] = getattr(entry, k)
            res[f"gain_{k}"] = getattr(rep, k) - getattr(entry, k)
        metrics = _metrics_rows(stage_dir(lineage_dir(root, seed, key), node.step.stage))
        if node.step.stage == 2:
            res["loop_loss_entry"] = cached_loop_loss(warm, eval_n, cfg.eval_seed)
            res["loop_loss_final"] = cached_loop_loss(ckpt, eval_n, cfg.eval_seed)
        if node.step.stage == 3:
            ref, _, _ = load_checkpoint(warm)
            model, _, _ = load_checkpoint(ckpt)
            res["param_distance_to_ref"] = param_distance(model, ref)
            res["ref_norm"] = param_norm(ref)
            held = [m for m in metrics if "heldout_reward" in m]
            if held:
                res["heldout_reward_last"] = held[-1]["heldout_reward"]
    return res


def _fmt(r: dict) -> str:
    keys = ("AP", "acc50", "cycle_iou", "cell_accuracy")
    return f"  {r['plan']:<12} seed={r['seed']} {r['row']:<18} " + " ".join(f"{k}={r[k]:.4f}" for k in keys)


def write_table(rows: list[dict], out_dir: str | Path, name: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path
