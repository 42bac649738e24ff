"""Run directories: effective configuration, write-once checkpoints, resumable stages.

Layout of a run directory::

    config.json                 effective merged RunConfig
    stage<k>/metrics.jsonl      JSON-lines training metrics
    stage<k>/ckpt_<step>.json   manifest (+ .bin blob); never overwritten
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import data
from .cyclerl import GrpoConfig, heldout_reward_fn, run_stage3
from .djo import DjoConfig, run_stage2
from .evaluation import EvalReport, cycle_iou_fn, evaluate
from .net import (BadCheckpoint, ModelConfig, TinyDecoder, build_model, load_checkpoint,
                  make_optimizer, optimizer_tensors, restore_optimizer, save_checkpoint)
from .pretrain import Stage1Config, grounding_holdout_fn, run_stage1
from .seqcodec import Vocab
from .training import MetricsLog, MissingWarmStart
from .world import WorldConfig

OUTPUT_ROOT_ENV = "GRIDCYCLE_OUTPUT_ROOT"
CKPT_RE = re.compile(r"ckpt_(\d+)\.json$")


class RunConflict(ValueError):
    """A run directory already holds a different configuration or checkpoint."""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_run_dir(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


NUMERIC_MODULES = ("world", "seqcodec", "net", "tasks", "data", "training", "pretrain", "djo",
                   "cyclerl", "evaluation", "runs")


def code_version() -> str:
    """Digest of every source file that can influence a run's numbers."""
    h = hashlib.sha256()
    for f in (Path(__file__).parent / f"{m}.py" for m in NUMERIC_MODULES):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class ModelSpec:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    init_std: float = 0.02
    grid_embed: bool = True

    def build(self, world: WorldConfig, vocab: Vocab) -> ModelConfig:
        return ModelConfig(vocab.size, self.d_model, self.n_layers, self.n_heads,
                           max_positions=world.n_cells + 8, d_ff=self.d_ff, init_std=self.init_std,
                           grid=(world.H, world.W) if self.grid_embed else None)


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: DjoConfig = field(default_factory=DjoConfig)
    stage3: GrpoConfig = field(default_factory=GrpoConfig)
    layout_source: str = "heldout_real_like"
    seed: int = 0
    holdout_n: int = 64          # held-out layouts for periodic in-training evaluation
    eval_seed: int = 1           # seed of the held-out split
    checkpoint_every: int = 0

    _SECTIONS = {"world": WorldConfig, "model": ModelSpec, "stage1": Stage1Config,
                 "stage2": DjoConfig, "stage3": GrpoConfig}

    def __post_init__(self):
        if self.layout_source not in data.LAYOUT_SOURCES:
            raise ValueError(f"layout_source must be one of {data.LAYOUT_SOURCES}")

    @property
    def vocab(self) -> Vocab:
        return Vocab.for_world(self.world)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "world":
                v = WorldConfig.from_dict(v)
            elif f.name in cls._SECTIONS:
                v = _build(cls._SECTIONS[f.name], v)
            kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    def merged(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"stage1.steps": 100}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def stage_config(self, stage: int):
        """Stage config with the run seed threaded into its data stream."""
        c = copy.deepcopy({1: self.stage1, 2: self.stage2, 3: self.stage3}[stage])
        c.data_seed = self.seed
        return c


def _build(cls, d: dict):
    if isinstance(d, cls):
        return d
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def desk_profile(**over) -> RunConfig:
    """Small budgets on an 8x8 world; the whole pipeline fits a laptop CPU."""
    cfg = RunConfig(
        world=WorldConfig(H=8, W=8, C=6, K_max=4),
        model=ModelSpec(d_model=64, n_layers=3),
        stage1=Stage1Config(steps=2400, batch=32, lr=3e-3, eval_every=400),
        stage2=DjoConfig(steps=150, batch=16, lr=3e-4, eval_every=50),
        stage3=GrpoConfig(steps=400, batch=4, lr=1e-4, eval_every=100),
        checkpoint_every=400,
    )
    return cfg.merged(over) if over else cfg


PROFILES = {"default": RunConfig, "desk": desk_profile}


# -- checkpoints ----------------------------------------------------------------

def stage_dir(run_dir: Path, stage: int) -> Path:
    return Path(run_dir) / f"stage{stage}"


def checkpoint_prefix(sdir: Path, step: int) -> Path:
    return Path(sdir) / f"ckpt_{step:07d}"


def list_checkpoints(sdir: Path) -> list[tuple[int, Path]]:
    out = []
    if Path(sdir).is_dir():
        for f in Path(sdir).iterdir():
            m = CKPT_RE.match(f.name)
            if m:
                out.append((int(m.group(1)), f))
    return sorted(out)


def latest_checkpoint(sdir: Path) -> tuple[int, Path] | None:
    c = list_checkpoints(sdir)
    return c[-1] if c else None


def checkpoint_at(sdir: Path, step: int) -> Path:
    p = checkpoint_prefix(sdir, step).with_suffix(".json")
    if not p.exists():
        raise BadCheckpoint(f"no checkpoint for step {step} in {sdir}")
    return p


def _write_config(run_dir: Path, cfg: RunConfig) -> None:
    path = Path(run_dir) / "config.json"
    doc = {"config": cfg.to_dict(), "code_version": code_version()}
    if path.exists():
        old = json.loads(path.read_text())
        if old["config"] != doc["config"]:
            raise RunConflict(f"{run_dir} already holds a run with a different configuration")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_run_config(run_dir: Path) -> RunConfig:
    return RunConfig.from_dict(json.loads((Path(run_dir) / "config.json").read_text())["config"])


# -- training --------------------------------------------------------------------

def _eval_fn(stage: int, model: TinyDecoder, cfg: RunConfig):
    w, v = cfg.world, cfg.vocab
    if stage == 1:
        return grounding_holdout_fn(model, w, v, cfg.eval_seed, cfg.holdout_n)
    if stage == 2:
        return cycle_iou_fn(model, w, v, cfg.eval_seed, cfg.holdout_n)
    return heldout_reward_fn(model, w, v, cfg.eval_seed, cfg.holdout_n, cfg.stage3.reward)


def train_stage(cfg: RunConfig, stage: int, run_dir: str | Path, *, warm: str | Path | None = None,
                resume: bool = False, stop_after: int | None = None,
                save_steps: tuple[int, ...] = ()) -> Path:
    """Run one stage inside ``run_dir``; returns the manifest of the last checkpoint written."""
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    run_dir = Path(run_dir)
    sdir = stage_dir(run_dir, stage)
    scfg = cfg.stage_config(stage)
    log = MetricsLog(sdir / "metrics.jsonl")
    existing = latest_checkpoint(sdir)
    start = 0

    if existing and not resume:
        raise RunConflict(f"{sdir} already has checkpoints; pass resume to continue")
    if stage > 1 and warm is None and not existing:
        raise MissingWarmStart(f"stage {stage} needs a warm-start checkpoint")
    _write_config(run_dir, cfg)

    if existing:
        start, path = existing
        model, manifest, extra = load_checkpoint(path)
        warm = manifest["meta"].get("warm")
        opt = make_optimizer(model, scfg.lr)
        restore_optimizer(opt, model, extra)
        log.truncate_after(start)
    else:
        if stage == 1:
            model = build_model(cfg.model.build(cfg.world, cfg.vocab), seed=cfg.seed)
        else:
            model, _, _ = load_checkpoint(warm)
        opt = make_optimizer(model, scfg.lr)
        if (sdir / "metrics.jsonl").exists():
            (sdir / "metrics.jsonl").unlink()

    meta_base = {"stage": stage, "seed": cfg.seed, "world": cfg.world.to_dict(),
                 "warm": str(warm) if warm else None, "code_version": code_version()}

    def checkpoint_fn(step: int) -> None:
        prefix = checkpoint_prefix(sdir, step)
        if prefix.with_suffix(".json").exists():
            raise RunConflict(f"checkpoint {prefix} already exists")
        save_checkpoint(prefix, model, vocab=cfg.vocab.to_dict(), extra=optimizer_tensors(opt, model),
                        meta={**meta_base, "step": step})

    every = cfg.checkpoint_every
    wanted = set(save_steps)

    def ckpt_hook(step: int) -> None:
        if step in wanted or (every and step % every == 0) or step == scfg.steps or (stop_after is not None and step >= stop_after):
            checkpoint_fn(step)

    t0 = time.perf_counter()
    kw = dict(log=log, start=start, optimizer=opt, checkpoint_fn=ckpt_hook,
              checkpoint_every=1 if wanted else every, stop_after=stop_after,
              eval_fn=_eval_fn(stage, model, cfg))
    if stage == 1:
        run_stage1(model, scfg, cfg.world, cfg.vocab, **kw)
    elif stage == 2:
        run_stage2(model, scfg, cfg.world, cfg.vocab, **kw)
    else:
        ref, _, _ = load_checkpoint(warm)
        source = data.LayoutSource(cfg.layout_source, cfg.world, cfg.seed)
        run_stage3(model, scfg, cfg.world, cfg.vocab, source, ref=ref, **kw)
    if scfg.steps == 0 and not list_checkpoints(sdir):
        checkpoint_fn(0)
    last = latest_checkpoint(sdir)
    # wall-clock is kept apart from the metrics so that reruns compare bit-exactly
    with (sdir / "timing.jsonl").open("a") as f:
        f.write(json.dumps({"from_step": start, "to_step": last[0],
                            "seconds": time.perf_counter() - t0}) + "\n")
    return last[1]


def evaluate_checkpoint(path: str | Path, n: int = 256, seed: int = 1) -> EvalReport:
    model, manifest, _ = load_checkpoint(path)
    world = WorldConfig.from_dict(manifest["meta"]["world"])
    vocab = Vocab.from_dict(manifest["vocab"])
    with torch.no_grad():
        return evaluate(model, world, vocab, n_samples=n, seed=seed)


def stage_seconds(sdir: Path) -> float:
    """Total wall-clock spent training a stage directory (over all resumptions)."""
    p = Path(sdir) / "timing.jsonl"
    if not p.exists():
        return 0.0
    return sum(json.loads(l)["seconds"] for l in p.read_text().splitlines() if l.strip())
