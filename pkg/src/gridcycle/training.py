"""Shared optimisation loop: metrics log, checkpoint hooks, divergence guard."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable

import torch


class DivergenceError(RuntimeError):
    pass


class MissingWarmStart(ValueError):
    pass


class MetricsLog:
    """JSON-lines sink; keeps an in-memory copy for callers that want it."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []

    def truncate_after(self, step: int) -> None:
        if self.path and self.path.exists():
            kept = [l for l in self.path.read_text().splitlines()
                    if l.strip() and json.loads(l).get("step", 0) <= step]
            self.path.write_text("".join(l + "\n" for l in kept))
            self.rows = [json.loads(l) for l in kept]

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as f:
                f.write(json.dumps(row) + "\n")


def check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}")


def run_loop(n_steps: int, step_fn: Callable[[int], dict], *, start: int = 0,
             log: MetricsLog | None = None, log_every: int = 1,
             eval_fn: Callable[[int], dict] | None = None, eval_every: int = 0,
             checkpoint_fn: Callable[[int], None] | None = None, checkpoint_every: int = 0,
             stop_after: int | None = None, timing_key: str | None = None,
             batch_size: int = 1) -> int:
    """Run ``step_fn`` for steps ``start .. n_steps-1``; returns the next step index.

    ``stop_after`` halts early (after a checkpoint) to simulate interruption.
    """
    step = start
    t0 = time.perf_counter()
    done_since = 0
    while step < n_steps:
        row = step_fn(step)
        done_since += 1
        step += 1
        if eval_fn is not None and eval_every and (step % eval_every == 0 or step == n_steps):
            row.update(eval_fn(step))
        if log is not None and (step % log_every == 0 or step == n_steps):
            if timing_key:
                dt = time.perf_counter() - t0
                row[timing_key] = batch_size * done_since / dt if dt > 0 else float("inf")
                t0, done_since = time.perf_counter(), 0
            log.write({"step": step, **row})
        if checkpoint_fn is not None and (
                (checkpoint_every and step % checkpoint_every == 0) or step == n_steps
                or (stop_after is not None and step >= stop_after)):
            checkpoint_fn(step)
        if stop_after is not None and step >= stop_after:
            break
    return step


def no_grad_eval(model: torch.nn.Module):
    model.eval()
    return torch.no_grad()
