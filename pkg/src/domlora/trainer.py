"""Fine-tuning harness: schedule, single runs, placement sweeps, pretraining.

Runs are pure functions of (base weights, plan, config, data): batches are
drawn from a stream keyed only by the config seed, so different plans under
the same seed see the identical data order, and rerunning reproduces every
recorded number exactly.  Parameters outside a plan's trainable set are
never written to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import RngState
from .lora import PlacementMode, PlacementPlan, apply_plan, make_optimizer, train_step_lora
from .model import ModelParams, backward, forward
from .probe import (loss_and_gradient, masked_cross_entropy,
                    masked_cross_entropy_grad, probe_loss)
from .tasks import TaskData

SCHEDULE_NAME = "linear-warmup-cosine-decay"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    peak_lr: float = 2e-2
    warmup_ratio: float = 0.03
    schedule: str = SCHEDULE_NAME
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2 (warmup and decay both need room)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.warmup_ratio < 1.0):
            raise ValueError("warmup_ratio must be in (0, 1)")
        if self.peak_lr <= 0.0:
            raise ValueError("peak_lr must be positive")
        if self.schedule != SCHEDULE_NAME:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def warmup_steps(self) -> int:
        return max(1, min(self.steps - 1, round(self.warmup_ratio * self.steps)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate at a step: linear 0 -> peak over the warmup, then cosine
    decay peak -> 0 at the final step."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.peak_lr * step / w
    frac = (step - w) / (cfg.steps - w)
    return 0.5 * cfg.peak_lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class RunRecord:
    placement: str
    mode: str
    trainable_params: int
    steps: int
    loss_curve: list[float]
    final_train_loss: float
    final_eval_loss: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "placement": self.placement, "mode": self.mode,
            "trainable_params": self.trainable_params, "steps": self.steps,
            "loss_curve": self.loss_curve,
            "final_train_loss": self.final_train_loss,
            "final_eval_loss": self.final_eval_loss, "seed": self.seed,
        }


@dataclass
class RunResult:
    record: RunRecord
    plan: PlacementPlan
    params: ModelParams  # final effective parameters


def _batch_indices(seed: int, step: int, pool_size: int, batch_size: int) -> np.ndarray:
    # keyed by (seed, step) only, so every plan sees the same data order
    gen = RngState(seed).child(step).generator()
    return gen.integers(0, pool_size, size=batch_size)


def run_experiment(base: ModelParams, plan: PlacementPlan, cfg: TrainConfig,
                   data: TaskData) -> RunResult:
    """Train the plan's parameters on the task and record the run.

    The base weights are read-only throughout; only adapter factors (or the
    single owned projection in the full-weight mode) change.
    """
    for target in plan.targets():
        if target not in base.proj:
            raise KeyError(f"plan targets unknown module {target.name}")
    optimizer = make_optimizer(cfg.optimizer, cfg.weight_decay)
    targets = plan.targets()

    owned: dict = {}
    if plan.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
        eff = apply_plan(base, plan)           # holds the single owned copy
        owned[plan.full_weight_target] = eff.proj[plan.full_weight_target]

    loss_curve: list[float] = []
    for step in range(cfg.steps):
        if plan.mode is not PlacementMode.FULL_WEIGHT_DOMINANT:
            eff = apply_plan(base, plan)
        idx = _batch_indices(cfg.seed, step, len(data.train), cfg.batch_size)
        grads = {m: 0.0 for m in targets}
        batch_loss = 0.0
        for i in idx:
            loss, gs = loss_and_gradient(eff, data.train[i], targets)
            batch_loss += loss
            for m in targets:
                grads[m] = grads[m] + gs[m]
        grads = {m: g / cfg.batch_size for m, g in grads.items()}
        loss_curve.append(batch_loss / cfg.batch_size)
        train_step_lora(plan, grads, optimizer, lr_at(step, cfg), owned_weights=owned)

    if plan.mode is not PlacementMode.FULL_WEIGHT_DOMINANT:
        eff = apply_plan(base, plan)
    eval_loss = float(np.mean([probe_loss(eff, s) for s in data.eval]))
    record = RunRecord(
        placement=plan.describe(), mode=plan.mode.value,
        trainable_params=plan.trainable_param_count(base.config),
        steps=cfg.steps, loss_curve=loss_curve,
        final_train_loss=loss_curve[-1], final_eval_loss=eval_loss, seed=cfg.seed,
    )
    return RunResult(record=record, plan=plan, params=eff)


def placement_sweep(base: ModelParams, plans: Sequence[PlacementPlan],
                    cfg: TrainConfig, data: TaskData) -> list[RunResult]:
    """Run every plan under the identical seed, config, and data order."""
    if len(plans) < 2:
        raise ValueError("a sweep needs at least two plans")
    return [run_experiment(base, plan, cfg, data) for plan in plans]


COMPARISON_FIELDS = ["plan", "trainable_params", "steps",
                     "final_train_loss", "final_eval_loss", "seed"]


def comparison_rows(records: Sequence[RunRecord]) -> list[dict]:
    return [{
        "plan": r.placement, "trainable_params": r.trainable_params,
        "steps": r.steps, "final_train_loss": r.final_train_loss,
        "final_eval_loss": r.final_eval_loss, "seed": r.seed,
    } for r in records]


def pretrain_base(params: ModelParams, cfg: TrainConfig, data: TaskData) -> list[float]:
    """Full-parameter training of every weight in place; returns the loss curve.

    Used to give the toy backbone nontrivial structure before probing, so the
    sensitivity landscape is measured on a trained network.
    """
    optimizer = make_optimizer(cfg.optimizer, cfg.weight_decay)
    arrays = params.named_arrays()
    loss_curve: list[float] = []
    for step in range(cfg.steps):
        idx = _batch_indices(cfg.seed, step, len(data.train), cfg.batch_size)
        acc: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for i in idx:
            sample = data.train[i]
            logits, cache = forward(params, sample.tokens)
            batch_loss += masked_cross_entropy(logits, sample.tokens,
                                               sample.response_mask)
            dlogits = masked_cross_entropy_grad(logits, sample.tokens,
                                                sample.response_mask)
            full = backward(params, cache, dlogits)
            for name, g in full.named_arrays().items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
        loss_curve.append(batch_loss / cfg.batch_size)
        lr = lr_at(step, cfg)
        optimizer.start_step()
        for name, g in acc.items():
            optimizer.update(name, arrays[name], g / cfg.batch_size, lr)
    return loss_curve
