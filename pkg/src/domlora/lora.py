"""Low-rank adapters, placement plans, factor gradients, and the update step.

An adapter reparameterizes one frozen projection as W0 + s*B*A with
s = alpha/rank, B zero-initialized and A Kaiming-uniform, so attaching a
fresh adapter never changes model outputs.  The loss gradient with respect
to the factors follows from the full-weight gradient G by the chain rule:

    dB = s * G @ A.T        dA = s * B.T @ G

which at initialization (B = 0) leaves A with an exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .linalg import RngState, kaiming_uniform_init
from .model import (GradientSet, ModelConfig, ModelParams, ModuleId, ProjKind,
                    module_sort_key, projection_shape)
from .serialize import load_arrays, save_arrays


@dataclass
class LoraAdapter:
    target: ModuleId
    rank: int
    alpha: float
    A: np.ndarray  # (rank, d_in)
    B: np.ndarray  # (d_out, rank)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise ValueError(f"factor shapes {self.A.shape}, {self.B.shape} "
                             f"inconsistent with rank {self.rank}")

    @property
    def scale(self) -> float:
        """alpha / rank, always derived so it can never go stale."""
        return self.alpha / self.rank

    @property
    def param_count(self) -> int:
        return self.A.size + self.B.size


def init_adapter(rng: RngState, config: ModelConfig, target: ModuleId,
                 rank: int, alpha: float) -> LoraAdapter:
    """Fresh adapter: B all-zero, A Kaiming-uniform in the target's input dim."""
    d_out, d_in = projection_shape(config, target.kind)
    return LoraAdapter(target=target, rank=rank, alpha=alpha,
                       A=kaiming_uniform_init(rng, rank, d_in),
                       B=np.zeros((d_out, rank)))


def effective_weight(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """base + (alpha/rank) * B @ A."""
    update = adapter.scale * (adapter.B @ adapter.A)
    if update.shape != base.shape:
        raise ValueError(f"adapter update shape {update.shape} != base {base.shape}")
    return base + update


def factor_gradients(full_grad: np.ndarray,
                     adapter: LoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    """(dA, dB) induced by the effective-weight gradient at the current factors."""
    expected = (adapter.B.shape[0], adapter.A.shape[1])
    if full_grad.shape != expected:
        raise ValueError(f"gradient shape {full_grad.shape} != projection {expected}")
    s = adapter.scale
    grad_a = s * (adapter.B.T @ full_grad)
    grad_b = s * (full_grad @ adapter.A.T)
    return grad_a, grad_b


class PlacementMode(Enum):
    ALL = "all"
    LAYER_SUBSET = "layer-subset"
    KIND_SUBSET = "kind-subset"
    DOMINANT_ONLY = "dominant-only"
    FULL_WEIGHT_DOMINANT = "full-dominant"


@dataclass
class PlacementPlan:
    """Which modules receive trainable updates, and through what parameters.

    Adapter modes train only the listed adapters' factors.  The full-weight
    mode trains the single named projection directly and carries no adapters.
    """

    mode: PlacementMode
    adapters: list[LoraAdapter] = field(default_factory=list)
    full_weight_target: ModuleId | None = None

    def __post_init__(self):
        targets = [a.target for a in self.adapters]
        if len(set(targets)) != len(targets):
            raise ValueError("duplicate adapter targets in plan")
        if self.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
            if self.adapters or self.full_weight_target is None:
                raise ValueError("full-weight mode carries no adapters and exactly "
                                 "one trainable module")
        else:
            if self.full_weight_target is not None:
                raise ValueError("only the full-weight mode names a full-weight target")
            if not self.adapters:
                raise ValueError("adapter plan must carry at least one adapter")
            if self.mode is PlacementMode.DOMINANT_ONLY and len(self.adapters) != 1:
                raise ValueError("dominant-only carries exactly one adapter")

    def targets(self) -> list[ModuleId]:
        if self.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
            return [self.full_weight_target]
        return [a.target for a in self.adapters]

    def trainable_param_count(self, config: ModelConfig) -> int:
        if self.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
            d_out, d_in = projection_shape(config, self.full_weight_target.kind)
            return d_out * d_in
        return sum(a.param_count for a in self.adapters)

    def describe(self) -> str:
        if self.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
            return f"{self.mode.value}[{self.full_weight_target.name}]"
        ads = sorted(self.adapters, key=lambda a: module_sort_key(a.target))
        r, alpha = ads[0].rank, ads[0].alpha
        if len(ads) <= 3:
            sites = ",".join(a.target.name for a in ads)
        else:
            sites = f"{len(ads)} modules"
        return f"{self.mode.value}[{sites};r={r},alpha={alpha:g}]"


def _adapters_for(rng: RngState, config: ModelConfig, targets: Sequence[ModuleId],
                  rank: int, alpha: float) -> list[LoraAdapter]:
    targets = sorted(targets, key=module_sort_key)
    streams = rng.split(len(targets))
    return [init_adapter(s, config, t, rank, alpha) for s, t in zip(streams, targets)]


def plan_all(rng: RngState, config: ModelConfig, rank: int, alpha: float) -> PlacementPlan:
    from .model import candidate_modules
    return PlacementPlan(PlacementMode.ALL,
                         _adapters_for(rng, config, candidate_modules(config), rank, alpha))


def plan_layer_subset(rng: RngState, config: ModelConfig, layers: Sequence[int],
                      rank: int, alpha: float) -> PlacementPlan:
    targets = [ModuleId(l, k) for l in sorted(set(layers)) for k in ProjKind]
    return PlacementPlan(PlacementMode.LAYER_SUBSET,
                         _adapters_for(rng, config, targets, rank, alpha))


def plan_kind_subset(rng: RngState, config: ModelConfig, kinds: Sequence[ProjKind],
                     rank: int, alpha: float,
                     layers: Sequence[int] | None = None) -> PlacementPlan:
    layer_range = range(config.n_layers) if layers is None else sorted(set(layers))
    targets = [ModuleId(l, k) for l in layer_range for k in dict.fromkeys(kinds)]
    return PlacementPlan(PlacementMode.KIND_SUBSET,
                         _adapters_for(rng, config, targets, rank, alpha))


def plan_dominant_only(rng: RngState, config: ModelConfig, module: ModuleId,
                       rank: int, alpha: float) -> PlacementPlan:
    return PlacementPlan(PlacementMode.DOMINANT_ONLY,
                         [init_adapter(rng, config, module, rank, alpha)])


def plan_full_weight_dominant(module: ModuleId) -> PlacementPlan:
    return PlacementPlan(PlacementMode.FULL_WEIGHT_DOMINANT, [],
                         full_weight_target=module)


def apply_plan(base: ModelParams, plan: PlacementPlan) -> ModelParams:
    """Model parameters with the plan's current updates folded in.

    Untouched modules share base arrays (which are never written to); every
    targeted module gets a fresh array, so the base stays bit-identical.
    """
    proj = dict(base.proj)
    if plan.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
        proj[plan.full_weight_target] = base.proj[plan.full_weight_target].copy()
    else:
        for adapter in plan.adapters:
            proj[adapter.target] = effective_weight(base.proj[adapter.target], adapter)
    return ModelParams(config=base.config, embed=base.embed, pos=base.pos,
                       unembed=base.unembed, attn_gain=base.attn_gain,
                       ffn_gain=base.ffn_gain, final_gain=base.final_gain, proj=proj)


# --- optimizers ---------------------------------------------------------------

class Sgd:
    """Plain gradient descent: p <- p - lr * g."""

    def start_step(self) -> None:
        pass

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        param -= lr * grad


class AdamW:
    """Adam moments with decoupled weight decay.

    Per step t (1-based) and parameter p with gradient g:

        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g*g
        p <- p - lr * ( (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) + wd*p )

    Defaults: b1=0.9, b2=0.999, eps=1e-8, wd=0.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def start_step(self) -> None:
        self.t += 1

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        m = self._m.setdefault(key, np.zeros_like(param))
        v = self._v.setdefault(key, np.zeros_like(param))
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        param -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * param)


def make_optimizer(name: str, weight_decay: float = 0.0):
    if name == "adamw":
        return AdamW(weight_decay=weight_decay)
    if name == "sgd":
        return Sgd()
    raise ValueError(f"unknown optimizer {name!r}")


def train_step_lora(plan: PlacementPlan, grads: GradientSet, optimizer,
                    lr: float,
                    owned_weights: dict[ModuleId, np.ndarray] | None = None) -> None:
    """Apply one update to exactly the plan's trainable parameters.

    ``grads`` maps each targeted module to the loss gradient of its effective
    weight.  Adapter factors are updated through the chain rule; in the
    full-weight mode the projection in ``owned_weights`` is updated directly.
    Nothing else is touched.
    """
    for target in plan.targets():
        if target not in grads:
            raise KeyError(f"missing gradient for targeted module {target.name}")
    optimizer.start_step()
    if plan.mode is PlacementMode.FULL_WEIGHT_DOMINANT:
        if owned_weights is None or plan.full_weight_target not in owned_weights:
            raise ValueError("full-weight mode needs the owned projection array")
        w = owned_weights[plan.full_weight_target]
        optimizer.update(plan.full_weight_target.name, w,
                         grads[plan.full_weight_target], lr)
        return
    for adapter in plan.adapters:
        grad_a, grad_b = factor_gradients(grads[adapter.target], adapter)
        optimizer.update(f"{adapter.target.name}.A", adapter.A, grad_a, lr)
        optimizer.update(f"{adapter.target.name}.B", adapter.B, grad_b, lr)


# --- adapter checkpoints -------------------------------------------------------

def save_adapter(adapter: LoraAdapter, path) -> None:
    save_arrays(path, {"kind": "lora-adapter", "target": adapter.target.name,
                       "rank": adapter.rank, "alpha": adapter.alpha},
                {"A": adapter.A, "B": adapter.B})


def load_adapter(path) -> LoraAdapter:
    header, arrays = load_arrays(path)
    if header.get("kind") != "lora-adapter":
        raise ValueError(f"{path}: not an adapter checkpoint")
    return LoraAdapter(target=ModuleId.parse(header["target"]),
                       rank=int(header["rank"]), alpha=float(header["alpha"]),
                       A=arrays["A"], B=arrays["B"])
