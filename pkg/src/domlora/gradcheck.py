"""Finite-difference oracles for gradient verification.

These deliberately know nothing about the backward pass: they perturb one
entry at a time and re-run the forward loss, so agreement with the analytic
gradients is an independent check, not a tautology.
"""

from __future__ import annotations

import numpy as np

from .lora import LoraAdapter, effective_weight
from .model import ModelParams, ModuleId
from .probe import ProbeSample, probe_loss


def central_difference_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    """Entrywise central difference (f(x+h) - f(x-h)) / 2h.

    ``f`` takes no arguments and reads ``x`` by reference; entries are
    perturbed in place and restored exactly.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-30) -> float:
    """Normwise relative error ||a - b||_F / max(||a||_F, ||b||_F)."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / max(na, nb, floor)


def fd_projection_grad(params: ModelParams, sample: ProbeSample,
                       module: ModuleId, h: float = 1e-4) -> np.ndarray:
    """Probe-loss gradient of one projection weight by central differences."""
    w = params.proj[module]
    return central_difference_grad(lambda: probe_loss(params, sample), w, h)


def fd_adapter_factor_grads(base: ModelParams, adapter: LoraAdapter,
                            sample: ProbeSample, h: float = 1e-4
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Probe-loss gradients of the adapter factors by central differences.

    The loss is the full model loss with the adapter folded into its target
    projection, re-assembled on every evaluation so each perturbed factor
    value is actually exercised end to end.
    """
    proj = dict(base.proj)

    def loss() -> float:
        proj[adapter.target] = effective_weight(base.proj[adapter.target], adapter)
        eff = ModelParams(config=base.config, embed=base.embed, pos=base.pos,
                          unembed=base.unembed, attn_gain=base.attn_gain,
                          ffn_gain=base.ffn_gain, final_gain=base.final_gain,
                          proj=proj)
        return probe_loss(eff, sample)

    grad_a = central_difference_grad(loss, adapter.A, h)
    grad_b = central_difference_grad(loss, adapter.B, h)
    return grad_a, grad_b
