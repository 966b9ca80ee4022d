"""Sample-level probe loss, per-sample projection gradients, and module sensitivity.

A probe sample is a token sequence with a mask marking the supervised
response positions.  The probe loss is the mean next-token cross-entropy over
those positions; its gradient with respect to each pretrained projection
weight is the raw signal everything else aggregates.  Module sensitivity is
the per-module average of squared Frobenius norms over a probe set, which is
identical to the trace of the per-module empirical Fisher block.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .linalg import frobenius_sq
from .model import (GradientSet, ModelParams, ModuleId, backward_projection_grads,
                    candidate_modules, forward)


@dataclass(frozen=True)
class ProbeSample:
    """Token sequence plus the boolean mask of supervised response positions.

    A masked position t means "the token at t is a supervised target,
    predicted from everything before t", so position 0 can never be masked.
    """

    tokens: np.ndarray
    response_mask: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        m = np.asarray(self.response_mask, dtype=bool)
        if t.ndim != 1 or m.ndim != 1:
            raise ValueError("tokens and response_mask must be 1-D")
        if t.size != m.size:
            raise ValueError(f"mask length {m.size} != token length {t.size}")
        if not m.any():
            raise ValueError("response mask must mark at least one position")
        if m[0]:
            raise ValueError("position 0 cannot be supervised (no preceding context)")
        t.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "response_mask", m)

    def __len__(self) -> int:
        return int(self.tokens.size)


def masked_cross_entropy(logits: np.ndarray, tokens: np.ndarray,
                         mask: np.ndarray) -> float:
    """Mean of -log p(tokens[t] | tokens[<t]) over masked positions t.

    logits[t-1] scores the prediction of tokens[t].
    """
    positions = np.flatnonzero(mask)
    rows = logits[positions - 1]                       # (|R|, vocab)
    m = np.max(rows, axis=-1, keepdims=True)
    logz = m + np.log(np.sum(np.exp(rows - m), axis=-1, keepdims=True))
    logp = rows - logz
    return float(np.mean(-logp[np.arange(positions.size), tokens[positions]]))


def masked_cross_entropy_grad(logits: np.ndarray, tokens: np.ndarray,
                              mask: np.ndarray) -> np.ndarray:
    """d(masked_cross_entropy)/d(logits): (softmax - onehot)/|R| at used rows."""
    positions = np.flatnonzero(mask)
    dlogits = np.zeros_like(logits)
    rows = logits[positions - 1]
    m = np.max(rows, axis=-1, keepdims=True)
    e = np.exp(rows - m)
    p = e / np.sum(e, axis=-1, keepdims=True)
    p[np.arange(positions.size), tokens[positions]] -= 1.0
    dlogits[positions - 1] = p / positions.size
    return dlogits


def probe_loss(params: ModelParams, sample: ProbeSample) -> float:
    """Mean cross-entropy over the sample's supervised response positions."""
    logits, _ = forward(params, sample.tokens)
    return masked_cross_entropy(logits, sample.tokens, sample.response_mask)


def sample_gradient(params: ModelParams, sample: ProbeSample,
                    wanted: Sequence[ModuleId] | None = None) -> GradientSet:
    """Exact probe-loss gradient for each candidate projection (or a subset)."""
    loss, grads = loss_and_gradient(params, sample, wanted)
    return grads


def loss_and_gradient(params: ModelParams, sample: ProbeSample,
                      wanted: Sequence[ModuleId] | None = None
                      ) -> tuple[float, GradientSet]:
    if wanted is None:
        wanted = candidate_modules(params.config)
    logits, cache = forward(params, sample.tokens)
    loss = masked_cross_entropy(logits, sample.tokens, sample.response_mask)
    dlogits = masked_cross_entropy_grad(logits, sample.tokens, sample.response_mask)
    return loss, backward_projection_grads(params, cache, dlogits, wanted)


@dataclass
class SensitivityMap:
    """Per-module average squared Frobenius norm of sample-wise gradients."""

    values: dict[ModuleId, float]
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("sensitivity requires at least one sample")
        bad = [m.name for m, v in self.values.items() if v < 0 or not np.isfinite(v)]
        if bad:
            raise ValueError(f"sensitivity must be finite and nonnegative: {bad}")


def sensitivity_from_gradients(gradient_sets: Sequence[GradientSet]) -> SensitivityMap:
    """Average the squared gradient norms of precomputed per-sample gradients.

    Samples are reduced in list order, so the result is reproducible for a
    fixed input ordering (and mathematically order-independent).
    """
    if not gradient_sets:
        raise ValueError("empty gradient list")
    modules = list(gradient_sets[0])
    values: dict[ModuleId, float] = {}
    for m in modules:
        shape = gradient_sets[0][m].shape
        total = 0.0
        for gs in gradient_sets:
            if m not in gs:
                raise ValueError(f"gradient set missing module {m.name}")
            if gs[m].shape != shape:
                raise ValueError(f"shape mismatch across samples for {m.name}")
            total += frobenius_sq(gs[m])
        values[m] = total / len(gradient_sets)
    return SensitivityMap(values=values, n_samples=len(gradient_sets))


def _gradient_job(args):
    params, sample = args
    return sample_gradient(params, sample)


def probe_gradients(params: ModelParams, probe_set: Sequence[ProbeSample],
                    workers: int = 1) -> list[GradientSet]:
    """Sample-wise gradients for a whole probe set, in sample-index order.

    Gradients are taken at the given (pretrained) parameters; any adapters a
    caller may hold are simply not part of ``params`` here.  With workers > 1
    the per-sample jobs run in a process pool; results are still reduced in
    sample-index order, so output is identical to the sequential run.
    """
    if not probe_set:
        raise ValueError("empty probe set")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_gradient_job, [(params, s) for s in probe_set]))
    return [sample_gradient(params, s) for s in probe_set]


def module_sensitivity(params: ModelParams, probe_set: Sequence[ProbeSample],
                       workers: int = 1) -> SensitivityMap:
    """Sensitivity of every candidate module over a probe set."""
    return sensitivity_from_gradients(probe_gradients(params, probe_set, workers))


def fisher_trace_check(gradients: Sequence[GradientSet],
                       module: ModuleId) -> tuple[float, float]:
    """Trace of the empirical Fisher block next to the sensitivity value.

    The trace route flattens each sample gradient and averages its squared
    Euclidean norm, never touching the matrix-norm code path; the second
    element is the module-sensitivity average.  The two are the same quantity
    and must agree to floating-point accuracy.
    """
    if not gradients:
        raise ValueError("empty gradient list")
    shape = gradients[0][module].shape
    trace_total = 0.0
    sens_total = 0.0
    for gs in gradients:
        g = gs[module]
        if g.shape != shape:
            raise ValueError(f"shape mismatch across samples for {module.name}")
        v = np.ravel(g)
        trace_total += float(np.dot(v, v))
        sens_total += frobenius_sq(g)
    n = len(gradients)
    return trace_total / n, sens_total / n


# --- probe-set files ---------------------------------------------------------

def save_probe_set(samples: Sequence[ProbeSample], path) -> None:
    """Line-delimited JSON records: {"tokens": [...], "mask": [0/1, ...]}."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"tokens": s.tokens.tolist(),
                                 "mask": s.response_mask.astype(int).tolist()}) + "\n")


def load_probe_set(path) -> list[ProbeSample]:
    samples = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            samples.append(ProbeSample(np.array(rec["tokens"], dtype=np.int64),
                                       np.array(rec["mask"], dtype=bool)))
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{i}: bad probe record: {exc}") from exc
    if not samples:
        raise ValueError(f"{path}: empty probe set")
    return samples
