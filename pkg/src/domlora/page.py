"""Projected adapter gradient energy (PAGE), three ways, plus module selection.

PAGE scores a candidate adapter site by the expected squared norm of the
gradient its trainable factor receives at initialization, averaged over the
Kaiming-uniform draw of the frozen-at-init factor A.  It is computed here by
three independent routes that must agree:

  closed form      scale^2 * rank / (3 * d_in) * sensitivity
  trace form       (scale^2 / N) * sum_i tr(G_i^T G_i * (rank/(3 d_in)) I)
  Monte Carlo      sample A, evaluate (scale^2 / N) * sum_i ||G_i A^T||_F^2

The first two are algebraically identical and must match to 1e-12 relative;
the Monte Carlo estimate converges to them at the usual 1/sqrt(trials) rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .linalg import RngState
from .model import GradientSet, ModuleId, ProjKind, module_sort_key
from .probe import SensitivityMap


class PageProvenance(Enum):
    CLOSED_FORM = "closed-form"
    TRACE_FORM = "trace-form"
    MONTE_CARLO = "monte-carlo"


@dataclass
class PageMap:
    """Per-module PAGE values together with how they were produced."""

    values: dict[ModuleId, float]
    rank: int
    scale: float
    provenance: PageProvenance
    trials: int | None = None

    def __post_init__(self):
        bad = [m.name for m, v in self.values.items() if v < 0 or not np.isfinite(v)]
        if bad:
            raise ValueError(f"PAGE values must be finite and nonnegative: {bad}")


def page_closed_form(sens: SensitivityMap, rank: int, scale: float,
                     d_in: dict[ModuleId, int]) -> PageMap:
    """scale^2 * rank / (3 d_in) * sensitivity, per module."""
    values: dict[ModuleId, float] = {}
    for m, s_emp in sens.values.items():
        if m not in d_in:
            raise KeyError(f"missing input dimension for {m.name}")
        if d_in[m] < 1:
            raise ValueError(f"input dimension for {m.name} must be >= 1")
        values[m] = (scale * scale * rank) / (3.0 * d_in[m]) * s_emp
    return PageMap(values=values, rank=rank, scale=scale,
                   provenance=PageProvenance.CLOSED_FORM)


def page_trace_form(grad_sets: Sequence[GradientSet], module: ModuleId,
                    rank: int, scale: float) -> float:
    """Evaluate PAGE by the trace route, with the expected A^T A moment
    substituted as the explicit matrix (rank/(3 d_in)) * I."""
    if not grad_sets:
        raise ValueError("empty gradient list")
    shape = grad_sets[0][module].shape
    d_in = shape[1]
    moment = (rank / (3.0 * d_in)) * np.eye(d_in)
    total = 0.0
    for gs in grad_sets:
        g = gs[module]
        if g.shape != shape:
            raise ValueError(f"shape mismatch across samples for {module.name}")
        total += float(np.trace(g.T @ g @ moment))
    return (scale * scale) * total / len(grad_sets)


def page_trace_map(grad_sets: Sequence[GradientSet], rank: int,
                   scale: float) -> PageMap:
    values = {m: page_trace_form(grad_sets, m, rank, scale) for m in grad_sets[0]}
    return PageMap(values=values, rank=rank, scale=scale,
                   provenance=PageProvenance.TRACE_FORM)


def page_monte_carlo(grad_sets: Sequence[GradientSet], module: ModuleId,
                     rank: int, scale: float, trials: int, rng: RngState,
                     chunk: int = 128) -> tuple[float, float]:
    """Estimate the defining expectation by sampling the init factor A.

    Each trial draws A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)) entrywise and
    evaluates (scale^2/N) * sum_i ||G_i @ A.T||_F^2.  Returns the sample mean
    and its standard error over trials.  Trials are drawn from a single child
    stream in a fixed chunked order, so results are reproducible.
    """
    if trials < 2:
        raise ValueError("need at least two trials for a standard error")
    if not grad_sets:
        raise ValueError("empty gradient list")
    stacked = np.concatenate([gs[module] for gs in grad_sets], axis=0)  # (N*d_out, d_in)
    n = len(grad_sets)
    d_in = stacked.shape[1]
    bound = 1.0 / np.sqrt(d_in)
    gen = rng.child(0).generator()
    vals = np.empty(trials)
    done = 0
    while done < trials:
        take = min(chunk, trials - done)
        a = gen.uniform(-bound, bound, size=(take, rank, d_in))
        y = stacked @ a.transpose(0, 2, 1)               # (take, N*d_out, rank)
        vals[done:done + take] = (scale * scale / n) * np.sum(y * y, axis=(1, 2))
        done += take
    estimate = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(trials))
    return estimate, stderr


class MomentCheck(NamedTuple):
    """Empirical mean of A^T A against its analytic value (rank/(3 d_in)) I."""

    mean: np.ndarray
    stderr: np.ndarray
    target: np.ndarray
    max_abs_deviation: float
    max_sigma: float
    trials: int


def expected_ata_check(rank: int, d_in: int, trials: int, rng: RngState,
                       chunk: int = 4096) -> MomentCheck:
    """Monte Carlo check of E[A^T A] under the Kaiming-uniform draw.

    Accumulates per-entry means and variances of A^T A over independent
    draws of A and compares them to the analytic diagonal rank/(3 d_in).
    The max deviation shrinks like 1/sqrt(trials).
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    bound = 1.0 / np.sqrt(d_in)
    gen = rng.child(0).generator()
    s1 = np.zeros((d_in, d_in))
    s2 = np.zeros((d_in, d_in))
    done = 0
    while done < trials:
        take = min(chunk, trials - done)
        a = gen.uniform(-bound, bound, size=(take, rank, d_in))
        ata = np.einsum("tri,trj->tij", a, a)
        s1 += ata.sum(axis=0)
        s2 += np.square(ata).sum(axis=0)
        done += take
    mean = s1 / trials
    var = (s2 / trials - mean * mean) * (trials / (trials - 1.0))
    stderr = np.sqrt(np.maximum(var, 0.0) / trials)
    target = (rank / (3.0 * d_in)) * np.eye(d_in)
    dev = np.abs(mean - target)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.where(dev == 0.0, 0.0, dev / stderr)
    return MomentCheck(mean=mean, stderr=stderr, target=target,
                       max_abs_deviation=float(dev.max()),
                       max_sigma=float(sigma.max()), trials=trials)


def select_dominant(pm: PageMap,
                    restrict_kind: ProjKind | None = ProjKind.DOWN) -> ModuleId:
    """Module with the largest PAGE value.

    By default only down-projections compete; pass ``restrict_kind=None`` to
    rank every module.  Ties break toward the lowest layer index (then the
    fixed kind order), so selection is deterministic.
    """
    if not pm.values:
        raise ValueError("empty PAGE map")
    candidates = [m for m in pm.values
                  if restrict_kind is None or m.kind is restrict_kind]
    if not candidates:
        raise ValueError(f"no modules of kind {restrict_kind} in PAGE map")
    return min(candidates, key=lambda m: (-pm.values[m],) + module_sort_key(m))


class ConcentrationReport(NamedTuple):
    share_of_total: float
    share_among_down: float


def concentration_report(pm: PageMap) -> ConcentrationReport:
    """How concentrated the map is on its dominant module.

    Returns the dominant module's share of the total PAGE mass and of the
    mass within its own projection kind (the down-projections, when any are
    present).
    """
    total = sum(pm.values.values())
    if not pm.values or total <= 0.0:
        raise ValueError("PAGE map must have positive total")
    has_down = any(m.kind is ProjKind.DOWN for m in pm.values)
    dominant = select_dominant(pm, ProjKind.DOWN if has_down else None)
    kind_total = sum(v for m, v in pm.values.items() if m.kind is dominant.kind)
    return ConcentrationReport(share_of_total=pm.values[dominant] / total,
                               share_among_down=pm.values[dominant] / kind_total)


def page_report_rows(sens: SensitivityMap, pm: PageMap,
                     d_in: dict[ModuleId, int]) -> list[dict]:
    """One record per module: layer, kind, d_in, sensitivity, PAGE, shares."""
    total = sum(pm.values.values())
    kind_totals: dict[ProjKind, float] = {}
    for m, v in pm.values.items():
        kind_totals[m.kind] = kind_totals.get(m.kind, 0.0) + v
    rows = []
    for m in sorted(pm.values, key=module_sort_key):
        v = pm.values[m]
        rows.append({
            "layer": m.layer,
            "kind": m.kind.value,
            "d_in": d_in[m],
            "sensitivity": sens.values[m],
            "page": v,
            "share_of_total": v / total if total > 0 else 0.0,
            "share_within_kind": v / kind_totals[m.kind] if kind_totals[m.kind] > 0 else 0.0,
        })
    return rows


PAGE_REPORT_FIELDS = ["layer", "kind", "d_in", "sensitivity", "page",
                      "share_of_total", "share_within_kind"]
