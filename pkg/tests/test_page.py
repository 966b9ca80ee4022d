import numpy as np
import pytest

from domlora.linalg import RngState
from domlora.model import ModuleId, ProjKind, candidate_modules, input_dims
from domlora.page import (PageMap, PageProvenance, concentration_report,
                          expected_ata_check, page_closed_form, page_monte_carlo,
                          page_trace_form, page_trace_map, select_dominant)
from domlora.probe import SensitivityMap, probe_gradients, module_sensitivity

D = ProjKind.DOWN


def _page_map(values, rank=16, scale=2.0):
    return PageMap(values=values, rank=rank, scale=scale,
                   provenance=PageProvenance.CLOSED_FORM)


def test_closed_form_hand_value():
    m = ModuleId(0, D)
    sens = SensitivityMap({m: 9.0}, n_samples=1)
    pm = page_closed_form(sens, rank=64, scale=2.0, d_in={m: 96})
    # 4 * 64 / 288 * 9 = 8
    assert abs(pm.values[m] - 8.0) < 1e-12


def test_closed_form_zero_sensitivity():
    m = ModuleId(0, D)
    pm = page_closed_form(SensitivityMap({m: 0.0}, 1), 64, 2.0, {m: 96})
    assert pm.values[m] == 0.0


def test_closed_form_default_scale_squares():
    # alpha=128, rank=64 gives scale 2, entering as scale^2 = 4
    m = ModuleId(0, D)
    sens = SensitivityMap({m: 1.0}, 1)
    s2 = page_closed_form(sens, 64, 2.0, {m: 96}).values[m]
    s1 = page_closed_form(sens, 64, 1.0, {m: 96}).values[m]
    assert s2 == 4.0 * s1


def test_closed_form_missing_module_or_bad_dim():
    m = ModuleId(0, D)
    sens = SensitivityMap({m: 1.0}, 1)
    with pytest.raises(KeyError):
        page_closed_form(sens, 4, 1.0, {})
    with pytest.raises(ValueError):
        page_closed_form(sens, 4, 1.0, {m: 0})


def test_trace_form_identity_on_random_gradients(tiny_params):
    gen = RngState(50).generator()
    from domlora.probe import ProbeSample
    samples = []
    for _ in range(5):
        mask = np.zeros(8, dtype=bool)
        mask[[3, 6]] = True
        samples.append(ProbeSample(gen.integers(0, 16, size=8), mask))
    grads = probe_gradients(tiny_params, samples)
    sens = module_sensitivity(tiny_params, samples)
    pm = page_closed_form(sens, 8, 1.5, input_dims(tiny_params.config))
    for module in candidate_modules(tiny_params.config):
        tv = page_trace_form(grads, module, 8, 1.5)
        assert np.isclose(tv, pm.values[module], rtol=1e-12, atol=0.0)
    tm = page_trace_map(grads, 8, 1.5)
    assert tm.provenance is PageProvenance.TRACE_FORM


def test_trace_form_zero_and_identity_gradient():
    m = ModuleId(0, D)
    assert page_trace_form([{m: np.zeros((4, 6))}], m, 8, 2.0) == 0.0
    # single sample, G = I(d_in): value is scale^2 * rank / 3
    d_in = 6
    val = page_trace_form([{m: np.eye(d_in)}], m, 8, 2.0)
    assert np.isclose(val, 4.0 * 8 / 3.0, rtol=1e-14)


def test_trace_form_errors():
    m = ModuleId(0, D)
    with pytest.raises(ValueError):
        page_trace_form([], m, 4, 1.0)
    with pytest.raises(ValueError):
        page_trace_form([{m: np.zeros((2, 3))}, {m: np.zeros((3, 3)) }], m, 4, 1.0)


def test_monte_carlo_zero_gradients():
    m = ModuleId(0, D)
    est, se = page_monte_carlo([{m: np.zeros((4, 6))}], m, 4, 2.0, 50, RngState(1))
    assert est == 0.0 and se == 0.0


def test_monte_carlo_scale_quadratic_same_stream():
    m = ModuleId(0, D)
    g = {m: RngState(2).generator().normal(0, 1, size=(4, 6))}
    e1, s1 = page_monte_carlo([g], m, 4, 1.0, 200, RngState(3))
    e2, s2 = page_monte_carlo([g], m, 4, 2.0, 200, RngState(3))
    assert e2 == 4.0 * e1
    assert s2 == 4.0 * s1


def test_monte_carlo_matches_closed_form():
    m = ModuleId(0, D)
    gen = RngState(4).generator()
    grads = [{m: gen.normal(0, 1, size=(5, 12))} for _ in range(3)]
    sens = SensitivityMap({m: float(np.mean([np.sum(g[m] ** 2) for g in grads]))}, 3)
    closed = page_closed_form(sens, 8, 2.0, {m: 12}).values[m]
    est, se = page_monte_carlo(grads, m, 8, 2.0, 4000, RngState(5))
    assert abs(est - closed) <= 4.0 * se


def test_monte_carlo_trial_validation():
    m = ModuleId(0, D)
    with pytest.raises(ValueError):
        page_monte_carlo([{m: np.zeros((2, 2))}], m, 4, 1.0, 1, RngState(0))


def test_expected_ata_unit_case():
    mc = expected_ata_check(1, 1, 20000, RngState(6))
    assert abs(mc.mean[0, 0] - 1.0 / 3.0) <= 5.0 * mc.stderr[0, 0]
    assert mc.target[0, 0] == 1.0 / 3.0


def test_expected_ata_r4_d12():
    mc = expected_ata_check(4, 12, 50000, RngState(7))
    assert np.allclose(np.diag(mc.target), 1.0 / 9.0)
    off = ~np.eye(12, dtype=bool)
    assert mc.target[off].max() == 0.0
    assert mc.max_sigma < 5.0


def test_expected_ata_deviation_shrinks():
    small = expected_ata_check(4, 12, 200, RngState(8))
    big = expected_ata_check(4, 12, 20000, RngState(8))
    assert big.max_abs_deviation < small.max_abs_deviation


def test_select_dominant_basic():
    vals = {ModuleId(l, k): 1.0 for l in range(4) for k in ProjKind}
    vals[ModuleId(2, D)] = 7.0
    assert select_dominant(_page_map(vals)) == ModuleId(2, D)


def test_select_dominant_restriction_ignores_attention_peak():
    vals = {ModuleId(0, ProjKind.Q): 100.0, ModuleId(1, D): 1.0, ModuleId(2, D): 2.0}
    pm = _page_map(vals)
    assert select_dominant(pm) == ModuleId(2, D)
    assert select_dominant(pm, restrict_kind=None) == ModuleId(0, ProjKind.Q)


def test_select_dominant_scaling_invariance():
    gen = RngState(9).generator()
    vals = {ModuleId(l, k): float(gen.uniform(0.1, 5.0))
            for l in range(3) for k in ProjKind}
    pm = _page_map(vals)
    pick = select_dominant(pm)
    for c in (0.25, 3.0, 1e6):
        scaled = _page_map({m: c * v for m, v in vals.items()})
        assert select_dominant(scaled) == pick
    # any strictly increasing transform preserves the argmax as well
    warped = _page_map({m: float(np.expm1(v)) for m, v in vals.items()})
    assert select_dominant(warped) == pick


def test_select_dominant_tie_breaks_to_lowest_layer():
    vals = {ModuleId(0, D): 2.0, ModuleId(1, D): 2.0, ModuleId(2, D): 1.0}
    assert select_dominant(_page_map(vals)) == ModuleId(0, D)


def test_select_dominant_errors():
    with pytest.raises(ValueError):
        select_dominant(_page_map({}))
    with pytest.raises(ValueError):
        select_dominant(_page_map({ModuleId(0, ProjKind.Q): 1.0}))  # no Down


def test_concentration_single_module():
    rep = concentration_report(_page_map({ModuleId(0, D): 3.0}))
    assert rep.share_of_total == 1.0
    assert rep.share_among_down == 1.0


def test_concentration_uniform_map():
    vals = {ModuleId(l, k): 1.0 for l in range(4) for k in ProjKind}
    rep = concentration_report(_page_map(vals))
    assert np.isclose(rep.share_of_total, 1.0 / 28.0, rtol=1e-14)
    assert np.isclose(rep.share_among_down, 1.0 / 4.0, rtol=1e-14)


def test_concentration_hand_map():
    vals = {ModuleId(0, D): 1.0, ModuleId(1, D): 8.0, ModuleId(2, D): 1.0,
            ModuleId(0, ProjKind.Q): 4.0, ModuleId(1, ProjKind.UP): 6.0}
    rep = concentration_report(_page_map(vals))
    assert rep.share_of_total == 8.0 / 20.0
    assert rep.share_among_down == 8.0 / 10.0


def test_concentration_rejects_zero_total():
    with pytest.raises(ValueError):
        concentration_report(_page_map({ModuleId(0, D): 0.0}))


def test_page_map_rejects_negative_values():
    with pytest.raises(ValueError):
        _page_map({ModuleId(0, D): -1.0})
