import numpy as np
import pytest

from domlora.gradcheck import fd_projection_grad, relative_error
from domlora.linalg import RngState
from domlora.model import ModuleId, ProjKind, candidate_modules, forward
from domlora.probe import (ProbeSample, fisher_trace_check, load_probe_set,
                           masked_cross_entropy, masked_cross_entropy_grad,
                           module_sensitivity, probe_gradients, probe_loss,
                           sample_gradient, save_probe_set,
                           sensitivity_from_gradients)


def _mask(n, positions):
    m = np.zeros(n, dtype=bool)
    m[list(positions)] = True
    return m


def test_sample_validation():
    with pytest.raises(ValueError):
        ProbeSample(np.array([1, 2, 3]), np.array([True, False]))   # length
    with pytest.raises(ValueError):
        ProbeSample(np.array([1, 2, 3]), np.zeros(3, dtype=bool))   # empty mask
    with pytest.raises(ValueError):
        ProbeSample(np.array([1, 2, 3]), _mask(3, [0]))             # position 0


def test_sample_arrays_read_only():
    s = ProbeSample(np.array([1, 2, 3]), _mask(3, [2]))
    with pytest.raises(ValueError):
        s.tokens[0] = 9


def test_uniform_logits_loss_is_log_vocab():
    vocab = 64
    tokens = np.array([5, 9, 11, 2])
    logits = np.zeros((4, vocab))
    loss = masked_cross_entropy(logits, tokens, _mask(4, [1, 3]))
    assert np.isclose(loss, np.log(vocab), rtol=1e-14)


def test_perfect_prediction_loss_is_zero():
    tokens = np.array([3, 7, 1])
    logits = np.full((3, 16), -1e4)
    logits[0, 7] = 1e4     # predicts token at position 1
    logits[1, 1] = 1e4     # predicts token at position 2
    assert masked_cross_entropy(logits, tokens, _mask(3, [1, 2])) == 0.0


def test_two_position_loss_is_mean_of_singles():
    gen = RngState(17).generator()
    tokens = gen.integers(0, 16, size=6)
    logits = gen.normal(0, 2, size=(6, 16))
    a = masked_cross_entropy(logits, tokens, _mask(6, [2]))
    b = masked_cross_entropy(logits, tokens, _mask(6, [5]))
    both = masked_cross_entropy(logits, tokens, _mask(6, [2, 5]))
    assert np.isclose(both, (a + b) / 2.0, rtol=1e-14)


def test_loss_grad_touches_only_predecessor_rows():
    gen = RngState(18).generator()
    tokens = gen.integers(0, 16, size=6)
    logits = gen.normal(0, 2, size=(6, 16))
    d = masked_cross_entropy_grad(logits, tokens, _mask(6, [2, 5]))
    used = {1, 4}
    for row in range(6):
        if row in used:
            assert np.abs(d[row]).max() > 0
        else:
            assert np.array_equal(d[row], np.zeros(16))
    # rows of (softmax - onehot)/|R| sum to zero
    assert np.allclose(d.sum(axis=1), 0.0, atol=1e-15)


def test_probe_loss_matches_forward_composition(tiny_params, tiny_sample):
    logits, _ = forward(tiny_params, tiny_sample.tokens)
    direct = masked_cross_entropy(logits, tiny_sample.tokens, tiny_sample.response_mask)
    assert probe_loss(tiny_params, tiny_sample) == direct


def test_sample_gradient_fd_agreement(tiny_params, tiny_sample):
    grads = sample_gradient(tiny_params, tiny_sample)
    for module in [ModuleId(0, ProjKind.GATE), ModuleId(1, ProjKind.O)]:
        fd = fd_projection_grad(tiny_params, tiny_sample, module, h=1e-4)
        assert relative_error(grads[module], fd) < 1e-5


def test_gradient_scales_linearly_with_loss(tiny_params, tiny_sample):
    from domlora.model import backward_projection_grads
    logits, cache = forward(tiny_params, tiny_sample.tokens)
    dlogits = masked_cross_entropy_grad(logits, tiny_sample.tokens,
                                        tiny_sample.response_mask)
    wanted = candidate_modules(tiny_params.config)
    g1 = backward_projection_grads(tiny_params, cache, dlogits, wanted)
    _, cache2 = forward(tiny_params, tiny_sample.tokens)
    g2 = backward_projection_grads(tiny_params, cache2, 2.0 * dlogits, wanted)
    for m in wanted:
        assert np.array_equal(g2[m], 2.0 * g1[m])


def test_gradients_independent_of_probe_set_order(tiny_params):
    gen = RngState(23).generator()
    samples = [ProbeSample(gen.integers(0, 16, size=7), _mask(7, [3, 5]))
               for _ in range(4)]
    fwd = probe_gradients(tiny_params, samples)
    rev = probe_gradients(tiny_params, samples[::-1])
    for a, b in zip(fwd, rev[::-1]):
        for m in a:
            assert np.array_equal(a[m], b[m])


def test_sensitivity_hand_value_via_injected_gradients():
    m = ModuleId(0, ProjKind.Q)
    g1 = {m: np.array([[1.0, 0.0], [0.0, 0.0]])}
    g2 = {m: np.array([[0.0, 0.0], [0.0, 3.0]])}
    sens = sensitivity_from_gradients([g1, g2])
    assert sens.values[m] == 5.0
    assert sens.n_samples == 2


def test_sensitivity_single_sample_is_squared_norm():
    m = ModuleId(1, ProjKind.DOWN)
    g = np.array([[1.0, -2.0], [0.5, 4.0]])
    sens = sensitivity_from_gradients([{m: g}])
    assert sens.values[m] == float(np.sum(g * g))


def test_sensitivity_permutation_and_duplication_invariance(tiny_params):
    gen = RngState(29).generator()
    samples = [ProbeSample(gen.integers(0, 16, size=6), _mask(6, [2, 4]))
               for _ in range(5)]
    base = module_sensitivity(tiny_params, samples)
    shuffled = module_sensitivity(tiny_params, samples[::-1])
    doubled = module_sensitivity(tiny_params, samples + samples)
    for m in base.values:
        assert np.isclose(base.values[m], shuffled.values[m], rtol=1e-12)
        assert np.isclose(base.values[m], doubled.values[m], rtol=1e-12)
    assert doubled.n_samples == 10


def test_sensitivity_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        sensitivity_from_gradients([])
    m = ModuleId(0, ProjKind.Q)
    with pytest.raises(ValueError):
        sensitivity_from_gradients([{m: np.zeros((2, 2))}, {m: np.zeros((3, 2))}])
    with pytest.raises(ValueError):
        module_sensitivity(None, [])


def test_fisher_trace_identity_random(tiny_params):
    gen = RngState(31).generator()
    samples = [ProbeSample(gen.integers(0, 16, size=8), _mask(8, [4, 6]))
               for _ in range(6)]
    grads = probe_gradients(tiny_params, samples)
    for module in candidate_modules(tiny_params.config):
        trace, sens = fisher_trace_check(grads, module)
        assert np.isclose(trace, sens, rtol=1e-12, atol=0.0)


def test_fisher_trace_scalar_and_zero_cases():
    m = ModuleId(0, ProjKind.K)
    trace, sens = fisher_trace_check([{m: np.array([[-1.5]])}], m)
    assert trace == 2.25 and sens == 2.25
    trace, sens = fisher_trace_check([{m: np.zeros((3, 3))}], m)
    assert trace == 0.0 and sens == 0.0
    with pytest.raises(ValueError):
        fisher_trace_check([], m)
    with pytest.raises(ValueError):
        fisher_trace_check([{m: np.zeros((2, 2))}, {m: np.zeros((2, 3))}], m)


def test_workers_reduce_in_sample_order(tiny_params):
    gen = RngState(37).generator()
    samples = [ProbeSample(gen.integers(0, 16, size=6), _mask(6, [3]))
               for _ in range(4)]
    seq = module_sensitivity(tiny_params, samples, workers=1)
    par = module_sensitivity(tiny_params, samples, workers=2)
    for m in seq.values:
        assert seq.values[m] == par.values[m]


def test_probe_set_file_roundtrip(tmp_path):
    gen = RngState(41).generator()
    samples = [ProbeSample(gen.integers(0, 16, size=5), _mask(5, [2, 4]))
               for _ in range(3)]
    path = tmp_path / "probe.jsonl"
    save_probe_set(samples, path)
    loaded = load_probe_set(path)
    assert len(loaded) == 3
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.response_mask, b.response_mask)


def test_probe_set_file_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": [1, 2], "mask": [1, 0]}\n')   # mask at position 0
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_probe_set(path)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ValueError):
        load_probe_set(empty)
