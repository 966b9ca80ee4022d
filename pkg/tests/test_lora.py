import numpy as np
import pytest

from domlora.gradcheck import central_difference_grad
from domlora.linalg import RngState
from domlora.lora import (AdamW, LoraAdapter, PlacementMode, PlacementPlan, Sgd,
                          apply_plan, effective_weight, factor_gradients,
                          init_adapter, load_adapter, plan_all,
                          plan_dominant_only, plan_full_weight_dominant,
                          plan_kind_subset, plan_layer_subset, save_adapter,
                          train_step_lora)
from domlora.model import ModelConfig, ModuleId, ProjKind, forward

CFG = ModelConfig()  # d_model 32, d_ff 96
DOWN1 = ModuleId(1, ProjKind.DOWN)


def test_init_adapter_shapes_and_zero_b():
    ad = init_adapter(RngState(1), CFG, DOWN1, rank=16, alpha=32.0)
    assert ad.A.shape == (16, 96)          # Down has d_in = d_ff
    assert ad.B.shape == (32, 16)
    assert np.array_equal(ad.B, np.zeros_like(ad.B))
    assert np.abs(ad.A).max() <= 1.0 / np.sqrt(96)
    assert ad.scale == 2.0


def test_scale_recomputed_from_alpha():
    ad = init_adapter(RngState(1), CFG, DOWN1, rank=16, alpha=32.0)
    ad.alpha = 16.0
    assert ad.scale == 1.0


def test_effective_weight_fresh_adapter_is_base():
    base = RngState(2).generator().normal(0, 1, size=(32, 96))
    ad = init_adapter(RngState(3), CFG, DOWN1, rank=8, alpha=16.0)
    assert np.array_equal(effective_weight(base, ad), base)


def test_effective_weight_hand_case():
    base = np.zeros((2, 3))
    ad = LoraAdapter(target=ModuleId(0, ProjKind.Q), rank=1, alpha=1.0,
                     A=np.array([[2.0, 0.0, 0.0]]), B=np.array([[1.0], [0.0]]))
    out = effective_weight(base, ad)
    assert np.array_equal(out, np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))


def test_effective_weight_linear_in_alpha():
    gen = RngState(4).generator()
    base = gen.normal(0, 1, size=(32, 96))
    ad = init_adapter(RngState(5), CFG, DOWN1, rank=4, alpha=8.0)
    ad.B[:] = gen.normal(0, 1, ad.B.shape)
    u1 = effective_weight(base, ad) - base
    ad.alpha = 16.0
    u2 = effective_weight(base, ad) - base
    assert np.array_equal(u2, 2.0 * u1)


def test_effective_weight_shape_mismatch():
    ad = init_adapter(RngState(6), CFG, DOWN1, rank=2, alpha=4.0)
    with pytest.raises(ValueError):
        effective_weight(np.zeros((3, 3)), ad)


def test_factor_gradients_at_init():
    gen = RngState(7).generator()
    ad = init_adapter(RngState(8), CFG, DOWN1, rank=4, alpha=8.0)
    g = gen.normal(0, 1, size=(32, 96))
    grad_a, grad_b = factor_gradients(g, ad)
    assert np.array_equal(grad_a, np.zeros_like(ad.A))
    assert np.array_equal(grad_b, ad.scale * (g @ ad.A.T))


def test_factor_gradients_zero_full_grad():
    ad = init_adapter(RngState(9), CFG, DOWN1, rank=4, alpha=8.0)
    ad.B[:] = 1.0
    grad_a, grad_b = factor_gradients(np.zeros((32, 96)), ad)
    assert np.array_equal(grad_a, np.zeros_like(grad_a))
    assert np.array_equal(grad_b, np.zeros_like(grad_b))


def test_factor_gradients_bilinear_fd():
    # oracle on the scalar surrogate <G, s*B*A>: its exact factor gradients
    # are what the chain rule claims for a loss with constant G
    gen = RngState(10).generator()
    ad = init_adapter(RngState(11), CFG, ModuleId(0, ProjKind.Q), rank=3, alpha=6.0)
    ad.B[:] = gen.normal(0, 0.5, ad.B.shape)
    g = gen.normal(0, 1, size=(32, 32))

    def loss():
        return float(np.sum(g * (ad.scale * (ad.B @ ad.A))))

    fd_a = central_difference_grad(loss, ad.A, 1e-5)
    fd_b = central_difference_grad(loss, ad.B, 1e-5)
    grad_a, grad_b = factor_gradients(g, ad)
    assert np.linalg.norm(grad_a - fd_a) / np.linalg.norm(grad_a) < 1e-6
    assert np.linalg.norm(grad_b - fd_b) / np.linalg.norm(grad_b) < 1e-6


def test_factor_gradients_shape_check():
    ad = init_adapter(RngState(12), CFG, DOWN1, rank=2, alpha=4.0)
    with pytest.raises(ValueError):
        factor_gradients(np.zeros((5, 5)), ad)


def test_plan_invariants():
    rng = RngState(13)
    with pytest.raises(ValueError):   # dominant-only needs exactly one adapter
        PlacementPlan(PlacementMode.DOMINANT_ONLY,
                      [init_adapter(rng.child(0), CFG, DOWN1, 2, 4.0),
                       init_adapter(rng.child(1), CFG, ModuleId(0, ProjKind.UP), 2, 4.0)])
    with pytest.raises(ValueError):   # full-weight carries no adapters
        PlacementPlan(PlacementMode.FULL_WEIGHT_DOMINANT,
                      [init_adapter(rng.child(2), CFG, DOWN1, 2, 4.0)],
                      full_weight_target=DOWN1)
    with pytest.raises(ValueError):   # duplicate targets
        PlacementPlan(PlacementMode.ALL,
                      [init_adapter(rng.child(3), CFG, DOWN1, 2, 4.0),
                       init_adapter(rng.child(4), CFG, DOWN1, 2, 4.0)])
    with pytest.raises(ValueError):   # adapter plan without adapters
        PlacementPlan(PlacementMode.ALL, [])


def test_plan_param_counts():
    plan = plan_dominant_only(RngState(14), CFG, DOWN1, rank=16, alpha=32.0)
    assert plan.trainable_param_count(CFG) == 16 * (32 + 96)   # 2048
    full = plan_full_weight_dominant(DOWN1)
    assert full.trainable_param_count(CFG) == 32 * 96
    everything = plan_all(RngState(15), CFG, rank=16, alpha=32.0)
    assert len(everything.adapters) == 7 * CFG.n_layers
    assert everything.trainable_param_count(CFG) > plan.trainable_param_count(CFG)


def test_plan_builders_cover_requested_sites():
    sub = plan_layer_subset(RngState(16), CFG, [1, 2], rank=2, alpha=4.0)
    assert len(sub.adapters) == 14
    kinds = plan_kind_subset(RngState(17), CFG, [ProjKind.UP, ProjKind.GATE],
                             rank=2, alpha=4.0, layers=[0])
    assert [a.target for a in kinds.adapters] == [ModuleId(0, ProjKind.UP),
                                                  ModuleId(0, ProjKind.GATE)]


def test_apply_plan_shares_untouched_arrays(pretrained_base):
    plan = plan_dominant_only(RngState(18), CFG, DOWN1, rank=4, alpha=8.0)
    eff = apply_plan(pretrained_base, plan)
    for m, w in pretrained_base.proj.items():
        if m == DOWN1:
            assert eff.proj[m] is not w
        else:
            assert eff.proj[m] is w
    assert eff.embed is pretrained_base.embed


def test_zero_init_preserves_model_outputs(pretrained_base):
    plan = plan_dominant_only(RngState(19), CFG, DOWN1, rank=8, alpha=16.0)
    tokens = RngState(20).generator().integers(0, CFG.vocab_size, size=10)
    base_logits, _ = forward(pretrained_base, tokens)
    eff_logits, _ = forward(apply_plan(pretrained_base, plan), tokens)
    assert np.array_equal(base_logits, eff_logits)


def test_sgd_step_from_init_matches_lemma_form():
    gen = RngState(21).generator()
    plan = plan_dominant_only(RngState(22), CFG, DOWN1, rank=4, alpha=8.0)
    ad = plan.adapters[0]
    a_before = ad.A.copy()
    g = gen.normal(0, 1, size=(32, 96))
    lr = 0.05
    expected_b = -lr * ad.scale * (g @ a_before.T)
    train_step_lora(plan, {DOWN1: g}, Sgd(), lr)
    assert np.array_equal(ad.A, a_before)               # dA = 0 at init
    assert np.array_equal(ad.B, expected_b)


def test_zero_lr_changes_nothing():
    plan = plan_dominant_only(RngState(23), CFG, DOWN1, rank=4, alpha=8.0)
    ad = plan.adapters[0]
    ad.B[:] = 0.25
    a0, b0 = ad.A.copy(), ad.B.copy()
    g = RngState(24).generator().normal(0, 1, size=(32, 96))
    train_step_lora(plan, {DOWN1: g}, AdamW(), 0.0)
    assert np.array_equal(ad.A, a0)
    assert np.array_equal(ad.B, b0)


def test_missing_gradient_raises():
    plan = plan_dominant_only(RngState(25), CFG, DOWN1, rank=4, alpha=8.0)
    with pytest.raises(KeyError):
        train_step_lora(plan, {}, Sgd(), 0.1)


def test_adamw_single_scalar_step():
    p = np.array([1.0])
    g = np.array([0.5])
    opt = AdamW()
    opt.start_step()
    opt.update("p", p, g, lr=0.1)
    # bias-corrected m-hat = g, v-hat = g^2 at t=1
    expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8))
    assert np.isclose(p[0], expected, rtol=1e-12)


def test_adapter_checkpoint_roundtrip(tmp_path):
    ad = init_adapter(RngState(26), CFG, DOWN1, rank=5, alpha=10.0)
    ad.B[:] = RngState(27).generator().normal(0, 1, ad.B.shape)
    path = tmp_path / "adapter.ckpt"
    save_adapter(ad, path)
    back = load_adapter(path)
    assert back.target == ad.target
    assert back.rank == ad.rank and back.alpha == ad.alpha
    assert np.array_equal(back.A, ad.A)
    assert np.array_equal(back.B, ad.B)
