import math
from pathlib import Path

import numpy as np
import pytest

from helpers import STANDARD_FIXTURE, discrete_logits_oracle, kl_oracle
from tokenbudget.gradcheck import central_difference, check_toy_chain, rel_error
from tokenbudget.relaxation import (
    RelaxationConfig,
    build_masks,
    soft_threshold,
    soft_threshold_grad,
    ste_backward,
)
from tokenbudget.toy_vlm import (
    LogitPair,
    ToyEvaluator,
    ToyInstance,
    ToyModelSpec,
    counter_uniform,
    discrete_loss,
    distill_loss,
    forward,
    generate_instance,
    loss_and_grad,
    loss_grad_logits,
    reference_logits,
    retained_counts,
)

GOLDEN = Path(__file__).parent / "fixtures" / "toy_seed1_L2_N4_C2.json"


@pytest.fixture(scope="module")
def standard():
    return generate_instance(ToyModelSpec(**STANDARD_FIXTURE))


def test_counter_uniform_is_keyed_and_open():
    a = counter_uniform(1, 1, np.arange(5)[:, None], np.arange(7)[None, :])
    b = counter_uniform(1, 1, np.arange(5)[:, None], np.arange(7)[None, :])
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    assert len(np.unique(a)) == a.size
    # each draw depends only on its own key
    assert counter_uniform(1, 1, 3, 4) == a[3, 4]
    assert counter_uniform(2, 1, 3, 4) != a[3, 4]


def test_generation_is_deterministic(standard):
    again = generate_instance(ToyModelSpec(**STANDARD_FIXTURE))
    np.testing.assert_array_equal(standard.scores, again.scores)
    np.testing.assert_array_equal(standard.values, again.values)


def test_generated_ranges(standard):
    s, v = standard.scores, standard.values
    assert np.all((s > 0) & (s < 1))
    assert np.all(np.diff(s, axis=1) < 0)
    assert np.all(np.abs(v) <= 1)
    np.testing.assert_allclose(standard.attention.sum(axis=1), 1.0)


def test_zero_spread_gives_equal_scores():
    inst = generate_instance(ToyModelSpec(seed=3, num_layers=2, n_visual=5, score_spread=0.0))
    assert np.all(inst.scores == 0.5)


def test_golden_fixture():
    current = generate_instance(ToyModelSpec(seed=1, num_layers=2, n_visual=4, num_classes=2))
    recorded = ToyInstance.load(GOLDEN)
    assert recorded.spec == current.spec
    np.testing.assert_array_equal(recorded.scores, current.scores)
    np.testing.assert_array_equal(recorded.values, current.values)


def test_json_round_trip(standard):
    back = ToyInstance.from_json(standard.to_json())
    np.testing.assert_array_equal(back.scores, standard.scores)
    np.testing.assert_array_equal(back.values, standard.values)


@pytest.mark.parametrize(
    "kwargs", [dict(num_classes=1), dict(num_layers=0), dict(value_coherence=1.5), dict(score_spread=-1.0)]
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ToyModelSpec(**kwargs)


def test_kl_worked_value():
    pair = LogitPair(reference=np.array([0.0, 0.0]), pruned=np.array([math.log(3), 0.0]))
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert distill_loss(pair) == pytest.approx(expected, rel=1e-12)
    assert distill_loss(pair) == pytest.approx(0.13082, abs=1e-5)


def test_kl_matches_oracle_and_is_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(200):
        l, lh = rng.normal(scale=3, size=(2, 5))
        value = distill_loss(LogitPair(l, lh))
        assert value >= 0
        assert value == pytest.approx(kl_oracle(lh, l), rel=1e-9, abs=1e-14)
        assert distill_loss(LogitPair(l, l + 2.5)) == pytest.approx(0.0, abs=1e-12)


def test_logit_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(50):
        l, lh = rng.normal(size=(2, 4))
        g = loss_grad_logits(LogitPair(l, lh))
        fd = central_difference(lambda x: distill_loss(LogitPair(l, x)), lh, 1e-6)
        assert rel_error(g, fd) < 1e-7


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        LogitPair(np.array([0.0, np.inf]), np.zeros(2))


def test_full_profile_sharp_masks_reproduce_reference(standard):
    # a narrow Gaussian at the last index puts tau on the lowest score, so every token is kept
    cfg = RelaxationConfig(kernel_width=0.1)
    pair = forward(standard, np.ones(8), cfg, mode="ste")
    np.testing.assert_array_equal(pair.pruned, pair.reference)
    assert distill_loss(pair) == 0.0


def test_zero_profile_keeps_top_token(standard):
    # tau sits on the top score; the inclusive hard mask keeps exactly that token
    cfg = RelaxationConfig(kernel_width=0.1, temperature=1e-4)
    pair = forward(standard, np.zeros(8), cfg, mode="ste")
    spec = standard.spec
    top_only = spec.logit_scale * sum(standard.attention[i, 0] * standard.values[i, 0] for i in range(8))
    np.testing.assert_allclose(pair.pruned, top_only, rtol=1e-6, atol=1e-9)


def test_soft_and_ste_agree_at_low_temperature(standard):
    r = np.full(8, 0.4)
    sharp = RelaxationConfig(temperature=1e-7)
    soft = forward(standard, r, sharp, mode="soft").pruned
    hard = forward(standard, r, sharp, mode="ste").pruned
    np.testing.assert_allclose(soft, hard, atol=1e-6)


def test_profile_shape_checked(standard):
    with pytest.raises(ValueError):
        forward(standard, np.ones(3), RelaxationConfig())
    with pytest.raises(ValueError):
        forward(standard, np.ones(8), RelaxationConfig(), mode="bogus")


def test_soft_chain_matches_finite_differences():
    result = check_toy_chain(np.random.default_rng(9), cases=100)
    assert result.max_rel_error < 1e-4


def test_chain_equals_product_of_stage_gradients():
    inst = generate_instance(ToyModelSpec(seed=5, num_layers=1, n_visual=2, num_classes=3))
    cfg = RelaxationConfig(kernel_width=1.5, temperature=0.2)
    r = np.array([0.6])
    _, grad = loss_and_grad(inst, r, cfg, mode="soft")

    s = inst.scores[0]
    tau = soft_threshold(s, 1.2, cfg)
    masks = build_masks(s, tau, cfg)
    pair = forward(inst, r, cfg, mode="soft")
    dl = loss_grad_logits(pair)
    upstream = np.array([inst.spec.logit_scale * inst.attention[0, j] * inst.values[0, j] @ dl for j in range(2)])
    expected = ste_backward(upstream, masks, cfg) * soft_threshold_grad(s, 1.2, cfg, 2)
    assert grad[0] == pytest.approx(expected, rel=1e-12)


def test_ste_loss_is_piecewise_constant_with_nonzero_gradient(standard):
    cfg = RelaxationConfig()
    r = np.full(8, 0.5)
    base, grad = loss_and_grad(standard, r, cfg, mode="ste")
    nudged, _ = loss_and_grad(standard, r + 1e-9, cfg, mode="ste")
    assert nudged == base
    assert np.any(grad != 0)


def test_floor_semantics_for_counts():
    inst = generate_instance(ToyModelSpec(seed=2, num_layers=1, n_visual=100))
    assert retained_counts(inst, [0.999])[0] == 99


def test_discrete_loss_matches_straight_line_oracle(standard):
    rng = np.random.default_rng(12)
    for _ in range(20):
        r = rng.uniform(0, 1, 8)
        expected = kl_oracle(discrete_logits_oracle(standard, r), reference_logits(standard))
        assert discrete_loss(standard, r) == pytest.approx(expected, rel=1e-9, abs=1e-14)
    assert discrete_loss(standard, np.ones(8)) == 0.0


def test_evaluator_counts_calls(standard):
    ev = ToyEvaluator(standard)
    ev.loss(np.ones(8))
    ev.loss_and_grad(np.ones(8))
    assert ev.evaluations == 2
    with pytest.raises(ValueError):
        ToyEvaluator(standard, mode="exact")
