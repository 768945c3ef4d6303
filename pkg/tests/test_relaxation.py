import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import soft_threshold_grad_oracle, soft_threshold_oracle
from tokenbudget.gradcheck import check_soft_threshold, check_ste
from tokenbudget.relaxation import (
    MaskTriple,
    RelaxationConfig,
    TokenScores,
    build_masks,
    hard_pick,
    soft_threshold,
    soft_threshold_grad,
    ste_backward,
)

score_vectors = arrays(np.float64, st.integers(1, 64), elements=st.floats(0, 1))


def test_defaults():
    cfg = RelaxationConfig()
    assert (cfg.kernel_width, cfg.temperature) == (10.0, 0.1)


@pytest.mark.parametrize("kwargs", [dict(kernel_width=0.0), dict(temperature=0.0), dict(kernel_width=-1.0), dict(temperature=np.inf)])
def test_config_rejects_non_positive(kwargs):
    with pytest.raises(ValueError):
        RelaxationConfig(**kwargs)


def test_token_scores_sorted_stably():
    ts = TokenScores([0.2, 0.9, 0.2, 0.5])
    np.testing.assert_array_equal(ts.scores, [0.9, 0.5, 0.2, 0.2])
    np.testing.assert_array_equal(ts.order, [1, 3, 0, 2])
    with pytest.raises(ValueError):
        ts.scores[0] = 1.0
    with pytest.raises(ValueError):
        TokenScores([])


def test_constant_scores():
    cfg = RelaxationConfig(kernel_width=3.0)
    s = np.full(7, 0.42)
    assert soft_threshold(s, 2.3, cfg) == pytest.approx(0.42, abs=1e-15)
    assert soft_threshold_grad(s, 2.3, cfg, 7) == 0.0


def test_worked_threshold_against_straight_line_oracle():
    s = [0.9, 0.7, 0.4, 0.1]
    cfg = RelaxationConfig(kernel_width=0.5)
    assert soft_threshold(s, 2.0, cfg) == pytest.approx(soft_threshold_oracle(s, 2.0, 0.5), rel=1e-14)


def test_symmetric_gradient_against_oracle():
    # scores symmetric about 0.5, target at the midpoint index
    s = [0.9, 0.7, 0.6, 0.4, 0.3, 0.1]
    cfg = RelaxationConfig(kernel_width=2.0)
    k = 3.5
    assert soft_threshold(s, k, cfg) == pytest.approx(0.5, abs=1e-15)
    got = soft_threshold_grad(s, k, cfg, 6)
    assert got == pytest.approx(soft_threshold_grad_oracle(s, k, 2.0, 6), rel=1e-12)
    assert got < 0


@settings(max_examples=200, deadline=None)
@given(s=score_vectors, frac=st.floats(0, 1), sigma=st.floats(0.05, 50))
def test_threshold_within_score_range_and_matches_oracle(s, frac, sigma):
    cfg = RelaxationConfig(kernel_width=sigma)
    k = frac * s.size
    tau = soft_threshold(s, k, cfg)
    assert s.min() <= tau <= s.max()
    ordered = np.sort(s)[::-1]
    if sigma > 0.5:
        assert tau == pytest.approx(soft_threshold_oracle(ordered, k, sigma), rel=1e-12, abs=1e-15)


def test_small_width_limit_picks_nearest_index():
    rng = np.random.default_rng(11)
    cfg = RelaxationConfig(kernel_width=1e-4)
    for _ in range(100):
        n = int(rng.integers(2, 200))
        s = np.sort(rng.uniform(size=n))[::-1]
        # avoid half-integer targets, where two indices tie
        k = rng.uniform(0, n)
        if abs(k - np.floor(k) - 0.5) < 1e-2:
            continue
        assert soft_threshold(s, k, cfg) == hard_pick(s, k)


def test_hard_pick_rounds_to_nearest_not_floor():
    s = [0.9, 0.7, 0.4, 0.1]
    assert hard_pick(s, 2.8) == 0.4
    assert hard_pick(s, 0.2) == 0.9
    assert hard_pick(s, 9.0) == 0.1


def test_edge_targets_concentrate_on_ends():
    s = np.linspace(1, 0, 50)
    cfg = RelaxationConfig(kernel_width=0.3)
    assert soft_threshold(s, 0.0, cfg) == pytest.approx(s[0], abs=1e-3)
    assert soft_threshold(s, 50.0, cfg) == pytest.approx(s[-1], abs=1e-3)


def test_threshold_gradient_finite_differences():
    result = check_soft_threshold(np.random.default_rng(5), cases=100)
    assert result.max_rel_error < 1e-5


def test_masks_basic():
    cfg = RelaxationConfig()
    m = build_masks([0.9, 0.3], 0.5, cfg)
    np.testing.assert_array_equal(m.hard, [1.0, 0.0])
    tie = build_masks([0.5], 0.5, cfg)
    assert tie.hard[0] == 1.0
    assert tie.soft[0] == 0.5


@settings(max_examples=200, deadline=None)
@given(s=score_vectors, tau=st.floats(-0.1, 1.1), temp=st.floats(1e-3, 10))
def test_ste_forward_is_exactly_hard(s, tau, temp):
    m = build_masks(s, tau, RelaxationConfig(temperature=temp))
    np.testing.assert_array_equal(m.ste, m.hard)
    assert set(np.unique(m.hard)) <= {0.0, 1.0}
    assert np.all((m.soft >= 0) & (m.soft <= 1))


def test_low_temperature_soft_matches_hard():
    rng = np.random.default_rng(2)
    cfg = RelaxationConfig(temperature=1e-6)
    for _ in range(100):
        s = rng.uniform(size=40)
        tau = rng.uniform(0.1, 0.9)
        m = build_masks(s, tau, cfg)
        ordered = np.sort(s)[::-1]
        far = np.abs(ordered - tau) >= 0.01
        assert np.max(np.abs(m.soft - m.hard)[far], initial=0.0) < 1e-3


def test_ste_backward_worked_value():
    cfg = RelaxationConfig(temperature=0.1)
    masks = MaskTriple(hard=np.array([1.0]), soft=np.array([0.5]), ste=np.array([1.0]))
    assert ste_backward([1.0], masks, cfg) == pytest.approx(-2.5)
    assert ste_backward([0.0], masks, cfg) == 0.0


def test_ste_backward_length_mismatch():
    masks = build_masks([0.2, 0.4], 0.3, RelaxationConfig())
    with pytest.raises(ValueError):
        ste_backward([1.0], masks, RelaxationConfig())


def test_ste_backward_finite_differences():
    result = check_ste(np.random.default_rng(6), cases=100)
    assert result.max_rel_error < 1e-5


def test_selected_count_weakly_increases_with_ratio():
    rng = np.random.default_rng(4)
    cfg = RelaxationConfig()
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 128))
        s = np.sort(rng.uniform(size=n))[::-1]
        ratios = np.linspace(0, 1, 21)
        counts = [build_masks(s, soft_threshold(s, r * n, cfg), cfg).hard.sum() for r in ratios]
        violations += int(np.any(np.diff(counts) < 0))
    assert violations == 0
