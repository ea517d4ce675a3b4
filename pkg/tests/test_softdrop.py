import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from ugsplat.errors import DomainError
from ugsplat.softdrop import (
    SoftDropConfig,
    apply_opacity,
    apply_opacity_backward,
    clamp_weight,
    clamp_weight_grad,
    draw,
    effective_opacity,
    modulate_opacity,
    omega_curve,
    sample_q,
    soft_drop_weight,
    soft_drop_weight_grad_u,
    softdrop_backward,
)

CFG = SoftDropConfig()
open_unit = st.floats(1e-4, 1 - 1e-4)


# ---------------------------------------------------------------- modulation
def test_modulation_limits_and_value():
    assert modulate_opacity(0.7, 1e-12) == pytest.approx(0.7)
    assert modulate_opacity(0.7, 1 - 1e-12) == pytest.approx(0.0, abs=1e-11)
    assert modulate_opacity(0.6, 0.25) == pytest.approx(0.45, abs=1e-15)


@pytest.mark.parametrize("alpha,u", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.2)])
def test_modulation_domain(alpha, u):
    with pytest.raises(DomainError):
        modulate_opacity(alpha, u)


# ------------------------------------------------------------------- weight
def test_symmetry_point():
    for tau in (0.01, 0.1, 1.0, 7.0):
        assert soft_drop_weight(0.5, 0.5, tau) == 0.5


def test_weight_at_0_6():
    w = soft_drop_weight(0.6, 0.5, 0.1)
    assert abs(w - 0.01703) <= 1e-4
    # fp64 value from the closed form 1 - sigmoid(10 * logit(0.6))
    assert w == pytest.approx(1 - 1 / (1 + np.exp(-10 * np.log(1.5))), rel=1e-12)
    assert clamp_weight(w, CFG) == 0.2


def test_weight_at_0_47_inside_band():
    w = float(soft_drop_weight(0.47, 0.5, 0.1))
    assert w == pytest.approx(1 / (1 + np.exp(10 * np.log(0.47 / 0.53))), rel=1e-12)
    assert abs(w - 0.7686) < 5e-4          # computed value is 0.768781
    assert CFG.omega_min < w < CFG.omega_max


def test_band_crossings_of_q_half_slice():
    from scipy.optimize import brentq
    lo = brentq(lambda u: soft_drop_weight(u, 0.5, 0.1) - 0.8, 0.3, 0.5, xtol=1e-12)
    hi = brentq(lambda u: soft_drop_weight(u, 0.5, 0.1) - 0.2, 0.5, 0.7, xtol=1e-12)
    assert abs(lo - 0.47) <= 0.005 and abs(hi - 0.53) <= 0.005


@given(open_unit, open_unit, open_unit)
def test_monotone_in_u_and_q(u1, u2, q):
    if u1 == u2:
        return
    lo, hi = min(u1, u2), max(u1, u2)
    assert soft_drop_weight(lo, q, 0.5) >= soft_drop_weight(hi, q, 0.5)
    assert soft_drop_weight(q, lo, 0.5) >= soft_drop_weight(q, hi, 0.5)


@given(open_unit, open_unit)
def test_antisymmetry(u, q):
    total = soft_drop_weight(u, q, 0.1) + soft_drop_weight(1 - u, 1 - q, 0.1)
    assert abs(total - 1.0) < 1e-12


def test_median_at_half_is_half():
    w = soft_drop_weight(0.5, sample_q(11, 0, 100_000), 0.1)
    assert abs(np.median(w) - 0.5) < 0.01


# -------------------------------------------------------------------- clamp
def test_clamp_values_and_gradient():
    np.testing.assert_array_equal(clamp_weight(np.array([0.5, 0.017, 0.95]), CFG), [0.5, 0.2, 0.8])
    np.testing.assert_array_equal(clamp_weight_grad(np.array([0.5, 0.017, 0.95]), CFG), [1, 0, 0])


def test_config_guards():
    with pytest.raises(ValueError):
        SoftDropConfig(temperature=0)
    with pytest.raises(ValueError):
        SoftDropConfig(omega_min=0.8, omega_max=0.2)


# -------------------------------------------------------- effective opacity
def test_effective_opacity_examples():
    assert effective_opacity(0.45, 0.5) == pytest.approx(0.225)
    assert effective_opacity(1 - 1e-12, CFG.omega_max) == pytest.approx(0.8)
    a_tilde = modulate_opacity(0.7, 1e-12)
    w = clamp_weight(soft_drop_weight(1e-12, 0.5, 0.1), CFG)
    assert effective_opacity(a_tilde, w) == pytest.approx(0.56)


@given(open_unit, open_unit, open_unit)
def test_effective_opacity_range(alpha, u, q):
    abar, _ = apply_opacity(np.array([alpha]), np.array([u]), np.array([q]), CFG)
    assert 0 < abar[0] < CFG.omega_max
    assert abar[0] <= alpha


# ----------------------------------------------------------------- backward
def test_derivative_at_symmetry_point():
    assert soft_drop_weight_grad_u(0.5, 0.5, 0.1) == pytest.approx(-10.0, rel=1e-12)


def test_saturated_region_only_modulation_path():
    u, q, alpha = 0.7, 0.5, 0.6          # omega ~ 0 -> clamped to 0.2
    d_u, d_alpha = softdrop_backward(u, q, 0.1, CFG, 1.0, alpha)
    assert d_u == pytest.approx(-alpha * 0.2)
    assert d_alpha == pytest.approx((1 - u) * 0.2)


def test_zero_upstream():
    d_u, d_alpha = softdrop_backward(np.array([0.49]), np.array([0.4]), 0.1, CFG,
                                     np.zeros(1), np.array([0.5]))
    assert not d_u.any() and not d_alpha.any()


def test_backward_matches_finite_differences(rng):
    checked = 0
    while checked < 50:
        u = rng.uniform(0.3, 0.7, 4)
        q = rng.uniform(0.05, 0.95, 4)
        alpha = rng.uniform(0.05, 0.95, 4)
        omega = soft_drop_weight(u, q, 0.1)
        if np.min(np.minimum(np.abs(omega - 0.2), np.abs(omega - 0.8))) < 1e-3:
            continue
        up = rng.normal(size=4)
        d_u, d_alpha = softdrop_backward(u, q, 0.1, CFG, up, alpha)
        f = lambda: float(np.dot(apply_opacity(alpha, u, q, CFG)[0], up))
        assert rel_err(d_u, numeric_grad(f, u, h=1e-7)) < 1e-4
        assert rel_err(d_alpha, numeric_grad(f, alpha)) < 1e-4
        checked += 1


@pytest.mark.parametrize("modulate,dropout", [(True, False), (False, True), (True, True)])
def test_apply_opacity_backward_modes(rng, modulate, dropout):
    u = np.array([0.45, 0.5, 0.52, 0.3])
    q = np.array([0.5, 0.6, 0.4, 0.5])
    alpha = rng.uniform(0.1, 0.9, 4)
    up = rng.normal(size=4)
    _, cache = apply_opacity(alpha, u, q, CFG, modulate, dropout)
    d_alpha, d_u = apply_opacity_backward(cache, CFG, up)
    f = lambda: float(np.dot(apply_opacity(alpha, u, q, CFG, modulate, dropout)[0], up))
    assert rel_err(d_u, numeric_grad(f, u, h=1e-7)) < 1e-4
    assert rel_err(d_alpha, numeric_grad(f, alpha)) < 1e-4


def test_no_uncertainty_is_identity(rng):
    alpha = rng.uniform(0.1, 0.9, 5)
    abar, cache = apply_opacity(alpha, None, None, CFG)
    np.testing.assert_array_equal(abar, alpha)
    d_alpha, d_u = apply_opacity_backward(cache, CFG, np.ones(5))
    assert d_u is None
    np.testing.assert_array_equal(d_alpha, 1.0)


# ------------------------------------------------------------------ sampling
def test_q_open_interval_and_reproducible():
    a = sample_q(5, 17, 10_000)
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_array_equal(a, sample_q(5, 17, 10_000))
    assert not np.array_equal(a, sample_q(5, 18, 10_000))
    assert not np.array_equal(a, sample_q(6, 17, 10_000))


def test_q_prefix_stable():
    # the draw for Gaussian i does not depend on how many are drawn
    np.testing.assert_array_equal(sample_q(3, 2, 10), sample_q(3, 2, 1000)[:10])


def test_q_roughly_uniform():
    q = sample_q(0, 0, 200_000)
    assert abs(q.mean() - 0.5) < 0.005
    assert abs(q.var() - 1 / 12) < 0.002


def test_draw_sample_fields():
    u = np.full(6, 0.5)
    s = draw(1, 4, u, CFG)
    np.testing.assert_array_equal(s.q, sample_q(1, 4, 6))
    assert np.all((s.omega_clamped >= 0.2) & (s.omega_clamped <= 0.8))
    t = draw(1, 4, u[:2], CFG, index=np.array([5, 2]))
    np.testing.assert_array_equal(t.q, s.q[[5, 2]])


# ---------------------------------------------------------------- omega curve
def test_omega_curve_shape_and_clamps():
    grid = np.linspace(0.0, 1.0, 101)
    half, mean = omega_curve(grid, CFG, mc_samples=20_000)
    assert half[50] == 0.5
    assert np.all(half[grid < 0.465] == 0.8) and np.all(half[grid > 0.535] == 0.2)
    assert np.all((mean >= 0.2 - 1e-12) & (mean <= 0.8 + 1e-12))


def test_omega_curve_monte_carlo_against_large_oracle():
    grid = np.array([0.3, 0.5, 0.7])
    _, mean = omega_curve(grid, CFG, mc_samples=100_000, seed=1)
    q = np.random.default_rng(99).uniform(size=1_000_000)
    oracle = [np.clip(1 / (1 + np.exp((np.log(u / (1 - u)) + np.log(q / (1 - q))) / 0.1)),
                      0.2, 0.8).mean() for u in grid]
    np.testing.assert_allclose(mean, oracle, atol=0.01)
