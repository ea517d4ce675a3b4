"""Uncertainty-guided opacity modulation and concrete-relaxation soft dropout.

    alpha_tilde = alpha * (1 - u)
    omega       = 1 - sigmoid((logit(u) + logit(q)) / tau),   q ~ U(0, 1)
    omega_tilde = clamp(omega, omega_min, omega_max)
    alpha_bar   = alpha_tilde * omega_tilde
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ugsplat.errors import DomainError
from ugsplat.scene import logit, sigmoid

EVAL_MODES = ("stochastic", "deterministic_q_half", "off")
# u and q are pulled into this range before taking logits
GUARD = 1e-6


@dataclass
class SoftDropConfig:
    temperature: float = 0.1
    omega_min: float = 0.2
    omega_max: float = 0.8
    eval_mode: str = "deterministic_q_half"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.omega_min < self.omega_max < 1:
            raise ValueError("need 0 < omega_min < omega_max < 1")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")


@dataclass
class DropSample:
    q: np.ndarray
    omega: np.ndarray
    omega_clamped: np.ndarray
    seed: int
    iteration: int


def modulate_opacity(alpha, u):
    alpha = np.asarray(alpha, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any((alpha <= 0) | (alpha >= 1)) or np.any((u <= 0) | (u >= 1)):
        raise DomainError("opacity and uncertainty must lie in the open interval (0, 1)")
    return alpha * (1.0 - u)


def _drop_logit(u, q, tau):
    u = np.clip(np.asarray(u, dtype=np.float64), GUARD, 1 - GUARD)
    q = np.clip(np.asarray(q, dtype=np.float64), GUARD, 1 - GUARD)
    return (logit(u) + logit(q)) / tau


def soft_drop_weight(u, q, tau: float = 0.1):
    """Raw keep factor omega in (0, 1); decreasing in both u and q."""
    z = _drop_logit(u, q, tau)
    # 1 - sigmoid(z) == sigmoid(-z), exact at the symmetry point
    return sigmoid(-z)


def soft_drop_weight_grad_u(u, q, tau: float = 0.1):
    """d omega / d u (zero where the logit guard clamps u)."""
    u = np.asarray(u, dtype=np.float64)
    z = _drop_logit(u, q, tau)
    s = sigmoid(z)
    inside = (u > GUARD) & (u < 1 - GUARD)
    uc = np.clip(u, GUARD, 1 - GUARD)
    return -s * (1.0 - s) / (tau * uc * (1.0 - uc)) * inside


def clamp_weight(omega, config: SoftDropConfig | None = None):
    config = config or SoftDropConfig()
    return np.clip(omega, config.omega_min, config.omega_max)


def clamp_weight_grad(omega, config: SoftDropConfig | None = None):
    config = config or SoftDropConfig()
    omega = np.asarray(omega, dtype=np.float64)
    return ((omega > config.omega_min) & (omega < config.omega_max)).astype(np.float64)


def effective_opacity(alpha_tilde, omega_tilde):
    return np.asarray(alpha_tilde, dtype=np.float64) * np.asarray(omega_tilde, dtype=np.float64)


def softdrop_backward(u, q, tau, config: SoftDropConfig, upstream, alpha):
    """Gradients of alpha_bar w.r.t. ``(u, alpha)`` scaled by ``upstream``.

    The clamp uses the hard subgradient: zero outside (omega_min, omega_max).
    """
    u = np.asarray(u, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    omega = soft_drop_weight(u, q, tau)
    omega_c = clamp_weight(omega, config)
    d_omega_du = soft_drop_weight_grad_u(u, q, tau) * clamp_weight_grad(omega, config)
    d_u = g * alpha * (-omega_c + (1.0 - u) * d_omega_du)
    d_alpha = g * (1.0 - u) * omega_c
    return d_u, d_alpha


def sample_q(seed: int, iteration: int, n: int) -> np.ndarray:
    """Uniform draws in the open interval (0, 1), one per Gaussian index.

    A Philox counter-based stream keyed by the seed and positioned by the
    iteration, so the draw for Gaussian i does not depend on evaluation order
    and any iteration can be regenerated without replaying earlier ones.
    Using 52 random bits centred in their cell never produces 0 or 1.
    """
    bitgen = np.random.Philox(key=np.array([seed & (2 ** 64 - 1), 0], dtype=np.uint64),
                              counter=np.array([0, 0, iteration, 0], dtype=np.uint64))
    raw = bitgen.random_raw(n) if n else np.zeros(0, dtype=np.uint64)
    return ((raw >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0 ** -52


def draw(seed: int, iteration: int, u, config: SoftDropConfig, index=None) -> DropSample:
    """Draw q for the Gaussians in ``index`` (default: all) and the resulting weights."""
    u = np.asarray(u, dtype=np.float64)
    if index is None:
        q = sample_q(seed, iteration, len(u))
    else:
        index = np.asarray(index)
        n = int(index.max()) + 1 if len(index) else 0
        q = sample_q(seed, iteration, n)[index]
    omega = soft_drop_weight(u, q, config.temperature)
    return DropSample(q, omega, clamp_weight(omega, config), seed, iteration)


@dataclass
class OpacityCache:
    alpha: np.ndarray
    u: np.ndarray | None
    q: np.ndarray | None
    modulate: bool
    dropout: bool


def apply_opacity(alpha, u, q, config: SoftDropConfig, modulate: bool = True,
                  dropout: bool = True) -> tuple[np.ndarray, OpacityCache]:
    """alpha_bar from alpha with either mechanism switchable (``u`` None = both off)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = alpha.copy()
    if u is not None and modulate:
        out = out * (1.0 - u)
    if u is not None and dropout:
        out = out * clamp_weight(soft_drop_weight(u, q, config.temperature), config)
    return out, OpacityCache(alpha, u, q, modulate and u is not None, dropout and u is not None)


def apply_opacity_backward(cache: OpacityCache, config: SoftDropConfig, upstream):
    """Returns ``(d_alpha, d_u)``; ``d_u`` is None when no uncertainty was used."""
    g = np.asarray(upstream, dtype=np.float64)
    if cache.u is None or not (cache.modulate or cache.dropout):
        return g.copy(), None
    u, alpha = cache.u, cache.alpha
    if cache.modulate and cache.dropout:
        return softdrop_backward(u, cache.q, config.temperature, config, g, alpha)[::-1]
    if cache.modulate:
        return g * (1.0 - u), -g * alpha
    omega = soft_drop_weight(u, cache.q, config.temperature)
    omega_c = clamp_weight(omega, config)
    d_omega = soft_drop_weight_grad_u(u, cache.q, config.temperature) * clamp_weight_grad(omega, config)
    return g * omega_c, g * alpha * d_omega


def omega_curve(u_grid, config: SoftDropConfig, mc_samples: int = 100_000, seed: int = 0):
    """Clamped omega(u) along ``u_grid``: the q = 0.5 slice and a Monte-Carlo mean over q."""
    u_grid = np.asarray(u_grid, dtype=np.float64)
    half = clamp_weight(soft_drop_weight(u_grid, 0.5, config.temperature), config)
    q = sample_q(seed, 0, mc_samples)
    mean = np.array([clamp_weight(soft_drop_weight(u, q, config.temperature), config).mean()
                     for u in u_grid])
    return half, mean
