"""Image-quality metrics and uncertainty-distribution statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from ugsplat.errors import DimensionError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
AMBIGUOUS_BAND = (0.47, 0.53)


def _as_array(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)


def _check_pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) with peak 1; identical images give ``PSNR_CAP``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _blur(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # zero-padded 'same' filtering; with a symmetric kernel the operator is self-adjoint
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


@dataclass
class SSIMState:
    x: np.ndarray
    y: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    smap: np.ndarray


def ssim_map(x, y, data_range: float = 1.0) -> SSIMState:
    """Local SSIM of ``x`` against ``y`` per pixel and channel (no size guard)."""
    x, y = _check_pair(x, y)
    k = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _blur(x, k), _blur(y, k)
    sxx = _blur(x * x, k) - mu_x ** 2
    syy = _blur(y * y, k) - mu_y ** 2
    sxy = _blur(x * y, k) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * sxy + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = sxx + syy + c2
    return SSIMState(x, y, mu_x, mu_y, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


def ssim_backward(state: SSIMState, grad_map) -> np.ndarray:
    """Gradient w.r.t. ``x`` given dL/d(ssim map)."""
    k = gaussian_window()
    g = np.asarray(grad_map, dtype=np.float64) * state.smap
    mx, my = state.mu_x, state.mu_y
    # S = A1 A2 / (B1 B2) with E[x^2], E[xy] and mu_x as the free variables
    d_mu = g * (2 * my / state.a1 - 2 * my / state.a2 - 2 * mx / state.b1 + 2 * mx / state.b2)
    d_ex2 = -g / state.b2
    d_exy = 2 * g / state.a2
    return _blur(d_mu, k) + 2 * state.x * _blur(d_ex2, k) + state.y * _blur(d_exy, k)


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03)."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    return float(ssim_map(a, b).smap.mean())


@dataclass
class MetricReport:
    views: list[dict] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_value: float) -> None:
        self.views.append({"view": name, "psnr": psnr_db, "ssim": ssim_value})

    @property
    def psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.views])) if self.views else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.views])) if self.views else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim"])
            for v in self.views:
                w.writerow([v["view"], repr(float(v["psnr"])), repr(float(v["ssim"]))])
            w.writerow(["mean", repr(self.psnr), repr(self.ssim)])


@dataclass
class UncertaintyHistogram:
    edges: np.ndarray
    counts: np.ndarray
    iteration: int | None
    values: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if len(self.values) else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.values)) if len(self.values) else float("nan")

    @property
    def band_fraction(self) -> float:
        if not len(self.values):
            return float("nan")
        lo, hi = AMBIGUOUS_BAND
        return float(np.mean((self.values >= lo) & (self.values <= hi)))

    def summary(self) -> dict:
        return {"iteration": self.iteration, "count": self.total, "mean": self.mean,
                "median": self.median, "band_fraction": self.band_fraction}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    def write_plot_table(self, path) -> None:
        centres = 0.5 * (self.edges[:-1] + self.edges[1:])
        with open(path, "w") as fh:
            for c, n in zip(centres, self.counts):
                fh.write(f"{c:.6f} {int(n)}\n")


def histogram(values, bins: int = 50, iteration: int | None = None) -> UncertaintyHistogram:
    values = np.asarray(values, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return UncertaintyHistogram(edges, counts, iteration, values)


def uncertainty_stats(model, gaussians, camera, bins: int = 50,
                      iteration: int | None = None) -> UncertaintyHistogram:
    """Histogram of u over the Gaussians visible from ``camera``."""
    u, _ = model.predict_view(gaussians, camera)
    return histogram(u, bins, iteration)
