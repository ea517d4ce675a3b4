import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from oracles import ssim_naive
from ugsplat.errors import DimensionError
from ugsplat.losses import colour_loss
from ugsplat.metrics import (
    AMBIGUOUS_BAND,
    MetricReport,
    histogram,
    psnr,
    ssim,
    ssim_map,
    uncertainty_stats,
)
from ugsplat.model import UncertaintyModel
from ugsplat.scene import Camera, GaussianSet


def checker(n=16, cell=2):
    y, x = np.mgrid[0:n, 0:n]
    return (((x // cell) + (y // cell)) % 2).astype(np.float64)


# ----------------------------------------------------------------------- PSNR
def test_psnr_identical_is_capped(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 100.0


def test_psnr_uniform_offset():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_psnr_black_white():
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@given(st.integers(0, 10_000))
def test_psnr_decreases_with_noise(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16, 3))
    noise = rng.normal(size=a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2] >= 0


# ----------------------------------------------------------------------- SSIM
def test_ssim_identical(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_naive_window_loop(rng):
    for shape in ((12, 14), (16, 16, 3)):
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        expect, emap = ssim_naive(a, b)
        assert ssim(a, b) == pytest.approx(expect, abs=1e-12)
        got = ssim_map(a, b).smap
        np.testing.assert_allclose(got.reshape(emap.shape), emap, atol=1e-12)


def test_ssim_interior_matches_skimage(rng):
    from skimage.metrics import structural_similarity
    a = rng.uniform(size=(32, 32))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, data_range=1.0, full=True)
    ours = ssim_map(a, b).smap
    # border handling differs (zero padding here, reflection there); the interior agrees
    np.testing.assert_allclose(ours[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-10)


def test_ssim_symmetric(rng):
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)


def test_ssim_independent_noise_low():
    vals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vals.append(ssim(rng.uniform(size=(64, 64)), rng.uniform(size=(64, 64))))
    assert max(vals) < 0.1


def test_ssim_inverted_checker_negative():
    a = checker(16)
    value = ssim(a, 1 - a)
    assert value < 0
    assert value == pytest.approx(ssim_naive(a, 1 - a)[0], abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


# ----------------------------------------------------------------------- loss
def test_loss_identical_is_zero(rng):
    a = rng.uniform(size=(16, 16, 3))
    lv = colour_loss(a, a)
    assert lv.total == 0.0 and not lv.grad.any()


def test_loss_l1_offset():
    a = np.full((12, 12, 3), 0.4)
    lv = colour_loss(a + 0.1, a, lam=0.0)
    assert lv.l1 == pytest.approx(0.1, abs=1e-15)
    assert lv.total == pytest.approx(0.1, abs=1e-15)


def test_loss_checker_against_reference_ssim():
    a = np.repeat(checker(16)[..., None], 3, axis=2) * 0.8 + 0.1
    b = np.repeat(checker(16, cell=4)[..., None], 3, axis=2) * 0.6 + 0.2
    lv = colour_loss(a, b, lam=0.2)
    expect = np.mean(np.abs(a - b)) + 0.2 * (1 - ssim_naive(a, b)[0]) / 2
    assert abs(lv.total - expect) < 1e-6


def test_loss_lambda_guard():
    with pytest.raises(ValueError):
        colour_loss(np.zeros((4, 4)), np.ones((4, 4)), lam=1.5)


@pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
def test_loss_gradient_matches_finite_differences(rng, lam):
    x = rng.uniform(0.1, 0.9, (8, 8, 3))
    y = rng.uniform(0.1, 0.9, (8, 8, 3))
    grad = colour_loss(x, y, lam).grad
    # L1 kinks sit at x == y, which random inputs avoid by a wide margin
    num = numeric_grad(lambda: colour_loss(x, y, lam).total, x, h=1e-6)
    assert rel_err(grad, num) < 1e-4


# ------------------------------------------------------------------- reports
def test_metric_report_csv(tmp_path):
    rep = MetricReport()
    rep.add("a", 20.0, 0.5)
    rep.add("b", 30.0, 0.7)
    assert rep.psnr == 25.0 and rep.ssim == pytest.approx(0.6)
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "view,psnr,ssim" and lines[-1].startswith("mean,25.0")


# ----------------------------------------------------------------- histograms
def test_histogram_conserves_count(rng):
    u = rng.uniform(size=137)
    h = histogram(u)
    assert h.total == 137 and len(h.counts) == 50


def test_all_half_is_all_band():
    h = histogram(np.full(20, 0.5))
    assert h.band_fraction == 1.0 and h.median == 0.5
    lo, hi = AMBIGUOUS_BAND
    centres = 0.5 * (h.edges[:-1] + h.edges[1:])
    assert h.counts[(centres > lo) & (centres < hi)].sum() == 20


def test_constant_high_goes_to_top_bins():
    h = histogram(np.full(9, 0.9))
    assert h.counts[45] == 9 and h.band_fraction == 0.0


def test_histogram_files(tmp_path):
    h = histogram(np.array([0.1, 0.5, 0.5]), bins=4)
    h.write_csv(tmp_path / "h.csv")
    h.write_plot_table(tmp_path / "h.dat")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_lo,bin_hi,count"
    rows = [line.split() for line in (tmp_path / "h.dat").read_text().splitlines()]
    assert [int(r[1]) for r in rows] == [1, 0, 2, 0]


def test_uncertainty_stats_zero_initialised_model(rng):
    n = 12
    gs = GaussianSet(rng.uniform(-0.5, 0.5, (n, 3)), rng.normal(size=(n, 4)),
                     np.full((n, 3), -2.0), np.zeros(n), rng.uniform(size=(n, 1, 3)))
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], width=16, height=16, fx=20)
    model = UncertaintyModel.create([[-1, -1, -1], [1, 1, 1]], table_size=2 ** 8)
    h = uncertainty_stats(model, gs, cam)
    assert h.total == n and h.band_fraction == 1.0


def test_uncertainty_stats_constant_high(rng):
    n = 5
    gs = GaussianSet(rng.uniform(-0.5, 0.5, (n, 3)), rng.normal(size=(n, 4)),
                     np.full((n, 3), -2.0), np.zeros(n), rng.uniform(size=(n, 1, 3)))
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], width=16, height=16, fx=20)
    model = UncertaintyModel.create([[-1, -1, -1], [1, 1, 1]], table_size=2 ** 8)
    model.net.biases[-1][0] = np.log(0.91 / 0.09)
    h = uncertainty_stats(model, gs, cam)
    assert h.counts[45] == n
