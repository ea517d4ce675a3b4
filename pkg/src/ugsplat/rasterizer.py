"""Tile-based differentiable Gaussian rasterizer.

Forward: build 3D covariances, project with the pinhole Jacobian (EWA splatting),
bin into 16x16 tiles by the 3-sigma extent, depth-sort per tile and alpha-blend
front to back.  Backward: per tile, recompute the blend and push the image
gradient through blending, the 2D footprint, the projection and the covariance
factorization back to the stored parameters.

Pixel (x, y) has its centre at integer coordinates (x, y).  A Gaussian's
screen-space footprint is truncated to its 3-sigma ellipse, so the tile lists
are exact and the tiled image equals an untiled full blend.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ugsplat.errors import ContractError, DimensionError
from ugsplat.scene import (
    Camera,
    GaussianSet,
    ImageBuffer,
    normalize_quaternions,
    normalize_quaternions_backward,
    quaternion_to_matrix,
    quaternion_to_matrix_backward,
    view_directions,
    view_directions_backward,
)

SH_C1 = 0.4886025119029199
# Mahalanobis radius of the footprint, in standard deviations
FOOTPRINT_SIGMA = 3.0


@dataclass
class RasterConfig:
    tile_size: int = 16
    early_stop: bool = True
    min_transmittance: float = 1e-4
    lowpass: float = 0.3
    max_condition: float = 1e12
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    threads: int = 1

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------

def evaluate_sh(coeffs, view_dir) -> np.ndarray:
    """RGB from SH coefficients of degree 0 or 1, unclipped.

    Band 0 holds the RGB value directly (its basis constant is folded into the
    coefficient).  Degree 1 adds ``C1 * (-y c1 + z c2 - x c3)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    c = coeffs[None] if single else coeffs
    d = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    rgb = c[:, 0].copy()
    if c.shape[1] == 4:
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        rgb += SH_C1 * (-y * c[:, 1] + z * c[:, 2] - x * c[:, 3])
    elif c.shape[1] != 1:
        raise ValueError("only SH degrees 0 and 1 are supported")
    return rgb[0] if single else rgb


def evaluate_sh_backward(coeffs, view_dir, grad_rgb):
    """Returns ``(d_coeffs, d_view_dir)``."""
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[:, 0] = grad_rgb
    d_dir = np.zeros_like(view_dir)
    if coeffs.shape[1] == 4:
        x, y, z = view_dir[:, 0:1], view_dir[:, 1:2], view_dir[:, 2:3]
        d_coeffs[:, 1] = -SH_C1 * y * grad_rgb
        d_coeffs[:, 2] = SH_C1 * z * grad_rgb
        d_coeffs[:, 3] = -SH_C1 * x * grad_rgb
        d_dir[:, 0] = -SH_C1 * np.sum(coeffs[:, 3] * grad_rgb, axis=1)
        d_dir[:, 1] = -SH_C1 * np.sum(coeffs[:, 1] * grad_rgb, axis=1)
        d_dir[:, 2] = SH_C1 * np.sum(coeffs[:, 2] * grad_rgb, axis=1)
    return d_coeffs, d_dir


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def build_covariance(rotation, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T for (batches of) quaternions and log-scales."""
    r = quaternion_to_matrix(normalize_quaternions(rotation))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (r * s2[..., None, :]) @ np.swapaxes(r, -1, -2)


@dataclass
class Projection:
    """Screen-space state of the Gaussians that survived culling.

    Arrays are aligned with ``index`` (storage indices into the GaussianSet).
    The trailing fields are kept for the backward pass.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray          # (a, b, c) of the inverse 2D covariance
    depth: np.ndarray
    radius: np.ndarray
    colour: np.ndarray
    count: int                 # size of the full GaussianSet
    width: int
    height: int
    n_behind: int = 0
    n_offscreen: int = 0
    n_singular: int = 0
    t_cam: np.ndarray | None = None
    jac: np.ndarray | None = None
    cov_cam: np.ndarray | None = None
    rot: np.ndarray | None = None
    quat: np.ndarray | None = None
    scales: np.ndarray | None = None
    view_dirs: np.ndarray | None = None
    colour_raw: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.index)

    def get(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(self.mean2d[i], self.cov2d[i], float(self.depth[i]),
                                 self.colour[i], int(self.index[i]))


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    colour: np.ndarray
    index: int
    effective_opacity: float | None = None


def _camera_jacobian(t, fx, fy):
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    jac = np.zeros((len(t), 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / tz ** 2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / tz ** 2
    return jac


def project_gaussians(gaussians: GaussianSet, camera: Camera,
                      config: RasterConfig | None = None) -> Projection:
    config = config or RasterConfig()
    n = gaussians.count
    w_rot, w_t = camera.rotation, camera.translation
    t_all = gaussians.positions @ w_rot.T + w_t
    front = t_all[:, 2] > camera.near_clip
    idx = np.nonzero(front)[0]
    n_behind = n - len(idx)

    t = t_all[idx]
    quat = normalize_quaternions(gaussians.rotations[idx])
    rot = quaternion_to_matrix(quat)
    scales = np.exp(gaussians.log_scales[idx])
    sigma = (rot * (scales ** 2)[:, None, :]) @ np.swapaxes(rot, 1, 2)
    cov_cam = w_rot @ sigma @ w_rot.T
    jac = _camera_jacobian(t, camera.fx, camera.fy)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += config.lowpass
    cov2d[:, 1, 1] += config.lowpass
    mean2d = np.stack([camera.fx * t[:, 0] / t[:, 2] + camera.cx,
                       camera.fy * t[:, 1] / t[:, 2] + camera.cy], axis=1)

    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    mid = 0.5 * (A + C)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max, lam_min = mid + disc, mid - disc
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lam_min > 0, lam_max / lam_min, np.inf)
    ok = (det > 0) & (cond <= config.max_condition) & np.isfinite(cond)
    n_singular = int(np.sum(~ok))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    onscreen = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width - 1)
                & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height - 1))
    n_offscreen = int(np.sum(ok & ~onscreen))
    keep = ok & onscreen

    sel = np.nonzero(keep)[0]
    idx = idx[sel]
    det = det[sel]
    conic = np.stack([C[sel] / det, -B[sel] / det, A[sel] / det], axis=1)
    dirs = view_directions(camera.centre, gaussians.positions[idx])
    colour_raw = evaluate_sh(gaussians.colours[idx], dirs)
    return Projection(
        index=idx, mean2d=mean2d[sel], cov2d=cov2d[sel], conic=conic, depth=t[sel, 2],
        radius=radius[sel], colour=np.clip(colour_raw, 0.0, 1.0), count=n,
        width=camera.width, height=camera.height, n_behind=n_behind,
        n_offscreen=n_offscreen, n_singular=n_singular, t_cam=t[sel], jac=jac[sel],
        cov_cam=cov_cam[sel], rot=rot[sel], quat=quat[sel], scales=scales[sel],
        view_dirs=dirs, colour_raw=colour_raw)


def project(gaussians: GaussianSet, camera: Camera, index: int = 0,
            config: RasterConfig | None = None) -> ProjectedGaussian | None:
    """Project a single Gaussian; ``None`` when it is culled."""
    one = gaussians.subset(np.array([index]))
    proj = project_gaussians(one, camera, config)
    if len(proj) == 0:
        return None
    pg = proj.get(0)
    pg.index = index
    return pg


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

@dataclass
class RenderOutput:
    image: np.ndarray             # (H, W, 3)
    transmittance: np.ndarray     # (H, W) final transmittance
    weight_sums: np.ndarray       # (N,) summed blend weight per Gaussian
    projection: Projection
    opacities: np.ndarray         # effective opacities aligned with projection
    tiles: list = field(default_factory=list)   # (y0, y1, x0, x1, sorted local ids)
    config: RasterConfig = field(default_factory=RasterConfig)

    @property
    def buffer(self) -> ImageBuffer:
        return ImageBuffer(np.clip(self.image, 0.0, 1.0))


def _tile_lists(proj: Projection, ts: int):
    h, w = proj.height, proj.width
    ny, nx = -(-h // ts), -(-w // ts)
    if len(proj) == 0:
        return [(ty * ts, min((ty + 1) * ts, h), tx * ts, min((tx + 1) * ts, w),
                 np.zeros(0, dtype=np.int64)) for ty in range(ny) for tx in range(nx)]
    # inclusive range of pixel centres covered by the 3-sigma box, then tiles
    x_lo = np.clip(np.ceil(proj.mean2d[:, 0] - proj.radius), 0, w - 1).astype(np.int64) // ts
    x_hi = np.clip(np.floor(proj.mean2d[:, 0] + proj.radius), 0, w - 1).astype(np.int64) // ts
    y_lo = np.clip(np.ceil(proj.mean2d[:, 1] - proj.radius), 0, h - 1).astype(np.int64) // ts
    y_hi = np.clip(np.floor(proj.mean2d[:, 1] + proj.radius), 0, h - 1).astype(np.int64) // ts
    order = np.lexsort((proj.index, proj.depth))
    tiles = []
    for ty in range(ny):
        in_row = (y_lo[order] <= ty) & (y_hi[order] >= ty)
        for tx in range(nx):
            hit = in_row & (x_lo[order] <= tx) & (x_hi[order] >= tx)
            tiles.append((ty * ts, min((ty + 1) * ts, h), tx * ts, min((tx + 1) * ts, w),
                          order[hit]))
    return tiles


def _blend_terms(proj: Projection, opac: np.ndarray, ids: np.ndarray, px: np.ndarray,
                 config: RasterConfig):
    """Per-pixel blend quantities for one tile, Gaussians in front-to-back order."""
    mean = proj.mean2d[ids]
    conic = proj.conic[ids]
    dx = px[:, 0:1] - mean[None, :, 0]
    dy = px[:, 1:2] - mean[None, :, 1]
    a, b, c = conic[None, :, 0], conic[None, :, 1], conic[None, :, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    inside = power >= -0.5 * FOOTPRINT_SIGMA ** 2
    dens = np.where(inside, np.exp(np.minimum(power, 0.0)), 0.0)
    alpha = opac[ids][None, :] * dens
    one_minus = 1.0 - alpha
    t_excl = np.cumprod(np.concatenate([np.ones((len(px), 1)), one_minus[:, :-1]], axis=1), axis=1)
    if config.early_stop:
        include = t_excl >= config.min_transmittance
        alpha = np.where(include, alpha, 0.0)
        one_minus = 1.0 - alpha
        t_excl = np.cumprod(np.concatenate([np.ones((len(px), 1)), one_minus[:, :-1]], axis=1),
                            axis=1)
    else:
        include = np.ones_like(alpha, dtype=bool)
    weights = alpha * t_excl
    t_final = t_excl[:, -1] * one_minus[:, -1]
    return dx, dy, dens, alpha, include, t_excl, weights, t_final


def _pixel_grid(y0, y1, x0, x1) -> np.ndarray:
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)


def _map_tiles(fn, tiles, threads: int):
    if threads and threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tiles))
    return [fn(t) for t in tiles]


def render(proj: Projection, opacities, config: RasterConfig | None = None) -> RenderOutput:
    """Alpha-blend a projection.  ``opacities`` are effective opacities aligned
    with ``proj.index`` (or with the full set when of length ``proj.count``)."""
    config = config or RasterConfig()
    opac = np.asarray(opacities, dtype=np.float64)
    if len(opac) == proj.count and len(opac) != len(proj):
        opac = opac[proj.index]
    if len(opac) != len(proj):
        raise DimensionError(f"got {len(opac)} opacities for {len(proj)} projected Gaussians")
    h, w = proj.height, proj.width
    image = np.empty((h, w, 3))
    trans = np.empty((h, w))
    tiles = _tile_lists(proj, config.tile_size)

    def work(tile):
        y0, y1, x0, x1, ids = tile
        if len(ids) == 0:
            return None
        px = _pixel_grid(y0, y1, x0, x1)
        _, _, _, _, _, _, weights, t_final = _blend_terms(proj, opac, ids, px, config)
        rgb = weights @ proj.colour[ids] + t_final[:, None] * config.background
        return rgb, t_final, weights.sum(axis=0)

    sums = np.zeros(proj.count)
    for tile, res in zip(tiles, _map_tiles(work, tiles, config.threads)):
        y0, y1, x0, x1, ids = tile
        if res is None:
            image[y0:y1, x0:x1] = config.background
            trans[y0:y1, x0:x1] = 1.0
            continue
        rgb, t_final, wsum = res
        image[y0:y1, x0:x1] = rgb.reshape(y1 - y0, x1 - x0, 3)
        trans[y0:y1, x0:x1] = t_final.reshape(y1 - y0, x1 - x0)
        sums[proj.index[ids]] += wsum
    return RenderOutput(image, trans, sums, proj, opac, tiles, config)


def render_dense(proj: Projection, opacities, config: RasterConfig | None = None) -> np.ndarray:
    """Untiled blend of every projected Gaussian over every pixel (fixture generation)."""
    config = config or RasterConfig(early_stop=False)
    opac = np.asarray(opacities, dtype=np.float64)
    if len(opac) == proj.count and len(opac) != len(proj):
        opac = opac[proj.index]
    px = _pixel_grid(0, proj.height, 0, proj.width)
    if len(proj) == 0:
        return np.tile(config.background, (proj.height, proj.width, 1))
    ids = np.lexsort((proj.index, proj.depth))
    *_, weights, t_final = _blend_terms(proj, opac, ids, px, config)
    rgb = weights @ proj.colour[ids] + t_final[:, None] * config.background
    return rgb.reshape(proj.height, proj.width, 3)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class ScreenGrads:
    """Gradients w.r.t. screen-space quantities, aligned with the projection."""

    mean2d: np.ndarray
    conic: np.ndarray
    colour: np.ndarray
    opacity: np.ndarray


@dataclass
class GaussianGrads:
    """Gradients w.r.t. stored parameters, full length (zero for culled Gaussians)."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colours: np.ndarray
    opacities: np.ndarray      # w.r.t. the effective opacity alpha_bar


def blend_backward(out: RenderOutput, grad_image) -> ScreenGrads:
    if out is None or out.tiles is None or out.projection is None:
        raise ContractError("render_backward needs the forward RenderOutput")
    proj, opac, config = out.projection, out.opacities, out.config
    g_img = np.asarray(grad_image, dtype=np.float64)
    if g_img.shape != out.image.shape:
        raise DimensionError(f"image gradient {g_img.shape} does not match {out.image.shape}")
    m = len(proj)
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_colour = np.zeros((m, 3))
    d_opac = np.zeros(m)

    def work(tile):
        y0, y1, x0, x1, ids = tile
        if len(ids) == 0:
            return None
        g = g_img[y0:y1, x0:x1].reshape(-1, 3)
        if not g.any():
            return None
        px = _pixel_grid(y0, y1, x0, x1)
        dx, dy, dens, alpha, include, t_excl, weights, t_final = _blend_terms(
            proj, opac, ids, px, config)
        col = proj.colour[ids]
        s = g @ col.T                                               # (P, K)
        sw = s * weights
        # colour accumulated behind each Gaussian, background included
        behind = np.cumsum(sw[:, ::-1], axis=1)[:, ::-1] - sw
        behind += (t_final * (g @ config.background))[:, None]
        d_alpha = (s * t_excl - behind / (1.0 - alpha)) * include
        d_power = d_alpha * alpha
        conic = proj.conic[ids]
        a, b, c = conic[None, :, 0], conic[None, :, 1], conic[None, :, 2]
        dm = np.stack([np.sum(d_power * (a * dx + b * dy), axis=0),
                       np.sum(d_power * (b * dx + c * dy), axis=0)], axis=1)
        dc = np.stack([np.sum(d_power * (-0.5 * dx * dx), axis=0),
                       np.sum(d_power * (-dx * dy), axis=0),
                       np.sum(d_power * (-0.5 * dy * dy), axis=0)], axis=1)
        return ids, dm, dc, weights.T @ g, np.sum(d_alpha * dens, axis=0)

    # tiles merged in a fixed order so accumulation is deterministic
    for res in _map_tiles(work, out.tiles, config.threads):
        if res is None:
            continue
        ids, dm, dc, dcol, dop = res
        d_mean[ids] += dm
        d_conic[ids] += dc
        d_colour[ids] += dcol
        d_opac[ids] += dop
    return ScreenGrads(d_mean, d_conic, d_colour, d_opac)


def projection_backward(gaussians: GaussianSet, camera: Camera, proj: Projection,
                        grads: ScreenGrads, d_view_dir=None) -> GaussianGrads:
    """Chain screen-space gradients (and an optional extra view-direction
    gradient, aligned with the projection) back to the stored parameters."""
    n, idx = gaussians.count, proj.index
    out = GaussianGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                        np.zeros_like(gaussians.colours), np.zeros(n))
    if len(idx) == 0:
        return out
    out.opacities[idx] = grads.opacity

    # colour: clip mask, then SH
    inside = (proj.colour_raw >= 0.0) & (proj.colour_raw <= 1.0)
    d_coeffs, d_dir = evaluate_sh_backward(gaussians.colours[idx], proj.view_dirs,
                                           grads.colour * inside)
    out.colours[idx] = d_coeffs
    if d_view_dir is not None:
        d_dir = d_dir + d_view_dir
    d_pos = view_directions_backward(camera.centre, gaussians.positions[idx], d_dir)

    # conic -> 2D covariance: dSigma' = -K G_K K
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    k = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    da, db, dc = grads.conic[:, 0], grads.conic[:, 1], grads.conic[:, 2]
    gk = np.stack([np.stack([da, 0.5 * db], -1), np.stack([0.5 * db, dc], -1)], -2)
    g_cov2d = -k @ gk @ k

    jac, cov_cam = proj.jac, proj.cov_cam
    g_cov_cam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ cov_cam
    w_rot = camera.rotation
    g_sigma = w_rot.T @ g_cov_cam @ w_rot

    rot, s = proj.rot, proj.scales
    g_rot = 2.0 * g_sigma @ rot * (s ** 2)[:, None, :]
    rt_g_r = np.swapaxes(rot, 1, 2) @ g_sigma @ rot
    out.log_scales[idx] = 2.0 * s ** 2 * np.diagonal(rt_g_r, axis1=1, axis2=2)
    d_quat = quaternion_to_matrix_backward(proj.quat, g_rot)
    out.rotations[idx] = normalize_quaternions_backward(gaussians.rotations[idx], d_quat)

    # camera-space mean: through the Jacobian and the projected mean
    t = proj.t_cam
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    dmx, dmy = grads.mean2d[:, 0], grads.mean2d[:, 1]
    d_t = np.zeros_like(t)
    d_t[:, 0] = dmx * fx / tz + g_jac[:, 0, 2] * (-fx / tz ** 2)
    d_t[:, 1] = dmy * fy / tz + g_jac[:, 1, 2] * (-fy / tz ** 2)
    d_t[:, 2] = (dmx * (-fx * tx / tz ** 2) + dmy * (-fy * ty / tz ** 2)
                 + g_jac[:, 0, 0] * (-fx / tz ** 2) + g_jac[:, 0, 2] * (2 * fx * tx / tz ** 3)
                 + g_jac[:, 1, 1] * (-fy / tz ** 2) + g_jac[:, 1, 2] * (2 * fy * ty / tz ** 3))
    out.positions[idx] = d_pos + d_t @ w_rot
    return out


def render_backward(gaussians: GaussianSet, camera: Camera, out: RenderOutput,
                    grad_image, d_view_dir=None) -> GaussianGrads:
    """Gradients of the rendered image w.r.t. mu, rotation, log-scale, colour
    coefficients and the effective opacity of every Gaussian."""
    screen = blend_backward(out, grad_image)
    return projection_backward(gaussians, camera, out.projection, screen, d_view_dir)


def render_view(gaussians: GaussianSet, camera: Camera, opacities=None,
                config: RasterConfig | None = None) -> RenderOutput:
    """Project and render; ``opacities`` default to sigmoid(opacity_logits)."""
    config = config or RasterConfig()
    proj = project_gaussians(gaussians, camera, config)
    opac = gaussians.opacities if opacities is None else np.asarray(opacities, dtype=np.float64)
    if len(opac) != gaussians.count:
        raise DimensionError("need one effective opacity per Gaussian")
    return render(proj, opac[proj.index], config)
