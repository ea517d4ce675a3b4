"""Synthetic desk-scale scenes: known Gaussians, ring cameras, rendered targets."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from ugsplat.ply import write_ply
from ugsplat.rasterizer import RasterConfig, project_gaussians, render_dense
from ugsplat.scene import (
    Camera,
    GaussianSet,
    ImageBuffer,
    Scene,
    bounding_box_of,
    logit,
    nearest_neighbour_scale,
)


def random_gaussians(n: int, rng: np.random.Generator, extent: float = 0.8,
                     scale_range=(0.1, 0.25), opacity_range=(0.5, 0.75)) -> GaussianSet:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=rng.uniform(-extent, extent, (n, 3)),
        rotations=q,
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacity_logits=logit(rng.uniform(*opacity_range, n)),
        colours=rng.uniform(0.1, 0.9, (n, 1, 3)),
    )


def ring_cameras(n: int, size: int = 32, radius: float = 4.0, fx: float = 40.0,
                 elevation: float = 0.6, phase: float = 0.0) -> list[Camera]:
    cams = []
    for k in range(n):
        theta = phase + 2 * np.pi * k / n
        eye = np.array([radius * np.sin(theta), elevation * np.cos(3 * theta),
                        -radius * np.cos(theta)])
        cams.append(Camera.look_at(eye, np.zeros(3), width=size, height=size, fx=fx))
    return cams


def render_targets(gt: GaussianSet, cameras, background=(0.0, 0.0, 0.0)) -> list[ImageBuffer]:
    cfg = RasterConfig(early_stop=False, background=np.asarray(background, dtype=np.float64))
    out = []
    for cam in cameras:
        img = render_dense(project_gaussians(gt, cam, cfg), gt.opacities, cfg)
        out.append(ImageBuffer(np.clip(img, 0.0, 1.0)))
    return out


def init_from_points(points, colours) -> GaussianSet:
    points = np.asarray(points, dtype=np.float64)
    log_s = np.repeat(np.log(nearest_neighbour_scale(points))[:, None], 3, axis=1)
    return GaussianSet.from_points(points, np.clip(colours, 0, 1), log_s)


def make_scene(n_gaussians: int = 20, n_train: int = 8, n_test: int = 0, size: int = 32,
               seed: int = 0, position_noise: float = 0.05, keep_fraction: float = 1.0,
               spurious: int = 0, colour_noise: float = 0.0, extent: float = 0.8,
               scale_range=(0.1, 0.25)) -> tuple[Scene, GaussianSet]:
    """Ground-truth scene plus a noisy "SfM-like" initialization.

    ``keep_fraction`` < 1 and ``spurious`` > 0 make the initial point cloud sparse
    and polluted, as in the sparse-view setting.
    """
    rng = np.random.default_rng(seed)
    gt = random_gaussians(n_gaussians, rng, extent=extent, scale_range=scale_range)
    cams = ring_cameras(n_train + n_test, size=size, phase=rng.uniform(0, 2 * np.pi))
    # interleave so held-out views sit between training views
    order = np.arange(n_train + n_test)
    test_ids = (set(np.linspace(0, n_train + n_test, n_test, endpoint=False).astype(int) + 1)
                if n_test else set())
    test_ids = {i % (n_train + n_test) for i in test_ids}
    train_ids = [i for i in order if i not in test_ids]
    images = render_targets(gt, cams)

    n_keep = max(1, int(round(keep_fraction * n_gaussians)))
    keep = np.sort(rng.choice(n_gaussians, n_keep, replace=False))
    pts = gt.positions[keep] + rng.normal(0, position_noise, (n_keep, 3))
    cols = gt.colours[keep, 0] + rng.normal(0, colour_noise, (n_keep, 3))
    if spurious:
        pts = np.concatenate([pts, rng.uniform(-extent, extent, (spurious, 3))])
        cols = np.concatenate([cols, rng.uniform(0.1, 0.9, (spurious, 3))])
    init = init_from_points(pts, cols)
    box = bounding_box_of(np.concatenate([pts, gt.positions]), pad=0.25)
    scene = Scene(init,
                  [(cams[i], images[i]) for i in train_ids],
                  [(cams[i], images[i]) for i in sorted(test_ids)],
                  name=f"synthetic-{seed}", bounding_box=box)
    return scene, gt


def write_fixture(directory, scene: Scene, name: str = "scene") -> Path:
    """Write a scene as PLY + PNGs + YAML config; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gs = scene.gaussians
    rgb = np.clip(np.rint(gs.colours[:, 0] * 255), 0, 255).astype(np.uint8)
    write_ply(directory / "points.ply", {
        "x": gs.positions[:, 0], "y": gs.positions[:, 1], "z": gs.positions[:, 2],
        "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2]})
    views = []
    all_views = scene.train_views + scene.test_views
    for k, (cam, img) in enumerate(all_views):
        fname = f"view_{k:02d}.png"
        img.write_png(directory / fname)
        entry = cam.to_dict()
        entry["image"] = fname
        views.append(entry)
    n_train = len(scene.train_views)
    cfg = {
        "name": name,
        "points_path": "points.ply",
        "sh_degree": gs.sh_degree,
        "bounding_box": scene.bounding_box.tolist(),
        "background": scene.background.tolist(),
        "views": views,
        "split": {"train": list(range(n_train)),
                  "test": list(range(n_train, len(all_views)))},
    }
    path = directory / "scene.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path
