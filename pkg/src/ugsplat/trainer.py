"""Training loop: one view per iteration through encode -> u -> opacity
modulation -> soft dropout -> render -> colour loss -> full backward -> Adam."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ugsplat.errors import EmptySceneError, NonFiniteLossError
from ugsplat.losses import colour_loss
from ugsplat.metrics import MetricReport, psnr, ssim
from ugsplat.model import UncertaintyModel
from ugsplat.optim import Adam
from ugsplat.rasterizer import (
    RasterConfig,
    RenderOutput,
    blend_backward,
    project_gaussians,
    projection_backward,
    render,
)
from ugsplat.scene import Camera, Scene, sigmoid
from ugsplat.softdrop import SoftDropConfig, apply_opacity, apply_opacity_backward, sample_q

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "l1", "dssim", "train_psnr", "test_psnr",
               "n_gaussians", "frozen")


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 0.05
    colour: float = 2.5e-3
    mlp: float = 1e-3
    hash: float = 1e-2


@dataclass
class TrainConfig:
    iterations: int = 6000
    lam: float = 0.2
    freeze_epsilon: float = 0.2
    freeze_check_interval: int = 500
    lr: LearningRates = field(default_factory=LearningRates)
    # position learning rates are multiplied by this; None = scene half-diagonal
    position_lr_scale: float | None = None
    prune_interval: int = 500
    prune_threshold: float = 0.005
    prune_until_fraction: float = 0.8
    eval_interval: int = 100
    seed: int = 0
    use_uncertainty: bool = True
    modulation: bool = True
    dropout: bool = True
    softdrop: SoftDropConfig = field(default_factory=SoftDropConfig)
    tile_size: int = 16
    lowpass: float = 0.3
    early_stop: bool = True
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if isinstance(self.softdrop, dict):
            self.softdrop = SoftDropConfig(**self.softdrop)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not self.freeze_epsilon > 0:
            raise ValueError("freeze_epsilon must be positive")
        if any(v < 0 for v in dataclasses.asdict(self.lr).values()):
            raise ValueError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def mechanism(self) -> bool:
        return self.use_uncertainty and (self.modulation or self.dropout)


@dataclass
class TrainingState:
    iteration: int = 0
    optimizer: Adam = field(default_factory=Adam)
    best_psnr: float | None = None
    frozen: bool = False
    freeze_iteration: int | None = None
    log: list[dict] = field(default_factory=list)
    prune_log: list[dict] = field(default_factory=list)


@dataclass
class PruneReport:
    iteration: int
    removed: list[int]
    remaining: int


def check_freeze(state: TrainingState, current_psnr: float, config: TrainConfig,
                 model: UncertaintyModel | None = None) -> TrainingState:
    """Freeze once train PSNR improves by less than epsilon since the last check.

    The first call only records a baseline.  Freezing is one-way.
    """
    if state.best_psnr is None:
        state.best_psnr = float(current_psnr)
        return state
    delta = current_psnr - state.best_psnr
    if delta < config.freeze_epsilon and not state.frozen:
        state.frozen = True
        state.freeze_iteration = state.iteration
        if model is not None:
            model.freeze()
        log.info("uncertainty model frozen at iteration %d (dPSNR=%.3f)", state.iteration, delta)
    state.best_psnr = max(state.best_psnr, float(current_psnr))
    return state


def prune(scene: Scene, threshold: float, optimizer: Adam | None = None,
          iteration: int = 0) -> PruneReport:
    """Drop Gaussians whose opacity sigmoid(logit) is below ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    gs = scene.gaussians
    keep = gs.opacities >= threshold
    if not keep.any():
        raise EmptySceneError(f"pruning at threshold {threshold} would remove every Gaussian")
    removed = np.nonzero(~keep)[0]
    if len(removed):
        scene.gaussians = gs.subset(keep)
        if optimizer is not None:
            for name in gs.PARAMS:
                optimizer.keep_rows(name, keep)
    return PruneReport(iteration, removed.tolist(), scene.gaussians.count)


def _view_choice(seed: int, iteration: int, n_views: int) -> int:
    bitgen = np.random.Philox(key=np.array([seed & (2 ** 64 - 1), 1], dtype=np.uint64),
                              counter=np.array([0, 0, iteration, 0], dtype=np.uint64))
    return int(bitgen.random_raw(1)[0] % np.uint64(n_views))


class Trainer:
    def __init__(self, scene: Scene, model: UncertaintyModel | None, config: TrainConfig,
                 state: TrainingState | None = None):
        self.scene = scene
        self.model = model
        self.config = config
        self.state = state or TrainingState()
        if self.state.frozen and model is not None:
            model.freeze()
        if config.use_uncertainty and model is None:
            raise ValueError("the uncertainty mechanism needs a model")
        box = scene.bounding_box
        self.spatial_scale = (config.position_lr_scale if config.position_lr_scale is not None
                              else 0.5 * float(np.linalg.norm(box[1] - box[0])))

    # ---------------------------------------------------------------- config
    @property
    def raster(self) -> RasterConfig:
        c = self.config
        return RasterConfig(tile_size=c.tile_size, early_stop=c.early_stop, lowpass=c.lowpass,
                            background=self.scene.background, threads=c.threads)

    def position_lr(self, iteration: int) -> float:
        lr = self.config.lr
        if lr.position_init == 0.0 or lr.position_final == 0.0:
            return 0.0
        frac = min(max(iteration / max(self.config.iterations, 1), 0.0), 1.0)
        log_lr = (1 - frac) * np.log(lr.position_init) + frac * np.log(lr.position_final)
        return float(np.exp(log_lr)) * self.spatial_scale

    # ------------------------------------------------------------- opacities
    def _opacities(self, camera: Camera, proj, q):
        """Effective opacities for the projected Gaussians plus backward caches."""
        gs = self.scene.gaussians
        idx = proj.index
        alpha = sigmoid(gs.opacity_logits[idx])
        c = self.config
        if not c.mechanism or len(idx) == 0:
            return apply_opacity(alpha, None, None, c.softdrop) + (None,)
        u, mcache = self.model.forward(gs.positions[idx], proj.view_dirs, gs.rotations[idx],
                                       gs.log_scales[idx])
        abar, ocache = apply_opacity(alpha, u, q, c.softdrop, modulate=c.modulation,
                                     dropout=c.dropout if q is not None else False)
        return abar, ocache, mcache

    def render(self, camera: Camera, eval_mode: str | None = None,
               iteration: int = 0) -> RenderOutput:
        """Evaluation render; ``eval_mode`` defaults to the soft-dropout config."""
        mode = eval_mode or self.config.softdrop.eval_mode
        proj = project_gaussians(self.scene.gaussians, camera, self.raster)
        if mode == "deterministic_q_half":
            q = np.full(len(proj), 0.5)
        elif mode == "stochastic":
            q = sample_q(self.config.seed + 0x5EED, iteration, proj.count)[proj.index]
        else:
            q = None
        abar, _, _ = self._opacities(camera, proj, q)
        return render(proj, abar, self.raster)

    def evaluate(self, split: str, eval_mode: str | None = None,
                 with_ssim: bool = True) -> MetricReport:
        report = MetricReport()
        for k, (cam, img) in enumerate(self.scene.views(split)):
            out = self.render(cam, eval_mode)
            rendered = np.clip(out.image, 0.0, 1.0)
            report.add(f"{split}_{k}", psnr(rendered, img.pixels),
                       ssim(rendered, img.pixels) if with_ssim else float("nan"))
        return report

    def split_psnr(self, split: str) -> float:
        views = self.scene.views(split)
        if not views:
            return float("nan")
        return float(np.mean([psnr(np.clip(self.render(cam).image, 0, 1), img.pixels)
                              for cam, img in views]))

    # ------------------------------------------------------------------ step
    def train_step(self) -> dict:
        st, c = self.state, self.config
        gs = self.scene.gaussians
        it = st.iteration + 1
        views = self.scene.train_views
        cam, target = views[_view_choice(c.seed, it, len(views))]

        proj = project_gaussians(gs, cam, self.raster)
        q = sample_q(c.seed, it, gs.count)[proj.index] if c.mechanism and c.dropout else None
        abar, ocache, mcache = self._opacities(cam, proj, q)
        out = render(proj, abar, self.raster)
        loss = colour_loss(out.image, target.pixels, c.lam)
        if not np.isfinite(loss.total):
            bad = [i for i in range(gs.count)
                   if not all(np.all(np.isfinite(a[i])) for a in gs.arrays().values())]
            raise NonFiniteLossError(
                f"non-finite loss at iteration {it}; offending Gaussians: {bad or 'none'}", bad)

        screen = blend_backward(out, loss.grad)
        d_alpha, d_u = apply_opacity_backward(ocache, c.softdrop, screen.opacity)
        mgrads = None
        if d_u is not None:
            mgrads = self.model.backward(mcache, d_u)
        grads = projection_backward(gs, cam, proj, screen,
                                    d_view_dir=None if mgrads is None else mgrads.view_dirs)
        idx = proj.index
        alpha = sigmoid(gs.opacity_logits[idx])
        d_logits = np.zeros(gs.count)
        d_logits[idx] = d_alpha * alpha * (1.0 - alpha)
        if mgrads is not None:
            grads.positions[idx] += mgrads.positions
            grads.rotations[idx] += mgrads.rotations
            grads.log_scales[idx] += mgrads.log_scales

        lr = c.lr
        opt = st.optimizer
        opt.step("positions", gs.positions, grads.positions, self.position_lr(it))
        rot_update = opt.step("rotations", gs.rotations, grads.rotations, lr.rotation)
        opt.step("log_scales", gs.log_scales, grads.log_scales, lr.scale)
        opt.step("opacity_logits", gs.opacity_logits, d_logits, lr.opacity)
        opt.step("colours", gs.colours, grads.colours, lr.colour)
        gs.normalize_rotations(np.nonzero(np.any(rot_update != 0, axis=1))[0])
        if mgrads is not None and not self.model.frozen:
            for name, g in mgrads.net.items():
                opt.step(f"mlp.{name}", self.model.parameters()[f"mlp.{name}"], g, lr.mlp)
            for name, g in mgrads.tables.items():
                opt.step(f"hash.{name}", self.model.encoder.grids[name].tables, g, lr.hash)

        st.iteration = it
        row = {"iteration": it, "loss": loss.total, "l1": loss.l1, "dssim": loss.dssim,
               "train_psnr": None, "test_psnr": None, "n_gaussians": gs.count,
               "frozen": int(st.frozen)}
        self._periodic(row)
        st.log.append(row)
        return row

    def _periodic(self, row: dict) -> None:
        st, c = self.state, self.config
        it = st.iteration
        checks = c.mechanism and c.freeze_check_interval > 0 and it % c.freeze_check_interval == 0
        evals = (c.eval_interval > 0 and it % c.eval_interval == 0) or it == c.iterations
        if evals or checks:
            row["train_psnr"] = self.split_psnr("train")
        if evals and self.scene.test_views:
            row["test_psnr"] = self.split_psnr("test")
        if checks:
            check_freeze(st, row["train_psnr"], c, self.model)
            row["frozen"] = int(st.frozen)
        if (c.prune_interval > 0 and it % c.prune_interval == 0
                and it <= c.prune_until_fraction * c.iterations):
            rep = prune(self.scene, c.prune_threshold, st.optimizer, it)
            if rep.removed:
                st.prune_log.append(dataclasses.asdict(rep))
                log.info("iteration %d: pruned %d Gaussians", it, len(rep.removed))
            row["n_gaussians"] = self.scene.gaussians.count

    # ------------------------------------------------------------------- run
    def begin(self) -> None:
        """Record the plateau baseline before the first step."""
        if self.config.mechanism and self.state.best_psnr is None:
            check_freeze(self.state, self.split_psnr("train"), self.config, self.model)

    def run(self, iterations: int | None = None, csv_path=None, callback=None) -> TrainingState:
        target = self.config.iterations if iterations is None else iterations
        self.begin()
        while self.state.iteration < target:
            row = self.train_step()
            if callback is not None:
                callback(self, row)
        if csv_path is not None:
            write_metric_log(self.state.log, csv_path)
        return self.state


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_metric_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in LOG_COLUMNS])
