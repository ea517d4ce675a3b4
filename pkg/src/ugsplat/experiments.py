"""Reusable synthetic experiments: toy convergence and the sparse-init overfitting study."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ugsplat.metrics import histogram
from ugsplat.model import UncertaintyModel
from ugsplat.synthetic import make_scene
from ugsplat.trainer import TrainConfig, Trainer

TOY_SCENE = dict(n_gaussians=20, n_train=8, n_test=0, size=32, position_noise=0.05,
                 scale_range=(0.3, 0.5))
SPARSE_SCENE = dict(n_gaussians=20, n_train=5, n_test=3, size=32, position_noise=0.08,
                    keep_fraction=0.6, spurious=6, colour_noise=0.1, scale_range=(0.3, 0.5))


def pooled_uncertainty(trainer: Trainer, split: str = "train") -> np.ndarray:
    """u of every visible Gaussian over all views of ``split``, concatenated."""
    if trainer.model is None:
        return np.zeros(0)
    vals = [trainer.model.predict_view(trainer.scene.gaussians, cam, trainer.raster)[0]
            for cam, _ in trainer.scene.views(split)]
    return np.concatenate(vals) if vals else np.zeros(0)


@dataclass
class RunResult:
    seed: int
    mechanism: bool
    iterations: int
    train_psnr: float
    test_psnr: float
    seconds: float
    u_start: dict | None = None
    u_end: dict | None = None
    log: list = field(default_factory=list, repr=False)

    @property
    def gap(self) -> float:
        return self.train_psnr - self.test_psnr


def build(scene_kwargs: dict, seed: int, config: TrainConfig) -> Trainer:
    scene, _ = make_scene(seed=seed, **scene_kwargs)
    model = (UncertaintyModel.create(scene.bounding_box, seed=seed)
             if config.use_uncertainty else None)
    return Trainer(scene, model, config)


def run(scene_kwargs: dict, seed: int, config: TrainConfig) -> RunResult:
    trainer = build(scene_kwargs, seed, config)
    u0 = histogram(pooled_uncertainty(trainer), iteration=0).summary() if trainer.model else None
    t = time.perf_counter()
    trainer.run()
    seconds = time.perf_counter() - t
    u1 = (histogram(pooled_uncertainty(trainer), iteration=trainer.state.iteration).summary()
          if trainer.model else None)
    return RunResult(seed, config.mechanism, trainer.state.iteration,
                     trainer.split_psnr("train"), trainer.split_psnr("test"), seconds,
                     u0, u1, trainer.state.log)


def toy_convergence(seed: int = 0, iterations: int = 2000, **overrides) -> RunResult:
    cfg = TrainConfig(iterations=iterations, seed=seed, eval_interval=250, **overrides)
    return run(TOY_SCENE, seed, cfg)


def sparse_pair(seed: int, iterations: int = 3000, **overrides) -> tuple[RunResult, RunResult]:
    """Same sparse scene trained with and without the uncertainty mechanism."""
    base = TrainConfig(iterations=iterations, seed=seed, eval_interval=500, **overrides)
    full = run(SPARSE_SCENE, seed, base)
    ablated = run(SPARSE_SCENE, seed, base.replace(use_uncertainty=False))
    return full, ablated
