"""Uncertainty model: input encoding followed by the MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ugsplat.hashgrid import EncodingConfig, InputEncoder, InputEncoderCache
from ugsplat.rasterizer import RasterConfig, project_gaussians
from ugsplat.scene import (
    Camera,
    GaussianSet,
    normalize_quaternions,
    normalize_quaternions_backward,
    view_directions,
)
from ugsplat.uncertainty import MLPCache, UncertaintyNet


@dataclass
class ModelCache:
    encoder: InputEncoderCache
    mlp: MLPCache
    scales: np.ndarray
    raw_rotations: np.ndarray


@dataclass
class ModelGrads:
    net: dict[str, np.ndarray]
    tables: dict[str, np.ndarray]
    positions: np.ndarray
    view_dirs: np.ndarray
    rotations: np.ndarray      # w.r.t. the stored (unnormalized) quaternion
    log_scales: np.ndarray


class UncertaintyModel:
    """u_i = MLP([H(P_i), V_i, R_i, S_i]) for a batch of Gaussians seen from one view."""

    def __init__(self, encoder: InputEncoder, net: UncertaintyNet):
        if net.input_dim != encoder.output_dim:
            raise ValueError(f"net expects {net.input_dim} inputs, encoder gives "
                             f"{encoder.output_dim}")
        self.encoder = encoder
        self.net = net

    @classmethod
    def create(cls, position_box, encoding: EncodingConfig | None = None,
               hidden=(64, 64), table_size: int = 2 ** 14, features_per_level: int = 4,
               base_resolution: float = 16.0, finest_resolution: float = 512.0,
               seed: int = 0, final_init_scale: float = 0.0) -> UncertaintyModel:
        encoder = InputEncoder(encoding or EncodingConfig(), position_box,
                               features_per_level=features_per_level, table_size=table_size,
                               base_resolution=base_resolution,
                               finest_resolution=finest_resolution, seed=seed)
        net = UncertaintyNet((encoder.output_dim, *hidden, 1), seed=seed + 1,
                             final_init_scale=final_init_scale)
        return cls(encoder, net)

    @property
    def frozen(self) -> bool:
        return self.net.frozen

    def freeze(self) -> None:
        # hash tables parameterize u as well, so they stop with the MLP
        self.net.frozen = True

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"mlp.{k}": v for k, v in self.net.parameters().items()}
        params.update({f"hash.{k}": g.tables for k, g in self.encoder.grids.items()})
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        group, key = name.split(".", 1)
        if group == "mlp":
            kind, k = key[0], int(key[1:])
            (self.net.weights if kind == "W" else self.net.biases)[k] = value
        else:
            self.encoder.grids[key].tables = value

    def forward(self, positions, view_dirs, rotations, log_scales):
        """``rotations`` are stored quaternions (normalized here)."""
        qn = normalize_quaternions(rotations)
        scales = np.exp(log_scales)
        inputs, enc_cache = self.encoder.forward(positions, view_dirs, qn, scales)
        u, mlp_cache = self.net.forward(inputs)
        return u, ModelCache(enc_cache, mlp_cache, scales, np.asarray(rotations))

    def backward(self, cache: ModelCache, d_u) -> ModelGrads:
        net_grads, d_inputs = self.net.backward(cache.mlp, d_u)
        raw, tables = self.encoder.backward(cache.encoder, d_inputs, scales=cache.scales)
        if self.frozen:
            tables = {k: np.zeros_like(v) for k, v in tables.items()}
        return ModelGrads(
            net=net_grads, tables=tables, positions=raw["position"], view_dirs=raw["view"],
            rotations=normalize_quaternions_backward(cache.raw_rotations, raw["rotation"]),
            log_scales=raw["scale"] * cache.scales)

    def predict_view(self, gaussians: GaussianSet, camera: Camera,
                     raster: RasterConfig | None = None):
        """u for the Gaussians that survive culling in ``camera``; returns ``(u, index)``."""
        proj = project_gaussians(gaussians, camera, raster)
        idx = proj.index
        if len(idx) == 0:
            return np.zeros(0), idx
        dirs = view_directions(camera.centre, gaussians.positions[idx])
        u, _ = self.forward(gaussians.positions[idx], dirs, gaussians.rotations[idx],
                            gaussians.log_scales[idx])
        return u, idx
