"""Versioned binary checkpoints.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header | tensor blob

The header describes every tensor section (dtype, shape, offset into the blob)
alongside the scalar state: counts, config and its digest, the metric log and
the frozen flag.  Sections are raw little-endian arrays, so a save/load round
trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ugsplat.errors import CheckpointFormatError
from ugsplat.hashgrid import EncodingConfig, HashGridEncoder, InputEncoder
from ugsplat.model import UncertaintyModel
from ugsplat.optim import Adam
from ugsplat.scene import Camera, GaussianSet, ImageBuffer, Scene
from ugsplat.trainer import TrainConfig, TrainingState
from ugsplat.uncertainty import UncertaintyNet

MAGIC = b"UGSCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    scene: Scene
    state: TrainingState
    model: UncertaintyModel | None
    config: TrainConfig


def _model_header(model: UncertaintyModel) -> dict:
    enc = model.encoder
    grids = {}
    for name, g in enc.grids.items():
        grids[name] = {"levels": g.levels, "features_per_level": g.features_per_level,
                       "base_resolution": g.base_resolution, "growth": g.growth,
                       "table_size": g.table_size, "domain_lo": g.domain_lo.tolist(),
                       "domain_hi": g.domain_hi.tolist(), "init_range": g.init_range,
                       "seed": g.seed, "clamp_count": g.clamp_count}
    return {"encoding": list(enc.config.as_tuple()),
            "features_per_level": enc.features_per_level,
            "position_box": enc.position_box.tolist(), "grids": grids,
            "widths": list(model.net.widths), "frozen": model.net.frozen}


def save_checkpoint(path, scene: Scene, state: TrainingState, model: UncertaintyModel | None,
                    config: TrainConfig) -> Path:
    """Write atomically: a temp file in the target directory is renamed over ``path``."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    gs = scene.gaussians
    for name, arr in gs.arrays().items():
        tensors[f"gaussians.{name}"] = arr
    views = {}
    for split in ("train", "test"):
        views[split] = []
        for k, (cam, img) in enumerate(scene.views(split)):
            views[split].append(cam.to_dict())
            tensors[f"view.{split}.{k}.world_to_camera"] = cam.world_to_camera
            tensors[f"view.{split}.{k}.image"] = img.pixels
    tensors["scene.bounding_box"] = scene.bounding_box
    tensors["scene.background"] = scene.background
    model_header = None
    if model is not None:
        model_header = _model_header(model)
        for name, value in model.parameters().items():
            tensors[f"model.{name}"] = value
    tensors.update(state.optimizer.state_arrays())

    sections, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        sections[name] = {"dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)

    header = {
        "version": VERSION,
        "counts": {"gaussians": gs.count, "train_views": len(scene.train_views),
                   "test_views": len(scene.test_views)},
        "config": config.to_dict(), "config_hash": config.digest(),
        "scene": {"name": scene.name, "sh_degree": gs.sh_degree, "views": views},
        "model": model_header,
        "state": {"iteration": state.iteration, "best_psnr": state.best_psnr,
                  "frozen": state.frozen, "freeze_iteration": state.freeze_iteration,
                  "adam_steps": state.optimizer.steps,
                  "adam_betas": [state.optimizer.beta1, state.optimizer.beta2],
                  "adam_eps": state.optimizer.eps,
                  "log": state.log, "prune_log": state.prune_log},
        "sections": sections, "blob_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
            fh.write(head)
            for raw in chunks:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_sections(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint file into ``(header, tensors)``."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated (only {len(data)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + head_len])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    blob = memoryview(data)[start + head_len:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointFormatError(
            f"{path}: truncated tensor data ({len(blob)} of {header['blob_bytes']} bytes)")
    tensors = {}
    for name, sec in header["sections"].items():
        raw = blob[sec["offset"]:sec["offset"] + sec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"])
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, tensors


def _load_model(head: dict, tensors: dict) -> UncertaintyModel:
    grids = {}
    for name, g in head["grids"].items():
        grids[name] = HashGridEncoder(tables=tensors[f"model.hash.{name}"], **g)
    enc = InputEncoder(EncodingConfig.from_tuple(tuple(head["encoding"])), head["position_box"],
                       features_per_level=head["features_per_level"], grids=grids)
    n_layers = len(head["widths"]) - 1
    net = UncertaintyNet(head["widths"],
                         weights=[tensors[f"model.mlp.W{k}"] for k in range(n_layers)],
                         biases=[tensors[f"model.mlp.b{k}"] for k in range(n_layers)])
    net.frozen = bool(head["frozen"])
    return UncertaintyModel(enc, net)


def load_checkpoint(path) -> Checkpoint:
    header, t = read_sections(path)
    sc = header["scene"]
    gs = GaussianSet(**{name: t[f"gaussians.{name}"] for name in GaussianSet.PARAMS},
                     sh_degree=sc["sh_degree"])
    splits = {}
    for split in ("train", "test"):
        splits[split] = []
        for k, cam in enumerate(sc["views"][split]):
            cam = dict(cam, world_to_camera=t[f"view.{split}.{k}.world_to_camera"])
            splits[split].append((Camera(**cam), ImageBuffer(t[f"view.{split}.{k}.image"])))
    scene = Scene(gs, splits["train"], splits["test"], name=sc["name"],
                  bounding_box=t["scene.bounding_box"], background=t["scene.background"])
    model = _load_model(header["model"], t) if header["model"] is not None else None

    st = header["state"]
    opt = Adam(tuple(st["adam_betas"]), st["adam_eps"])
    opt.load_state({k: v for k, v in t.items() if k.startswith("adam.")}, st["adam_steps"])
    state = TrainingState(iteration=st["iteration"], optimizer=opt, best_psnr=st["best_psnr"],
                          frozen=st["frozen"], freeze_iteration=st["freeze_iteration"],
                          log=st["log"], prune_log=st["prune_log"])
    config = TrainConfig.from_dict(header["config"])
    if config.digest() != header["config_hash"]:
        raise CheckpointFormatError(f"{path}: config hash mismatch")
    return Checkpoint(scene, state, model, config)
