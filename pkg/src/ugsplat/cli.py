"""Command-line interface: ``ugsplat {init,train,render,eval,uncertainty-stats}``.

Outputs default to ``$UGSPLAT_OUTPUT_ROOT`` (``./runs`` when unset).  Every
failure prints a single ``error[CODE]: message`` line to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ugsplat import __version__
from ugsplat.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ugsplat.errors import InputError, UGSplatError
from ugsplat.metrics import histogram
from ugsplat.model import UncertaintyModel
from ugsplat.scene import Camera, ImageBuffer, load_scene
from ugsplat.softdrop import omega_curve
from ugsplat.trainer import Trainer, TrainConfig, TrainingState

OUTPUT_ROOT_ENV = "UGSPLAT_OUTPUT_ROOT"
EVAL_MODES = ("deterministic_q_half", "stochastic", "off")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class RunManifest:
    """Snapshot of a run, written once before training starts."""

    config: dict
    config_hash: str
    seed: int
    build: str
    output_dir: str
    layout: dict

    def write(self, path) -> Path:
        path = Path(path)
        if path.exists():
            # a manifest belongs to one run; never rewrite it
            raise InputError(f"run manifest already exists: {path}")
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a mapping of training options")
    return data.get("train", data)


def _make_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_merge(base.to_dict(), overrides))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from None


def _parse_view(spec: str) -> tuple[str, int]:
    split, _, idx = spec.partition(":")
    if split not in ("train", "test") or not idx.isdigit():
        raise InputError(f"view must look like train:0 or test:2, got {spec!r}")
    return split, int(idx)


def _pick_camera(ck: Checkpoint, view: str | None, camera_file: str | None) -> Camera:
    if camera_file:
        path = Path(camera_file)
        if not path.exists():
            raise InputError(f"camera file not found: {path}")
        data = yaml.safe_load(path.read_text())
        try:
            return Camera(**{k: v for k, v in data.items() if k != "image"})
        except TypeError as exc:
            raise InputError(f"{path}: bad camera spec ({exc})") from None
    split, idx = _parse_view(view or "train:0")
    views = ck.scene.views(split)
    if idx >= len(views):
        raise InputError(f"{split} split has {len(views)} views, no index {idx}")
    return views[idx][0]


def _trainer(ck: Checkpoint, config: TrainConfig | None = None) -> Trainer:
    return Trainer(ck.scene, ck.model, config or ck.config, ck.state)


# ---------------------------------------------------------------- commands
def cmd_init(args) -> int:
    scene = load_scene(args.config)
    overrides = _load_config_file(args.train_config) if args.train_config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = _make_config(TrainConfig(), overrides)
    model = UncertaintyModel.create(scene.bounding_box, seed=config.seed)
    out = Path(args.out) if args.out else output_root() / scene.name
    path = save_checkpoint(out / "checkpoint-0.ckpt", scene, TrainingState(), model, config)
    print(path)
    return 0


def cmd_train(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    overrides = _load_config_file(args.config) if args.config else {}
    flags = {"iterations": args.iterations, "seed": args.seed, "threads": args.threads}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    if args.no_uncertainty:
        overrides["use_uncertainty"] = False
    if args.no_dropout:
        overrides["dropout"] = False
    if args.no_modulation:
        overrides["modulation"] = False
    config = _make_config(ck.config, overrides)
    if config.use_uncertainty and ck.model is None:
        raise InputError("checkpoint has no uncertainty model; pass --no-uncertainty")
    out = Path(args.out) if args.out else output_root() / f"{ck.scene.name}-{config.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    RunManifest(config=config.to_dict(), config_hash=config.digest(), seed=config.seed,
                build=_build_id(), output_dir=str(out),
                layout={"metrics": metrics.name, "checkpoints": "checkpoint-<iteration>.ckpt",
                        "final": "final.ckpt"}).write(out / "manifest.json")

    trainer = _trainer(ck, config)
    every = args.checkpoint_every

    def periodic(tr: Trainer, row: dict) -> None:
        if every and row["iteration"] % every == 0:
            save_checkpoint(out / f"checkpoint-{row['iteration']}.ckpt", tr.scene, tr.state,
                            tr.model, tr.config)

    trainer.run(callback=periodic, csv_path=metrics)
    final = save_checkpoint(out / "final.ckpt", trainer.scene, trainer.state, trainer.model,
                            config)
    last = trainer.state.log[-1] if trainer.state.log else {}
    print(json.dumps({"checkpoint": str(final), "metrics": str(metrics),
                      "iteration": trainer.state.iteration,
                      "train_psnr": last.get("train_psnr"), "test_psnr": last.get("test_psnr"),
                      "frozen": trainer.state.frozen}))
    return 0


def cmd_render(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    camera = _pick_camera(ck, args.view, args.camera)
    trainer = _trainer(ck)
    out = trainer.render(camera, args.eval_mode, iteration=ck.state.iteration)
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    ImageBuffer(np.clip(out.image, 0.0, 1.0)).write_png(dest)
    if args.raw:
        np.savez(args.raw, image=out.image, transmittance=out.transmittance)
    print(dest)
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if not ck.scene.views(args.split):
        raise InputError(f"split {args.split!r} has no views")
    report = _trainer(ck).evaluate(args.split, args.eval_mode)
    dest = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(
        f".{args.split}.csv")
    report.write_csv(dest)
    print(json.dumps({"csv": str(dest), "psnr": report.psnr, "ssim": report.ssim}))
    return 0


def cmd_uncertainty_stats(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if ck.model is None:
        raise InputError("checkpoint has no uncertainty model")
    camera = _pick_camera(ck, args.view, None)
    u, _ = ck.model.predict_view(ck.scene.gaussians, camera)
    hist = histogram(u, bins=args.bins, iteration=ck.state.iteration)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "uncertainty_hist.csv")
    grid = np.linspace(0.0, 1.0, args.curve_points)
    half, mean = omega_curve(grid, ck.config.softdrop, mc_samples=args.mc_samples,
                             seed=ck.config.seed)
    with open(out / "omega_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "omega_q_half", "omega_mc_mean"])
        for row in zip(grid, half, mean):
            w.writerow([repr(float(x)) for x in row])
    print(json.dumps(hist.summary()))
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ugsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="ingest a scene config into checkpoint-0")
    s.add_argument("config", help="scene YAML")
    s.add_argument("--train-config", help="YAML of training options stored in the checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="train from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config", help="YAML of training option overrides")
    s.add_argument("--iterations", type=int, help="total iteration count to reach")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--no-uncertainty", action="store_true", help="render with plain opacity")
    s.add_argument("--no-dropout", action="store_true")
    s.add_argument("--no-modulation", action="store_true")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--out", help="run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one view to PNG")
    s.add_argument("checkpoint")
    s.add_argument("--view", help="split:index, e.g. train:0")
    s.add_argument("--camera", help="YAML camera spec instead of a stored view")
    s.add_argument("--eval-mode", choices=EVAL_MODES, default=None)
    s.add_argument("--raw", help="also dump the unclipped float image as .npz")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="per-view PSNR/SSIM CSV")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test", choices=("train", "test"))
    s.add_argument("--eval-mode", choices=EVAL_MODES, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("uncertainty-stats", help="u histogram and omega(u) curve")
    s.add_argument("checkpoint")
    s.add_argument("--view", default="train:0")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--curve-points", type=int, default=101)
    s.add_argument("--mc-samples", type=int, default=100_000)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_uncertainty_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UGSplatError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{exc.code}]: {msg}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        code = "E_IO" if isinstance(exc, OSError) else "E_VALUE"
        print(f"error[{code}]: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
