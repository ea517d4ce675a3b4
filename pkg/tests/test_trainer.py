import numpy as np
import pytest

from ugsplat.errors import EmptySceneError
from ugsplat.experiments import TOY_SCENE
from ugsplat.model import UncertaintyModel
from ugsplat.optim import Adam
from ugsplat.rasterizer import render_view
from ugsplat.scene import GaussianSet, ImageBuffer, Scene, logit
from ugsplat.synthetic import make_scene, ring_cameras, render_targets
from ugsplat.trainer import (
    LearningRates,
    TrainConfig,
    Trainer,
    TrainingState,
    check_freeze,
    prune,
    write_metric_log,
)

QUIET = dict(eval_interval=0, prune_interval=0, freeze_check_interval=0)
ZERO_LR = LearningRates(0, 0, 0, 0, 0, 0, 0, 0)


def toy_trainer(seed=0, uncertainty=True, n_train=4, size=24, **cfg):
    kwargs = dict(TOY_SCENE, n_gaussians=8, n_train=n_train, size=size)
    scene, _ = make_scene(seed=seed, **kwargs)
    model = UncertaintyModel.create(scene.bounding_box, seed=seed, table_size=2 ** 10)
    config = TrainConfig(seed=seed, use_uncertainty=uncertainty, **cfg)
    return Trainer(scene, model if uncertainty else None, config)


def snapshot(trainer):
    out = {k: v.copy() for k, v in trainer.scene.gaussians.arrays().items()}
    if trainer.model is not None:
        out.update({k: v.copy() for k, v in trainer.model.parameters().items()})
    return out


# ---------------------------------------------------------------- config
def test_config_guards():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(freeze_epsilon=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=LearningRates(rotation=-1.0))


def test_config_dict_round_trip():
    cfg = TrainConfig(iterations=77, lr={"mlp": 0.5}, softdrop={"temperature": 0.3})
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.replace(seed=1).digest() != cfg.digest()


def test_position_lr_decays_log_linearly():
    tr = toy_trainer(iterations=100, position_lr_scale=1.0, **QUIET)
    assert tr.position_lr(0) == pytest.approx(1.6e-4)
    assert tr.position_lr(100) == pytest.approx(1.6e-6)
    assert tr.position_lr(50) == pytest.approx(1.6e-5)


# ------------------------------------------------------------------ steps
def test_zero_learning_rates_leave_parameters(rng):
    tr = toy_trainer(lr=ZERO_LR, iterations=5, **QUIET)
    before = snapshot(tr)
    tr.run()
    after = snapshot(tr)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k], err_msg=k)


def test_own_render_is_a_fixed_point():
    cams = ring_cameras(3, size=20)
    gs = GaussianSet(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), -1.0),
                     logit(np.array([0.7])), np.array([[[0.6, 0.3, 0.9]]]))
    views = [(c, ImageBuffer(render_view(gs, c).image)) for c in cams]
    scene = Scene(gs.copy(), views)
    tr = Trainer(scene, None, TrainConfig(iterations=100, use_uncertainty=False, **QUIET))
    tr.run()
    assert max(r["loss"] for r in tr.state.log) < 1e-12
    for k, v in gs.arrays().items():
        assert np.abs(scene.gaussians.arrays()[k] - v).max() < 1e-6


def test_colour_only_loss_non_increasing():
    scene, _ = make_scene(n_gaussians=5, n_train=1, size=24, seed=3, colour_noise=0.2,
                          position_noise=0.0, scale_range=(0.3, 0.5))
    lr = LearningRates(0, 0, 0, 0, 0, colour=2.5e-3, mlp=0, hash=0)
    tr = Trainer(scene, None, TrainConfig(iterations=200, use_uncertainty=False, lr=lr,
                                          **QUIET))
    tr.run()
    losses = np.array([r["loss"] for r in tr.state.log])
    assert np.sum(np.diff(losses) > 0) <= 2
    assert losses[-1] < losses[0]


def test_no_opacity_reset():
    # with a zero opacity rate the logits can only change by pruning rows away
    lr = LearningRates(opacity=0.0)
    tr = toy_trainer(lr=lr, iterations=60, prune_interval=20, eval_interval=0,
                     freeze_check_interval=20)
    before = tr.scene.gaussians.opacity_logits.copy()
    tr.run()
    after = tr.scene.gaussians.opacity_logits
    assert len(after) == len(before)
    np.testing.assert_array_equal(before, after)


def test_quaternions_stay_unit():
    tr = toy_trainer(iterations=30, **QUIET)
    tr.run()
    np.testing.assert_allclose(np.linalg.norm(tr.scene.gaussians.rotations, axis=1), 1.0,
                               atol=1e-12)


def test_deterministic_logs(tmp_path):
    paths = []
    for k in range(2):
        tr = toy_trainer(seed=5, iterations=30, eval_interval=10, prune_interval=0,
                         freeze_check_interval=0)
        tr.run(csv_path=tmp_path / f"log{k}.csv")
        paths.append(tmp_path / f"log{k}.csv")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "iteration,loss,l1,dssim,train_psnr,test_psnr,n_gaussians,frozen"
    assert len(lines) == 31


def test_seed_changes_view_sequence():
    a = toy_trainer(seed=1, iterations=20, **QUIET)
    b = toy_trainer(seed=1, iterations=20, **QUIET)
    b.config = b.config.replace(seed=2)
    a.run()
    b.run()
    assert [r["loss"] for r in a.state.log] != [r["loss"] for r in b.state.log]


def test_metric_log_blank_cells(tmp_path):
    write_metric_log([{"iteration": 1, "loss": 0.5, "train_psnr": None}], tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().splitlines()[1] == "1,0.5,,,,,,"


# ----------------------------------------------------------------- freeze
def _freeze_trace(values, eps=0.2):
    st = TrainingState()
    cfg = TrainConfig(freeze_epsilon=eps)
    frozen = []
    for v in values:
        check_freeze(st, v, cfg)
        frozen.append(st.frozen)
    return frozen


def test_freeze_never_on_steady_gain():
    assert not any(_freeze_trace([20.0, 21.0, 22.0, 23.0, 24.0]))


def test_freeze_trace_third_check():
    assert _freeze_trace([20.0, 20.5, 20.6]) == [False, False, True]


def test_freeze_is_one_way():
    assert _freeze_trace([20.0, 20.1, 25.0, 30.0]) == [False, True, True, True]


def test_freeze_holds_model_constant():
    tr = toy_trainer(iterations=60, freeze_epsilon=100.0, freeze_check_interval=20,
                     eval_interval=0, prune_interval=0)
    snaps = {}
    tr.run(callback=lambda t, row: snaps.__setitem__(row["iteration"], {
        k: v.copy() for k, v in t.model.parameters().items()}))
    assert tr.state.frozen and tr.state.freeze_iteration == 20
    assert any(np.any(snaps[20][k] != snaps[1][k]) for k in snaps[1])
    for it in range(21, 61):
        for k, v in snaps[20].items():
            np.testing.assert_array_equal(snaps[it][k], v)


def test_ablation_never_checks_freeze():
    tr = toy_trainer(uncertainty=False, iterations=40, freeze_epsilon=100.0,
                     freeze_check_interval=20, eval_interval=0, prune_interval=0)
    tr.run()
    assert not tr.state.frozen and tr.state.best_psnr is None


# ------------------------------------------------------------------ prune
def _prune_scene(opacities):
    n = len(opacities)
    rng = np.random.default_rng(0)
    gs = GaussianSet(rng.normal(size=(n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                     np.zeros((n, 3)), logit(np.asarray(opacities, float)),
                     rng.uniform(size=(n, 1, 3)))
    cam = ring_cameras(1, size=8)[0]
    return Scene(gs, [(cam, ImageBuffer(np.zeros((8, 8, 3))))])


def test_prune_keeps_opaque():
    scene = _prune_scene([0.9, 0.9, 0.9])
    rep = prune(scene, 0.005)
    assert rep.removed == [] and scene.gaussians.count == 3


def test_prune_drops_row_and_moments():
    scene = _prune_scene([0.9, 0.001, 0.5, 0.7])
    opt = Adam()
    gs = scene.gaussians
    for name, arr in gs.arrays().items():
        opt.step(name, arr.copy(), np.arange(arr.size, dtype=float).reshape(arr.shape), 0.1)
    m_before = opt.m["positions"].copy()
    rep = prune(scene, 0.005, opt)
    assert rep.removed == [1] and rep.remaining == 3
    for name, arr in scene.gaussians.arrays().items():
        assert opt.m[name].shape == arr.shape and opt.v[name].shape == arr.shape
    np.testing.assert_array_equal(opt.m["positions"], m_before[[0, 2, 3]])


def test_prune_everything_is_an_error():
    with pytest.raises(EmptySceneError):
        prune(_prune_scene([0.9, 0.5]), 1.0)


def test_prune_threshold_domain():
    with pytest.raises(ValueError):
        prune(_prune_scene([0.5]), 0.0)


def test_prune_stops_in_last_fifth():
    tr = toy_trainer(iterations=50, prune_interval=10, prune_threshold=0.999,
                     eval_interval=0, freeze_check_interval=0)
    tr.scene.gaussians.opacity_logits[:] = logit(0.9999)
    tr.scene.gaussians.opacity_logits[0] = logit(0.5)
    tr.run()
    # iterations 10..40 may prune, 50 may not
    assert all(p["iteration"] <= 40 for p in tr.state.prune_log)


# ----------------------------------------------------- uncertainty direction
def two_gaussian_scene(seed):
    """One Gaussian that explains every view and one spurious Gaussian."""
    rng = np.random.default_rng(seed)
    gt = GaussianSet(rng.normal(0, 0.05, (1, 3)), np.array([[1.0, 0, 0, 0]]),
                     np.full((1, 3), np.log(0.4)), logit(np.array([0.9])),
                     np.array([[[0.9, 0.3, 0.2]]]))
    cams = ring_cameras(6, size=24, phase=rng.uniform(0, 2 * np.pi))
    images = render_targets(gt, cams)
    spurious = rng.uniform(-0.6, 0.6, 3)
    spurious[1] = rng.uniform(0.4, 0.6)
    init = GaussianSet(np.stack([gt.positions[0], spurious]), np.tile([1.0, 0, 0, 0], (2, 1)),
                       np.full((2, 3), np.log(0.3)), logit(np.array([0.5, 0.5])),
                       np.array([[[0.9, 0.3, 0.2]], [[0.2, 0.8, 0.6]]]))
    return Scene(init, list(zip(cams, images)), bounding_box=[[-1] * 3, [1] * 3])


@pytest.mark.slow
def test_spurious_gaussian_learns_higher_uncertainty():
    means = []
    for seed in range(5):
        scene = two_gaussian_scene(seed)
        model = UncertaintyModel.create(scene.bounding_box, seed=seed, table_size=2 ** 10)
        tr = Trainer(scene, model, TrainConfig(iterations=500, seed=seed, **QUIET))
        tr.run()
        total, count = np.zeros(2), np.zeros(2)
        for cam, _ in scene.train_views:
            u, idx = model.predict_view(scene.gaussians, cam)
            np.add.at(total, idx, u)
            np.add.at(count, idx, 1)
        means.append(total / count)
    matching, spurious = np.mean(means, axis=0)
    assert spurious > matching
