"""Regenerate the in-repo fixture scenes under fixtures/."""

from pathlib import Path

from ugsplat.synthetic import make_scene, write_fixture

ROOT = Path(__file__).resolve().parent.parent / "fixtures"

FIXTURES = {
    "tiny": dict(n_gaussians=3, n_train=2, n_test=1, seed=0, scale_range=(0.3, 0.5)),
    "toy": dict(n_gaussians=20, n_train=8, n_test=0, seed=0, scale_range=(0.3, 0.5)),
    "sparse": dict(n_gaussians=20, n_train=5, n_test=3, seed=0, position_noise=0.08,
                   keep_fraction=0.6, spurious=6, colour_noise=0.1, scale_range=(0.3, 0.5)),
}

if __name__ == "__main__":
    for name, kwargs in FIXTURES.items():
        scene, _ = make_scene(**kwargs)
        print(write_fixture(ROOT / name, scene, name=name))
