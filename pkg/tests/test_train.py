import numpy as np
import pytest

from svrc import model as mdl
from svrc import quantizer as qz
from svrc.ppm import PpmImage, write_ppm
from svrc.train import (
    PatchDataset,
    TrainConfig,
    TrainingError,
    interpolate_derivations,
    refine_derivation,
    train_anchor,
)

TINY = dict(M=8, N=4, levels_main=16, levels_hyper=12, init_range=6.0, batch=1, patch=64, learning_rate=1e-3)


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(42)
    yy, xx = np.mgrid[0:64, 0:64] / 63.0
    base = np.stack([xx, yy, 0.5 * (xx + yy)])
    return np.clip(base + rng.normal(0, 0.03, base.shape), 0, 1)


def test_same_seed_gives_identical_weights(image):
    cfg = TrainConfig(lam=0.01, steps=5, seed=3, **TINY)
    a = train_anchor(PatchDataset([image]), cfg)
    b = train_anchor(PatchDataset([image]), cfg)
    assert a.weights_digest() == b.weights_digest()
    assert a.stanh_main == b.stanh_main and a.stanh_hyper == b.stanh_hyper


def test_overfit_single_image(image):
    cfg = TrainConfig(lam=0.01, steps=2000, seed=0, patience=50, epoch_steps=20, **TINY)
    _, history = train_anchor(PatchDataset([image]), cfg, return_history=True)
    losses = history.losses()
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < smooth[100 - 50]
    assert np.all(np.isfinite(losses))


def test_refinement_freezes_weights_and_moves_quantizers(image, tiny_anchor):
    before = tiny_anchor.weights_digest()
    copies = {k: v.copy() for k, v in tiny_anchor.params.items()}
    cfg = TrainConfig(lam=0.002, steps=10, learning_rate=3e-3, **{k: v for k, v in TINY.items() if k != "learning_rate"})
    d = refine_derivation(tiny_anchor, 0.002, PatchDataset([image]), cfg, "D4")
    assert tiny_anchor.weights_digest() == before
    for k, v in copies.items():
        np.testing.assert_array_equal(tiny_anchor.params[k], v)
    assert d.derivation_id == "D4" and d.lam == 0.002 and d.anchor_id == tiny_anchor.anchor_id
    assert d.stanh_main != tiny_anchor.stanh_main
    assert d.num_parameters == 2 * 15 + 2 * 11
    d.stanh_main.check()
    d.stanh_hyper.check()


def test_refinement_can_start_from_other_layers(image, tiny_anchor):
    start = (qz.init_uniform(16, -3, 3), qz.init_uniform(12, -3, 3))
    cfg = TrainConfig(lam=0.002, steps=1, **TINY)
    d = refine_derivation(tiny_anchor, 0.002, PatchDataset([image]), cfg, start=start)
    # one small Adam step from the start layers, not from the anchor's
    assert np.max(np.abs(d.stanh_main.levels - start[0].levels)) < 0.1


def test_non_finite_loss_is_reported(tiny_anchor):
    bad = np.full((3, 64, 64), np.nan)
    with pytest.raises(TrainingError, match="non-finite loss at step 1"):
        train_anchor(PatchDataset([bad]), TrainConfig(steps=3, **TINY))


def test_interpolated_derivation(tiny_anchor, image):
    cfg = TrainConfig(lam=0.002, steps=2, **TINY)
    ds = PatchDataset([image])
    d1 = refine_derivation(tiny_anchor, 0.004, ds, cfg, "D1")
    d2 = refine_derivation(tiny_anchor, 0.001, ds, cfg, "D2")
    mid = interpolate_derivations(d1, d2, 0.5, "D3")
    np.testing.assert_allclose(mid.stanh_main.w, 0.5 * (d1.stanh_main.w + d2.stanh_main.w))
    assert mid.lam == pytest.approx(0.0025)


@pytest.mark.parametrize(
    "bad", [dict(lam=0.0), dict(steps=0), dict(patch=48), dict(levels_main=1), dict(learning_rate=-1.0)]
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_refine_rejects_bad_lambda(tiny_anchor, image):
    with pytest.raises(ValueError):
        refine_derivation(tiny_anchor, 0.0, PatchDataset([image]), TrainConfig(steps=1, **TINY))


def test_patch_dataset(tmp_path, rng):
    for i, (h, w) in enumerate([(64, 80), (100, 70)]):
        write_ppm(PpmImage(w, h, rng.integers(0, 256, (h, w, 3), dtype=np.uint8)), tmp_path / f"{i}.ppm")
    ds = PatchDataset.from_directory(tmp_path)
    batch = ds.sample(4, 64, np.random.default_rng(0))
    assert batch.shape == (4, 3, 64, 64) and batch.min() >= 0 and batch.max() <= 1
    with pytest.raises(FileNotFoundError):
        PatchDataset.from_directory(tmp_path / "missing")
    with pytest.raises(ValueError):
        PatchDataset([])


def test_images_smaller_than_the_patch_are_rejected(rng):
    ds = PatchDataset([rng.random((3, 40, 50))])
    with pytest.raises(ValueError, match="smaller than patch"):
        ds.sample(2, 64, np.random.default_rng(1))


def test_trained_anchor_records_schedule(image):
    model = train_anchor(PatchDataset([image]), TrainConfig(steps=3, seed=9, **TINY))
    assert model.meta["seed"] == 9 and model.meta["steps"] == 3
    assert model.meta["beta_max_main"] >= 1.0
    assert isinstance(model, mdl.AnchorModel)
