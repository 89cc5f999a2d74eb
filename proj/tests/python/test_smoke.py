import math

import numpy as np
import pytest

import deeppbm


def small_scene(frames=12):
    return deeppbm.synthetic_scene(frames=frames, height=16, width=16, object=(4, 4), start=(4, 6))


def test_kl_closed_form():
    assert deeppbm.kl_divergence([0.0], [0.0]) == 0.0
    assert deeppbm.kl_divergence([1.0], [0.0]) == 0.5
    assert deeppbm.kl_divergence([0.0], [1.0]) == pytest.approx((math.e - 2) / 2)
    with pytest.raises(deeppbm.ShapeError):
        deeppbm.kl_divergence([0.0, 1.0], [0.0])


def test_synthetic_scene_shapes_and_determinism():
    frames, masks = deeppbm.synthetic_scene(frames=10)
    assert frames.shape == (10, 1, 64, 64)
    assert frames.dtype == np.float32
    assert masks.shape == (10, 64, 64)
    assert (masks.sum(axis=(1, 2)) == 64).all()
    again, _ = deeppbm.synthetic_scene(frames=10)
    assert np.array_equal(frames, again)


def test_train_subtract_and_checkpoint(tmp_path):
    frames, truth = small_scene()
    model, history = deeppbm.train(frames, latent_dim=2, epochs=2, batch_size=4, base_channels=4, seed=3)
    assert len(history) == 2
    assert model.latent_dim == 2
    assert model.input_shape == [1, 16, 16]

    mu, log_var = model.encode(frames)
    assert mu.shape == (12, 2) and log_var.shape == (12, 2)
    assert model.decode(mu).shape == (12, 1, 16, 16)

    masks, backgrounds = deeppbm.subtract(model, frames)
    assert masks.shape == (12, 16, 16)
    assert np.array_equal(backgrounds, deeppbm.estimate_background(model, frames))
    scores = deeppbm.evaluate(masks, truth)
    assert 0.0 <= scores["f_measure"] <= 1.0

    path = tmp_path / "m.dpbm"
    model.save(path)
    loaded = deeppbm.load_model(path)
    assert np.array_equal(deeppbm.estimate_background(loaded, frames), backgrounds)

    prior = deeppbm.generate(model, seed=1)
    assert prior.shape == (1, 1, 16, 16)
    zero = deeppbm.generate(model, seed=5, frame=frames[:1], scale=0.0)
    assert np.array_equal(zero, deeppbm.estimate_background(model, frames[:1]))


def test_extract_mask():
    bg = np.full((1, 1, 8, 8), 0.3, dtype=np.float32)
    frame = bg.copy()
    frame[0, 0, 1, 2] = 0.8
    mask = deeppbm.extract_mask(frame, bg)
    assert mask.sum() == 1 and mask[0, 1, 2] == 1
    with pytest.raises(deeppbm.ConfigError):
        deeppbm.extract_mask(frame, bg, threshold=0.0)


def test_rpca_recovers_planted_matrix():
    rng = np.random.default_rng(0)
    low = np.outer(rng.normal(size=60), rng.normal(size=30))
    sparse = np.zeros_like(low)
    idx = rng.choice(low.size, 18, replace=False)
    sparse.flat[idx] = 10 * np.abs(low).mean()
    r = deeppbm.rpca(low + sparse)
    assert r["converged"]
    assert r["lambda"] == pytest.approx(1 / math.sqrt(60))
    assert np.linalg.norm(r["low_rank"] - low) / np.linalg.norm(low) < 1e-4


def test_rpca_subtract_on_scene():
    frames, truth = deeppbm.synthetic_scene(frames=30)
    masks, backgrounds, converged = deeppbm.rpca_subtract(frames)
    assert converged
    assert backgrounds.shape == frames.shape
    assert deeppbm.evaluate(masks, truth)["f_measure"] >= 0.8


def test_errors_map_to_exceptions(tmp_path):
    with pytest.raises(deeppbm.IoError):
        deeppbm.load_model(tmp_path / "missing.dpbm")
    with pytest.raises(deeppbm.ConfigError):
        deeppbm.train(small_scene()[0], epochs=0)
    assert issubclass(deeppbm.ShapeError, deeppbm.Error)
