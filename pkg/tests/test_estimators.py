"""Scikit-learn front ends for the estimator and the diffusion stage."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pmdm_pet.estimators import PMDMReconstructor, PosteriorMeanEstimator, to_network_input
from pmdm_pet.phantom import generate_phantom
from pmdm_pet.projector import SystemModel, add_poisson_noise, forward_project
from pmdm_pet.tensorcore import Rng

SYS = SystemModel(grid_size=16, n_angles=8, n_bins=24, total_counts=5e3)


@pytest.fixture(scope="module")
def data():
    images = np.stack([generate_phantom(s, 16) for s in range(12)]).astype(np.float64)
    sinos = np.stack([add_poisson_noise(forward_project(im, SYS), SYS, Rng(s)) for s, im in enumerate(images)])
    return sinos, images


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    est = PosteriorMeanEstimator(grid_size=16, base_width=4, epochs=4, lr=1e-3, random_state=0)
    return est.fit(X[:10], y[:10], X[10:], y[10:])


def reconstructor(est, **kw):
    args = dict(T=10, base_width=8, levels=2, groups=4, epochs=2, lr=1e-3, random_state=1)
    args.update(kw)
    return PMDMReconstructor(est, **args)


class TestNetworkInput:
    def test_crop_pad_normalize(self):
        X = np.ones((2, 24, 8))
        out = to_network_input(X, 16)
        assert out.shape == (2, 1, 16, 16) and out.dtype == np.float32
        # central 16 bins kept, angles padded with 4 zero columns on each side
        assert out[0, 0, :, 4:12].min() == 1.0 and not out[0, 0, :, :4].any()

    def test_count_budget_invariance(self):
        X = np.random.default_rng(0).random((1, 24, 8))
        np.testing.assert_allclose(to_network_input(7 * X, 16), to_network_input(X, 16), rtol=1e-6)

    def test_too_many_angles(self):
        with pytest.raises(ValueError):
            to_network_input(np.ones((1, 24, 20)), 16)

    def test_zero_sinogram(self):
        assert not to_network_input(np.zeros((1, 24, 8)), 16).any()


class TestPosteriorMeanEstimator:
    def test_defaults(self):
        p = PosteriorMeanEstimator().get_params()
        assert p["lr"] == 1e-4 and p["weight_decay"] == 1e-5 and p["batch_size"] == 4

    def test_clone(self):
        est = PosteriorMeanEstimator(grid_size=16, epochs=3)
        assert clone(est).get_params() == est.get_params()

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            PosteriorMeanEstimator(grid_size=16).predict(data[0])

    def test_val_improves(self, fitted):
        assert fitted.best_val_mse_ < fitted.initial_val_mse_
        assert len(fitted.history_["train_mse"]) == 4
        assert fitted.best_val_mse_ == min(fitted.history_["val_mse"])

    def test_predict_shape_and_score(self, fitted, data):
        X, y = data
        pred = fitted.predict(X[10:])
        assert pred.shape == (2, 16, 16) and pred.min() >= 0
        assert fitted.score(X[10:], y[10:]) == pytest.approx(-fitted.best_val_mse_, rel=1e-6)

    def test_save_load_identical(self, fitted, data, tmp_path):
        fitted.save(tmp_path / "e.pmdm")
        back = PosteriorMeanEstimator.load(tmp_path / "e.pmdm")
        assert back.get_params() == fitted.get_params()
        assert np.array_equal(back.predict(data[0]), fitted.predict(data[0]))
        assert back.history_ == fitted.history_

    def test_deterministic(self, data):
        X, y = data
        a = PosteriorMeanEstimator(grid_size=16, base_width=4, epochs=2).fit(X, y)
        b = PosteriorMeanEstimator(grid_size=16, base_width=4, epochs=2).fit(X, y)
        assert a.network_.fingerprint() == b.network_.fingerprint()

    def test_rejects_bad_input(self, data):
        X, y = data
        with pytest.raises(ValueError):
            PosteriorMeanEstimator(grid_size=16).fit(X, y[:5])
        with pytest.raises(ValueError):
            PosteriorMeanEstimator(grid_size=16).fit(-X, y)
        with pytest.raises(ValueError):
            PosteriorMeanEstimator(grid_size=32).fit(X, y)


class TestPMDMReconstructor:
    def test_defaults(self):
        p = PMDMReconstructor().get_params()
        assert p["lr"] == 3e-5 and p["condition"] == "posterior_mean" and p["sigma_mode"] == "beta"

    def test_needs_estimator(self, data):
        with pytest.raises(ValueError):
            reconstructor(None).fit(*data)

    def test_fit_sample_shapes(self, fitted, data):
        X, y = data
        rec = reconstructor(fitted).fit(X, y)
        out = rec.sample(X[:2], n_samples=3, seed=5)
        assert out.shape == (2, 3, 16, 16) and out.min() >= 0
        # distinct posterior draws per slice
        assert np.mean((out[:, 0] - out[:, 1]) ** 2) > 0
        assert np.array_equal(out, rec.sample(X[:2], n_samples=3, seed=5))
        assert rec.predict(X[:2]).shape == (2, 16, 16)
        assert rec.tag == "pmdm"

    def test_conditions_scaled(self, fitted, data):
        X, y = data
        rec = reconstructor(fitted).fit(X, y)
        c = rec.conditions(X)
        np.testing.assert_allclose(c[:, 0], 2 * fitted.predict(X) / y.max() - 1, rtol=1e-5, atol=1e-6)
        abl = reconstructor(None, condition="sinogram").fit(X, y)
        s = abl.conditions(X)
        assert abl.tag == "palette-ablation"
        assert s.min() >= -1 and s.max() == pytest.approx(1.0)

    @pytest.mark.parametrize("schedule", ["constant", "cosine"])
    def test_resume_bitwise(self, fitted, data, tmp_path, monkeypatch, schedule):
        X, y = data
        full = reconstructor(fitted, epochs=3, lr_schedule=schedule).fit(X, y)
        ck = tmp_path / "d.pmdm"
        save = PMDMReconstructor._save_state

        def interrupt_after_two(self, path, state):
            save(self, path, state)
            if state.epoch == 2:
                raise KeyboardInterrupt

        with monkeypatch.context() as m:
            m.setattr(PMDMReconstructor, "_save_state", interrupt_after_two)
            with pytest.raises(KeyboardInterrupt):
                reconstructor(fitted, epochs=3, lr_schedule=schedule).fit(X, y, checkpoint=ck)
        resumed = reconstructor(fitted, epochs=3, lr_schedule=schedule).fit(X, y, checkpoint=ck, resume=True)
        assert resumed.network_.fingerprint() == full.network_.fingerprint()
        assert resumed.history_ == full.history_

    def test_save_load_and_hash_refusal(self, fitted, data, tmp_path):
        X, y = data
        rec = reconstructor(fitted).fit(X, y)
        rec.save(tmp_path / "d.pmdm")
        back = PMDMReconstructor.load(tmp_path / "d.pmdm", estimator=fitted)
        assert np.array_equal(back.sample(X[:1], seed=2), rec.sample(X[:1], seed=2))
        with pytest.raises(ValueError, match="schedule hash"):
            PMDMReconstructor.load(tmp_path / "d.pmdm", estimator=fitted, T=20)
        with pytest.raises(ValueError, match="schedule hash"):
            reconstructor(fitted, sigma_mode="posterior").fit(X, y, checkpoint=tmp_path / "d.pmdm", resume=True)

    def test_grid_mismatch(self, fitted):
        X = np.ones((2, 48, 8))
        y = np.ones((2, 32, 32))
        with pytest.raises(ValueError, match="grid"):
            reconstructor(fitted).fit(X, y)
