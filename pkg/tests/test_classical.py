"""FBP, MLEM, OSEM, reference generation and the sklearn wrappers."""

import warnings

import numpy as np
import pytest
from sklearn.base import clone

from pmdm_pet.classical import (
    FBPReconstructor,
    MLEMReconstructor,
    OSEMReconstructor,
    ReconConfig,
    fbp,
    make_reference,
    mlem,
    osem,
    poisson_loglik,
    ramlak_kernel,
    resolve_subsets,
)
from pmdm_pet.metrics import nrmse
from pmdm_pet.phantom import generate_phantom
from pmdm_pet.projector import SystemModel, add_poisson_noise, forward_project
from pmdm_pet.tensorcore import Rng

SMALL = SystemModel(grid_size=32, n_angles=30, n_bins=48)
# regression anchor: noiseless 64x64 disk, 120 angles
FBP_DISK_NRMSE = 0.07023


def disk(n, radius):
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[:n, :n]
    return (np.hypot(xx - c, yy - c) <= radius).astype(np.float64)


def noisy_disk(seed=0):
    y = forward_project(disk(32, 10), SMALL)
    return add_poisson_noise(y, SMALL, Rng(seed))


class TestRamp:
    def test_kernel_values(self):
        h = ramlak_kernel(4)
        assert h[3] == 0.25
        assert h[2] == pytest.approx(-1 / np.pi**2)
        assert h[1] == 0.0
        assert h[0] == pytest.approx(-1 / (9 * np.pi**2))

    def test_kernel_dc_near_zero(self):
        # the ramp removes the mean; the truncated sum tends to 0 like 1/n
        assert abs(ramlak_kernel(512).sum()) < 1e-3


class TestFBP:
    def test_disk_anchor(self):
        sys = SystemModel(grid_size=64, n_angles=120, n_bins=96)
        d = disk(64, 20)
        err = nrmse(d, fbp(forward_project(d, sys), sys))
        assert err < 0.15
        assert err == pytest.approx(FBP_DISK_NRMSE, abs=1e-4)

    def test_zero(self):
        assert not fbp(np.zeros(SMALL.sino_shape), SMALL).any()

    def test_linear_before_clip(self):
        s = noisy_disk()
        assert np.allclose(fbp(2 * s, SMALL, clip=False), 2 * fbp(s, SMALL, clip=False))

    def test_nonnegative(self):
        assert fbp(noisy_disk(), SMALL).min() >= 0

    def test_needs_two_angles(self):
        sys = SystemModel(grid_size=8, n_angles=1, n_bins=16)
        with pytest.raises(ValueError):
            fbp(np.zeros(sys.sino_shape), sys)


class TestMLEM:
    def test_loglik_monotone(self):
        y = noisy_disk(1)
        values = []
        from pmdm_pet.projector import forward_project as A

        mlem(y, SMALL, 50, callback=lambda it, x: values.append(poisson_loglik(y, A(x, SMALL))))
        assert len(values) == 50
        diffs = np.diff(values)
        assert (diffs >= -1e-9 * np.abs(values[1:])).all()

    def test_noiseless_monotone(self):
        y = forward_project(disk(32, 10), SMALL)
        values = []
        mlem(y, SMALL, 30, callback=lambda it, x: values.append(poisson_loglik(y, forward_project(x, SMALL))))
        assert (np.diff(values) >= -1e-9 * np.abs(values[1:])).all()

    def test_nonnegative_every_iteration(self):
        mins = []
        mlem(noisy_disk(2), SMALL, 20, callback=lambda it, x: mins.append(x.min()))
        assert min(mins) >= 0

    def test_zero_counts_decay(self):
        x = mlem(np.zeros(SMALL.sino_shape), SMALL, 5)
        assert x.max() < 1e-6

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            mlem(-np.ones(SMALL.sino_shape), SMALL, 1)


class TestOSEM:
    def test_one_subset_is_mlem_bitwise(self):
        y = noisy_disk(3)
        assert np.array_equal(osem(y, SMALL, 7, subsets=1), mlem(y, SMALL, 7))

    def test_matches_long_mlem(self):
        sys = SystemModel()
        d = disk(64, 20)
        y = forward_project(d, sys)
        a = nrmse(d, osem(y, sys, 10, 6))
        b = nrmse(d, mlem(y, sys, 60))
        assert abs(a - b) <= 0.1 * b

    def test_subsets_must_divide(self):
        with pytest.raises(ValueError):
            osem(noisy_disk(), SMALL, 1, subsets=7)

    def test_resolve_subsets(self):
        assert resolve_subsets(30, 5) == 5
        with pytest.warns(UserWarning, match="using 6"):
            assert resolve_subsets(30, 14) == 6
        with pytest.warns(UserWarning):
            assert resolve_subsets(7, 14) == 1
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert resolve_subsets(28, 14) == 14


class TestMakeReference:
    def test_deterministic_and_kinds(self):
        ph = generate_phantom(0, 32)
        a = make_reference(ph, SMALL, Rng(4), ReconConfig(subsets=6))
        b = make_reference(ph, SMALL, Rng(4), ReconConfig(subsets=6))
        for u, v in zip(a, b):
            assert np.array_equal(u, v)
        train, high, ref = a
        assert np.array_equal(train, np.round(train)) and train.shape == SMALL.sino_shape
        assert ref.shape == SMALL.image_shape and ref.min() >= 0
        assert high.sum() == pytest.approx(50 * SMALL.total_counts, rel=0.01)

    @pytest.mark.parametrize("seed", range(3))
    def test_reference_beats_training_fbp(self, seed):
        ph = generate_phantom(seed, 32)
        train, _, ref = make_reference(ph, SMALL, Rng(seed), ReconConfig(subsets=6))
        scale = forward_project(ph, SMALL).sum() / SMALL.total_counts
        assert nrmse(ph, ref) < nrmse(ph, fbp(train, SMALL) * scale)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ReconConfig(method="art")
        with pytest.raises(ValueError):
            ReconConfig(epsilon=0)


class TestWrappers:
    def test_clone_and_params(self):
        est = OSEMReconstructor(SMALL, iterations=3, subsets=5)
        assert clone(est).get_params()["subsets"] == 5

    def test_transform_stack(self):
        X = np.stack([noisy_disk(s) for s in range(3)])
        for est in (FBPReconstructor(SMALL), MLEMReconstructor(SMALL, 3), OSEMReconstructor(SMALL, 2, 5)):
            out = est.fit(X).transform(X)
            assert out.shape == (3, 32, 32) and out.dtype == np.float32 and out.min() >= 0

    def test_rejects_wrong_shape_and_nan(self):
        est = FBPReconstructor(SMALL)
        with pytest.raises(ValueError):
            est.fit(np.zeros((2, 30, 48)))
        bad = np.zeros((1,) + SMALL.sino_shape)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            est.fit(bad)

    def test_scale(self):
        X = noisy_disk()[None]
        a = FBPReconstructor(SMALL).fit_transform(X)
        b = FBPReconstructor(SMALL, scale=2.0).fit_transform(X)
        assert np.allclose(b, 2 * a)
