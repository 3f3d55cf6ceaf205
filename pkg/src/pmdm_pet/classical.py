"""FBP, MLEM and OSEM baselines, and the high-count reference generator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_sinograms
from .projector import SystemModel, add_poisson_noise, back_project, forward_project, system_matrix


@dataclass
class ReconConfig:
    method: str = "osem"
    iterations: int = 10
    subsets: int = 6
    init: float = 1.0
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.method not in ("fbp", "mlem", "osem"):
            raise ValueError(f"unknown reconstruction method {self.method!r}")
        if self.iterations < 1 or self.subsets < 1:
            raise ValueError("iterations and subsets must be >= 1")
        if self.epsilon <= 0 or self.init <= 0:
            raise ValueError("epsilon and init must be > 0")


def ramlak_kernel(n_bins: int) -> np.ndarray:
    """Spatial-domain Ram-Lak kernel on unit bin spacing, length ``2*n_bins-1``."""
    k = np.arange(-(n_bins - 1), n_bins)
    h = np.zeros(k.shape)
    h[k == 0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return h


def ramp_filter(sino: np.ndarray) -> np.ndarray:
    h = ramlak_kernel(sino.shape[0])
    return fftconvolve(sino, h[:, None], mode="same", axes=0)


def fbp(sino: np.ndarray, sys: SystemModel, clip: bool = True) -> np.ndarray:
    """Filtered back-projection with a pure ramp filter."""
    sino = np.asarray(sino, dtype=np.float64)
    if sys.n_angles < 2:
        raise ValueError("FBP needs at least two angles")
    img = back_project(ramp_filter(sino), sys) * (np.pi / sys.n_angles)
    return np.maximum(img, 0.0) if clip else img


def poisson_loglik(counts: np.ndarray, expected: np.ndarray, eps: float = 0.0) -> float:
    """Poisson log-likelihood up to the ``log(y!)`` constant."""
    expected = np.asarray(expected, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    mask = counts > 0
    return float(np.sum(counts[mask] * np.log(expected[mask] + eps)) - np.sum(expected))


class _SubsetOperators:
    """Row blocks of the system matrix, one per angle-interleaved subset."""

    def __init__(self, sys: SystemModel, subsets: int):
        if sys.n_angles % subsets:
            raise ValueError(f"{subsets} subsets do not divide {sys.n_angles} angles")
        a = system_matrix(sys)
        self.sys = sys
        if subsets == 1:
            self.rows = [np.arange(a.shape[0])]
            self.blocks = [a]
        else:
            angle_of_row = np.arange(a.shape[0]) % sys.n_angles
            self.rows = [np.flatnonzero(angle_of_row % subsets == k) for k in range(subsets)]
            self.blocks = [a[r] for r in self.rows]
        self.blocks_t = [b.T.tocsr() for b in self.blocks]
        self.sens = [np.asarray(bt @ np.ones(bt.shape[1])) for bt in self.blocks_t]


def osem(
    sino: np.ndarray,
    sys: SystemModel,
    iterations: int = 10,
    subsets: int = 6,
    init: float = 1.0,
    callback=None,
    eps_rel: float = 1e-9,
) -> np.ndarray:
    """Ordered-subsets EM; one iteration is a full pass over all subsets.

    Subset ``k`` holds angles ``k, k+subsets, ...``. Pixels with zero
    sensitivity in a subset are left untouched by that subset's update and
    held at zero overall. Denominators get ``eps_rel * max(Ax)`` added.
    ``callback(it, x)`` is called after each iteration.
    """
    y = np.asarray(sino, dtype=np.float64)
    if y.shape != sys.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {sys.sino_shape}")
    if (y < 0).any():
        raise ValueError("counts must be nonnegative")
    if init <= 0:
        raise ValueError("init must be > 0")
    ops = _SubsetOperators(sys, subsets)
    yv = y.ravel()
    total_sens = np.asarray(system_matrix(sys).T @ np.ones(yv.size))
    alive = total_sens > 0
    x = np.where(alive, float(init), 0.0)
    for it in range(iterations):
        for rows, blk, blk_t, sens in zip(ops.rows, ops.blocks, ops.blocks_t, ops.sens):
            proj = blk @ x
            eps = eps_rel * max(float(proj.max()), 1e-30)
            ratio = yv[rows] / (proj + eps)
            upd = blk_t @ ratio
            ok = sens > 0
            x[ok] = x[ok] * upd[ok] / sens[ok]
        if callback is not None:
            callback(it, x.reshape(sys.image_shape))
    return x.reshape(sys.image_shape)


def mlem(sino: np.ndarray, sys: SystemModel, iterations: int = 50, init: float = 1.0, callback=None) -> np.ndarray:
    """MLEM: the single-subset case of :func:`osem`."""
    return osem(sino, sys, iterations=iterations, subsets=1, init=init, callback=callback)


def resolve_subsets(n_angles: int, requested: int, fallback: int = 6) -> int:
    """``requested`` if it divides ``n_angles``; otherwise warn and use the
    largest divisor of ``n_angles`` not above ``fallback``."""
    if requested >= 1 and n_angles % requested == 0:
        return requested
    best = max(d for d in range(1, max(fallback, 1) + 1) if n_angles % d == 0)
    warnings.warn(f"{requested} subsets do not divide {n_angles} angles; using {best}", stacklevel=2)
    return best


def make_reference(
    phantom: np.ndarray,
    sys: SystemModel,
    rng,
    recon: ReconConfig | None = None,
    reference_factor: float = 50.0,
    calibration: float | None = None,
):
    """Simulate one slice: ``(training_counts, high_count_counts, reference)``.

    Both count sinograms are drawn from the same expected sinogram, the
    high-count one at ``reference_factor`` times the training budget. The
    reference is OSEM on the high-count data, converted to activity units
    with ``calibration`` (expected-sinogram sum per training-budget count);
    ``None`` uses this slice's exact factor.
    """
    recon = recon or ReconConfig()
    expected = forward_project(phantom, sys)
    high = add_poisson_noise(expected, sys, rng.spawn("high-count"), total_counts=sys.total_counts * reference_factor)
    train = add_poisson_noise(expected, sys, rng.spawn("training"))
    if recon.method == "fbp":
        ref = fbp(high, sys)
    else:
        subsets = 1 if recon.method == "mlem" else resolve_subsets(sys.n_angles, recon.subsets)
        ref = osem(high, sys, recon.iterations, subsets, recon.init, eps_rel=recon.epsilon)
    if calibration is None:
        calibration = expected.sum() / sys.total_counts
    return train, high, ref * (calibration / reference_factor)


# ---------------------------------------------------------------------------
# estimator wrappers
# ---------------------------------------------------------------------------


class _ClassicalReconstructor(TransformerMixin, BaseEstimator):
    def _sys(self) -> SystemModel:
        return self.system if self.system is not None else SystemModel()

    def fit(self, X, y=None):
        sys = self._sys()
        check_sinograms(X, sys.sino_shape)
        self.system_ = sys
        return self

    def transform(self, X):
        sys = getattr(self, "system_", None) or self._sys()
        X = check_sinograms(X, sys.sino_shape)
        return np.stack([self._reconstruct(s, sys) for s in X]).astype(np.float32)

    def predict(self, X):
        return self.transform(X)


class FBPReconstructor(_ClassicalReconstructor):
    """Ramp-filtered back-projection, one slice per sample."""

    def __init__(self, system: SystemModel | None = None, scale: float = 1.0):
        self.system = system
        self.scale = scale

    def _reconstruct(self, s, sys):
        return fbp(s, sys) * self.scale


class MLEMReconstructor(_ClassicalReconstructor):
    def __init__(self, system: SystemModel | None = None, iterations: int = 50, scale: float = 1.0):
        self.system = system
        self.iterations = iterations
        self.scale = scale

    def _reconstruct(self, s, sys):
        return mlem(s, sys, self.iterations) * self.scale


class OSEMReconstructor(_ClassicalReconstructor):
    def __init__(self, system: SystemModel | None = None, iterations: int = 10, subsets: int = 6, scale: float = 1.0):
        self.system = system
        self.iterations = iterations
        self.subsets = subsets
        self.scale = scale

    def _reconstruct(self, s, sys):
        return osem(s, sys, self.iterations, resolve_subsets(sys.n_angles, self.subsets)) * self.scale
