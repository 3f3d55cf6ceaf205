"""DDPM machinery conditioned on a posterior-mean (or other) image.

Timesteps are 1-based throughout: ``t`` in ``[1, T]`` indexes arrays at
``t - 1``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Adam, Rng

logger = logging.getLogger(__name__)

SIGMA_MODES = ("beta", "posterior")
CONDITIONS = ("posterior_mean", "sinogram")


@dataclass
class DiffusionConfig:
    """Schedule and conditioning settings.

    ``beta_min``/``beta_max`` default to ``1e-4``/``0.02`` rescaled by
    ``1000 / T`` so that short chains still end near pure noise.
    """

    T: int = 1000
    beta_min: float | None = None
    beta_max: float | None = None
    schedule: str = "linear"
    sigma_mode: str = "beta"
    condition: str = "posterior_mean"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        scale = 1000.0 / self.T
        if self.beta_min is None:
            self.beta_min = min(1e-4 * scale, 0.5)
        if self.beta_max is None:
            self.beta_max = min(0.02 * scale, 0.999)
        if self.schedule != "linear":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if not 0 < self.beta_min < 1 or not 0 < self.beta_max < 1:
            raise ValueError("betas must lie in (0, 1)")
        if self.T > 1 and not self.beta_min < self.beta_max:
            raise ValueError("beta_min must be < beta_max")


@dataclass
class NoiseSchedule:
    beta: np.ndarray
    sigma_mode: str = "beta"
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    alpha_bar_prev: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        if self.sigma_mode == "beta":
            var = self.beta.copy()
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                var = np.where(
                    self.alpha_bar < 1.0,
                    (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta,
                    0.0,
                )
        self.sigma = np.sqrt(var)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t

    def digest(self) -> str:
        h = hashlib.sha256(self.beta.astype("<f8").tobytes())
        h.update(self.sigma_mode.encode())
        return h.hexdigest()[:16]


def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    beta = np.linspace(cfg.beta_min, cfg.beta_max, cfg.T) if cfg.T > 1 else np.array([cfg.beta_min])
    sched = NoiseSchedule(beta, cfg.sigma_mode)
    if not (np.diff(sched.alpha_bar) < 0).all():
        raise ValueError("alpha_bar must be strictly decreasing")
    return sched


def _per_sample(values: np.ndarray, t, ndim: int) -> np.ndarray:
    v = values[np.asarray(t) - 1]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if np.ndim(v) else v


def q_sample(r0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) r0 + sqrt(1 - abar_t) eps``; ``t`` is an int or one per batch row."""
    t = sched.check_t(t)
    r0 = np.asarray(r0)
    if np.shape(eps) != r0.shape:
        raise ValueError("eps must match r0 in shape")
    ab = _per_sample(sched.alpha_bar, t, r0.ndim)
    return (np.sqrt(ab) * r0 + np.sqrt(1.0 - ab) * eps).astype(r0.dtype)


def _predict(model, r_t, t, cond) -> np.ndarray:
    with tc.no_grad():
        out = model(r_t, t, cond)
    return out.data if isinstance(out, tc.Tensor) else np.asarray(out)


def training_loss(model, r0: np.ndarray, cond: np.ndarray, rng: Rng, sched: NoiseSchedule) -> tc.Tensor:
    """Noise-prediction MSE with one random ``t`` and ``eps`` per sample."""
    r0 = np.asarray(r0, dtype=np.float32)
    n = r0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.normal(r0.shape)
    r_t = q_sample(r0, t, eps, sched)
    pred = model(r_t, t, cond)
    return tc.mse(tc.tensor(pred), eps)


def p_sample_step(
    model, r_t: np.ndarray, t: int, cond, sched: NoiseSchedule, rng: Rng | None, clip_denoised=None
) -> np.ndarray:
    """One ancestral step ``r_t -> r_{t-1}``; no noise is added at ``t == 1``.

    By default this is the plain noise-prediction recursion. With
    ``clip_denoised=(lo, hi)`` the implied ``r_0`` estimate is clamped to the
    data range first and the mean is taken from the Gaussian posterior
    ``q(r_{t-1} | r_t, r_0)``; the two agree whenever no clamping happens.
    """
    t = int(sched.check_t(t))
    eps_hat = _predict(model, r_t, np.full(r_t.shape[0], t), cond)
    a, b, ab = sched.alpha[t - 1], sched.beta[t - 1], sched.alpha_bar[t - 1]
    if clip_denoised is None:
        coef = b / np.sqrt(1.0 - ab) if b > 0 else 0.0
        mean = (r_t - coef * eps_hat) / np.sqrt(a)
    else:
        ab_prev = sched.alpha_bar_prev[t - 1]
        r0 = np.clip((r_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), *clip_denoised)
        mean = (np.sqrt(ab_prev) * b * r0 + np.sqrt(a) * (1.0 - ab_prev) * r_t) / (1.0 - ab)
    if t > 1 and sched.sigma[t - 1] > 0:
        mean = mean + sched.sigma[t - 1] * rng.normal(r_t.shape)
    return mean.astype(np.float32)


def sample(model, cond, sched: NoiseSchedule, rng: Rng, clip: bool = True, return_raw: bool = False, clip_denoised=None):
    """Run the reverse chain from ``r_T ~ N(0, I)`` down to ``t = 1``.

    ``cond`` fixes the output shape. With ``clip`` the result is clamped at
    zero; ``return_raw`` additionally returns the unclamped chain output.
    ``clip_denoised`` is passed to every :func:`p_sample_step`.
    """
    cond = np.asarray(cond, dtype=np.float32)
    r = rng.normal(cond.shape)
    for t in range(sched.T, 0, -1):
        r = p_sample_step(model, r, t, cond, sched, rng, clip_denoised)
    out = np.maximum(r, 0.0) if clip else r
    return (out, r) if return_raw else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to resume training bit-for-bit."""

    optimizer: Adam
    rng: Rng
    epoch: int = 0
    history: list[float] = field(default_factory=list)


def iterate_minibatches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epoch(model, images, conds, sched: NoiseSchedule, state: TrainState, batch_size: int) -> float:
    total, count = 0.0, 0
    for idx in iterate_minibatches(len(images), batch_size, state.rng):
        state.optimizer.zero_grad()
        loss = training_loss(model, images[idx], conds[idx], state.rng, sched)
        loss.backward()
        state.optimizer.step()
        total += loss.item() * len(idx)
        count += len(idx)
    state.epoch += 1
    mean_loss = total / count
    state.history.append(mean_loss)
    return mean_loss


def train_diffusion(
    model,
    images: np.ndarray,
    conds: np.ndarray,
    sched: NoiseSchedule,
    epochs: int,
    rng: Rng,
    batch_size: int = 4,
    lr: float = 3e-5,
    weight_decay: float = 0.0,
    state: TrainState | None = None,
    on_epoch=None,
    lr_schedule: str = "constant",
) -> TrainState:
    """Fit ``model`` to predict the noise in ``q_sample(images)`` given ``conds``.

    ``conds`` must be precomputed by the caller (the frozen estimator's
    output, or padded sinograms for the ablation). Pass ``state`` to
    resume; ``on_epoch(state)`` is called after each epoch.

    ``lr_schedule="cosine"`` sets epoch ``e``'s rate to
    ``lr * (1 + cos(pi * e / epochs)) / 2``. It depends only on the epoch
    index, so resuming towards the same ``epochs`` stays bitwise.
    """
    if lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    images = np.asarray(images, dtype=np.float32)
    conds = np.asarray(conds, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty training set")
    if images.shape != conds.shape:
        raise ValueError(f"images {images.shape} and conditions {conds.shape} differ in shape")
    if state is None:
        state = TrainState(Adam(model.params, lr=lr, weight_decay=weight_decay), rng)
    while state.epoch < epochs:
        if lr_schedule == "cosine":
            state.optimizer.lr = lr * 0.5 * (1.0 + math.cos(math.pi * state.epoch / epochs))
        loss = train_epoch(model, images, conds, sched, state, batch_size)
        logger.info("diffusion epoch %d: loss %.5f", state.epoch, loss)
        if on_epoch is not None:
            on_epoch(state)
    return state
