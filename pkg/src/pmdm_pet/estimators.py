"""Scikit-learn style front ends for the two reconstruction stages.

``PosteriorMeanEstimator`` regresses images from sinograms under MSE.
``PMDMReconstructor`` wraps a *fitted* estimator and learns a diffusion
model conditioned on its output; with ``condition="sinogram"`` it instead
conditions directly on the sinogram (the ablation without an MSE stage).

Sinogram inputs are stacks shaped ``(n, n_bins, n_angles)``; images are
``(n, grid_size, grid_size)``.
"""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import tensorcore as tc
from ._validation import check_images, check_same_length, check_sinograms
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import DiffusionConfig, TrainState, iterate_minibatches, make_schedule, sample, train_diffusion
from .nn import DenoiserUNet, PosteriorMeanNet
from .projector import pad_to_square
from .tensorcore import Adam, NonFiniteError, Rng

logger = logging.getLogger(__name__)

ABLATION_TAG = "palette-ablation"
PMDM_TAG = "pmdm"


def to_network_input(X, grid_size: int, support_bins: int | None = None) -> np.ndarray:
    """Square network input from sinograms: ``(n, 1, grid_size, grid_size)``.

    Bins outside the central ``support_bins`` (default ``grid_size``, i.e.
    the image support when bins and pixels share a spacing) are dropped,
    the rest is zero-padded to a square and each slice is divided by its
    mean count so the input is independent of the count budget.
    """
    X = np.asarray(X, dtype=np.float64)
    keep = min(support_bins or grid_size, grid_size, X.shape[1])
    start = (X.shape[1] - keep) // 2
    X = X[:, start : start + keep, :]
    if X.shape[2] > grid_size:
        raise ValueError(f"{X.shape[2]} angles do not fit a {grid_size}x{grid_size} input")
    means = X.mean(axis=(1, 2), keepdims=True)
    X = np.divide(X, means, out=np.zeros_like(X), where=means > 0)
    return pad_to_square(X, grid_size)[:, None].astype(np.float32)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


class PosteriorMeanEstimator(RegressorMixin, BaseEstimator):
    """Encoder-decoder trained with Adam under MSE supervision.

    Parameters
    ----------
    grid_size : int
        Image side length; sinograms are squared to this size.
    base_width, levels : int
        Channels of the first layer and number of stride-2 stages.
    epochs, batch_size, lr, weight_decay
        Optimisation settings (Adam, L2 weight decay).
    random_state : int
        Seeds weight init and minibatch order.
    """

    def __init__(
        self,
        grid_size: int = 64,
        base_width: int = 16,
        levels: int = 2,
        epochs: int = 50,
        batch_size: int = 4,
        lr: float = 1e-4,
        weight_decay: float = 1e-5,
        support_bins: int | None = None,
        random_state: int = 0,
    ):
        self.grid_size = grid_size
        self.base_width = base_width
        self.levels = levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.support_bins = support_bins
        self.random_state = random_state

    def _inputs(self, X) -> np.ndarray:
        return to_network_input(check_sinograms(X), self.grid_size, self.support_bins)

    def _targets(self, y) -> np.ndarray:
        return check_images(y, (self.grid_size, self.grid_size))[:, None].astype(np.float32)

    def _init_network(self) -> PosteriorMeanNet:
        return PosteriorMeanNet(self.grid_size, self.base_width, self.levels, seed=self.random_state)

    def _mse(self, inputs, targets) -> float:
        preds = self._forward(inputs)
        return float(np.mean((preds - targets) ** 2, dtype=np.float64))

    def _forward(self, inputs) -> np.ndarray:
        out = []
        with tc.no_grad():
            for sl in _batches(len(inputs), 16):
                out.append(self.network_(inputs[sl], training=False).data)
        return np.concatenate(out)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train; with validation data the best-validation weights are kept."""
        inputs, targets = self._inputs(X), self._targets(y)
        check_same_length(inputs, targets)
        val = None
        if X_val is not None:
            val = (self._inputs(X_val), self._targets(y_val))
            check_same_length(*val)
        self.network_ = self._init_network()
        opt = Adam(self.network_.params, lr=self.lr, weight_decay=self.weight_decay)
        rng = Rng(self.random_state).spawn("estimator-train")
        self.history_ = {"train_mse": [], "val_mse": []}
        self.initial_val_mse_ = self._mse(*val) if val else None
        best = (np.inf, None)
        for epoch in range(self.epochs):
            total = 0.0
            for idx in iterate_minibatches(len(inputs), self.batch_size, rng):
                opt.zero_grad()
                loss = tc.mse(self.network_(inputs[idx], training=True), targets[idx])
                if not np.isfinite(loss.item()):
                    raise NonFiniteError(f"estimator loss diverged at epoch {epoch + 1}")
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.history_["train_mse"].append(total / len(inputs))
            if val:
                v = self._mse(*val)
                self.history_["val_mse"].append(v)
                if v < best[0]:
                    best = (v, copy.deepcopy(self.network_.params.state_arrays()))
            logger.info(
                "estimator epoch %d: train %.6f val %s",
                epoch + 1,
                self.history_["train_mse"][-1],
                f"{self.history_['val_mse'][-1]:.6f}" if val else "-",
            )
        if best[1] is not None:
            self.network_.params.load_state_arrays(best[1])
            self.best_val_mse_ = best[0]
        self.n_parameters_ = self.network_.parameter_count()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self._forward(self._inputs(X))[:, 0]

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean squared error (higher is better)."""
        check_is_fitted(self, "network_")
        return -self._mse(self._inputs(X), self._targets(y))

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        meta = {f"param.{k}": v for k, v in self.get_params().items()}
        meta["history"] = json.dumps(self.history_)
        save_checkpoint(path, self.network_, "estimator", meta)

    @classmethod
    def load(cls, path) -> "PosteriorMeanEstimator":
        net, meta, _ = load_checkpoint(path, "estimator")
        params = {k[6:]: _parse_param(v) for k, v in meta.items() if k.startswith("param.")}
        est = cls(**params)
        est.network_ = net
        est.history_ = json.loads(meta.get("history", "{}"))
        est.n_parameters_ = net.parameter_count()
        return est


def _parse_param(text: str):
    if text in ("None", "True", "False"):
        return {"None": None, "True": True, "False": False}[text]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


class PMDMReconstructor(BaseEstimator):
    """Diffusion sampler conditioned on a frozen posterior-mean estimator.

    Parameters
    ----------
    estimator : PosteriorMeanEstimator or None
        Already fitted; it is never refit. Required unless
        ``condition="sinogram"``.
    condition : {"posterior_mean", "sinogram"}
        What the denoiser sees next to ``r_t``.
    T, beta_min, beta_max, sigma_mode
        Noise schedule (see :class:`~pmdm_pet.diffusion.DiffusionConfig`).
    base_width, levels, groups
        U-Net size.
    data_scale : float or None
        Images are mapped to ``[-1, 1]`` via ``2 * x / data_scale - 1``;
        ``None`` uses the largest training target.
    clip_denoised : bool
        Clamp each step's implied clean image to ``[-1, 1]`` while sampling.
    lr_schedule : {"constant", "cosine"}
        Per-epoch learning-rate schedule.
    """

    def __init__(
        self,
        estimator: PosteriorMeanEstimator | None = None,
        condition: str = "posterior_mean",
        T: int = 100,
        beta_min: float | None = None,
        beta_max: float | None = None,
        sigma_mode: str = "beta",
        base_width: int = 32,
        levels: int = 3,
        groups: int = 8,
        epochs: int = 50,
        batch_size: int = 4,
        lr: float = 3e-5,
        weight_decay: float = 0.0,
        lr_schedule: str = "constant",
        data_scale: float | None = None,
        clip_denoised: bool = True,
        support_bins: int | None = None,
        random_state: int = 0,
    ):
        self.estimator = estimator
        self.condition = condition
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.sigma_mode = sigma_mode
        self.base_width = base_width
        self.levels = levels
        self.groups = groups
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.data_scale = data_scale
        self.clip_denoised = clip_denoised
        self.support_bins = support_bins
        self.random_state = random_state

    # -- helpers ------------------------------------------------------------
    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(
            T=self.T,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            sigma_mode=self.sigma_mode,
            condition=self.condition,
        )

    @property
    def tag(self) -> str:
        return ABLATION_TAG if self.condition == "sinogram" else PMDM_TAG

    def _grid_size(self) -> int:
        if self.condition == "posterior_mean":
            if self.estimator is None:
                raise ValueError("condition='posterior_mean' needs a fitted estimator")
            check_is_fitted(self.estimator, "network_")
            return self.estimator.grid_size
        return self.grid_size_

    def _scale(self, images: np.ndarray) -> np.ndarray:
        return (2.0 * images / self.data_scale_ - 1.0).astype(np.float32)

    def _unscale(self, images: np.ndarray) -> np.ndarray:
        return ((images + 1.0) * (0.5 * self.data_scale_)).astype(np.float32)

    def conditions(self, X) -> np.ndarray:
        """Scaled conditioning images ``(n, 1, G, G)`` for sinograms ``X``."""
        X = check_sinograms(X)
        if self.condition == "posterior_mean":
            return self._scale(self.estimator.predict(X))[:, None]
        s = to_network_input(X, self.grid_size_, self.support_bins)
        peak = s.max(axis=(1, 2, 3), keepdims=True)
        s = np.divide(s, peak, out=np.zeros_like(s), where=peak > 0)
        return (2.0 * s - 1.0).astype(np.float32)

    def posterior_mean(self, X) -> np.ndarray:
        if self.estimator is None:
            raise ValueError("no estimator attached")
        return self.estimator.predict(X)

    # -- fitting ------------------------------------------------------------
    def fit(self, X, y, checkpoint=None, resume: bool = False):
        """Train the denoiser on ``(conditions(X), y)``.

        With ``checkpoint`` the full training state is written after every
        epoch; ``resume=True`` continues from that file if it exists.
        """
        X = check_sinograms(X)
        y = check_images(y)
        check_same_length(X, y)
        self.grid_size_ = y.shape[1]
        if self.condition == "posterior_mean" and self._grid_size() != self.grid_size_:
            raise ValueError("estimator grid size does not match the training images")
        self.data_scale_ = float(self.data_scale) if self.data_scale else float(y.max())
        self.schedule_ = make_schedule(self.diffusion_config())
        conds = self.conditions(X)
        targets = self._scale(y)[:, None]
        rng = Rng(self.random_state).spawn("diffusion-train")
        state = None
        if checkpoint is not None and resume and Path(checkpoint).exists():
            self.network_, state = self._restore(checkpoint, rng)
        else:
            self.network_ = DenoiserUNet(
                self.grid_size_, self.base_width, self.levels, groups=self.groups, T=self.T, seed=self.random_state
            )
        on_epoch = (lambda st: self._save_state(checkpoint, st)) if checkpoint is not None else None
        state = train_diffusion(
            self.network_,
            targets,
            conds,
            self.schedule_,
            self.epochs,
            rng,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            state=state,
            on_epoch=on_epoch,
            lr_schedule=self.lr_schedule,
        )
        self.train_state_ = state
        self.history_ = list(state.history)
        self.n_parameters_ = self.network_.parameter_count()
        return self

    # -- inference ----------------------------------------------------------
    def sample(self, X, n_samples: int = 1, seed: int | None = None, clip: bool = True, batch_size: int = 16) -> np.ndarray:
        """Posterior samples shaped ``(n, n_samples, G, G)``."""
        check_is_fitted(self, "network_")
        conds = self.conditions(X)
        rng = Rng(self.random_state if seed is None else seed).spawn("sample")
        reps = np.repeat(conds, n_samples, axis=0)
        bounds = (-1.0, 1.0) if self.clip_denoised else None
        out = []
        for sl in _batches(len(reps), batch_size):
            out.append(sample(self.network_, reps[sl], self.schedule_, rng, clip=False, clip_denoised=bounds))
        r = self._unscale(np.concatenate(out)[:, 0])
        if clip:
            r = np.maximum(r, 0.0)
        return r.reshape(len(conds), n_samples, *r.shape[1:])

    def predict(self, X) -> np.ndarray:
        return self.sample(X, 1)[:, 0]

    # -- persistence --------------------------------------------------------
    def _meta(self) -> dict:
        cfg = self.diffusion_config()
        meta = {f"param.{k}": v for k, v in self.get_params(deep=False).items() if k != "estimator"}
        meta.update(
            {
                "tag": self.tag,
                "diffusion.T": cfg.T,
                "diffusion.beta_min": repr(cfg.beta_min),
                "diffusion.beta_max": repr(cfg.beta_max),
                "diffusion.sigma_mode": cfg.sigma_mode,
                "diffusion.condition": cfg.condition,
                "schedule_hash": self.schedule_.digest(),
                "data_scale": repr(self.data_scale_),
                "grid_size": self.grid_size_,
            }
        )
        return meta

    def _save_state(self, path, state: TrainState) -> None:
        meta = self._meta()
        meta["epoch"] = state.epoch
        meta["history"] = json.dumps(state.history)
        save_checkpoint(path, self.network_, "denoiser", meta, optimizer=state.optimizer, rng=state.rng)

    def _restore(self, path, rng: Rng):
        net, meta, arrays = load_checkpoint(path, "denoiser")
        self._check_schedule(meta)
        opt = Adam(net.params, lr=self.lr, weight_decay=self.weight_decay)
        opt.load_state_arrays(arrays)
        rng.set_state(json.loads(meta["rng_state"]))
        state = TrainState(opt, rng, int(meta["epoch"]), json.loads(meta["history"]))
        return net, state

    def _check_schedule(self, meta: dict) -> None:
        expected = make_schedule(self.diffusion_config()).digest()
        if meta.get("schedule_hash") != expected:
            raise ValueError(
                f"checkpoint schedule hash {meta.get('schedule_hash')} does not match the configured schedule {expected}"
            )

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        self._save_state(path, self.train_state_)

    @classmethod
    def load(cls, path, estimator: PosteriorMeanEstimator | None = None, **overrides) -> "PMDMReconstructor":
        """Rebuild from a checkpoint; refuses a schedule that does not hash-match."""
        net, meta, _ = load_checkpoint(path, "denoiser")
        params = {k[6:]: _parse_param(v) for k, v in meta.items() if k.startswith("param.")}
        params.update(overrides)
        obj = cls(estimator=estimator, **params)
        obj._check_schedule(meta)
        obj.network_ = net
        obj.schedule_ = make_schedule(obj.diffusion_config())
        obj.data_scale_ = float(meta["data_scale"])
        obj.grid_size_ = int(meta["grid_size"])
        obj.history_ = json.loads(meta.get("history", "[]"))
        obj.n_parameters_ = net.parameter_count()
        return obj
