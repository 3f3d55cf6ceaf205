"""Distortion / perceptual-proxy metrics and the evaluation report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate

PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# Dynamic range used when the reference is constant.
DEGENERATE_RANGE = 1e-8


def _pair(ref, pred) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if ref.shape != pred.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {pred.shape}")
    return ref, pred


def error_map(ref, pred) -> np.ndarray:
    """Per-pixel squared error."""
    ref, pred = _pair(ref, pred)
    return (ref - pred) ** 2


def mse(ref, pred) -> float:
    return float(error_map(ref, pred).mean())


def psnr(ref, pred) -> float:
    """PSNR in dB with peak ``max(ref)``; ``inf`` for identical images."""
    ref, pred = _pair(ref, pred)
    peak = float(ref.max())
    if peak <= 0:
        raise ValueError("psnr needs a reference with a positive peak")
    err = float(np.mean((ref - pred) ** 2))
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / err)


def nrmse(ref, pred) -> float:
    """RMSE divided by the reference dynamic range."""
    ref, pred = _pair(ref, pred)
    rng = float(ref.max() - ref.min())
    if rng <= 0:
        raise ValueError("nrmse needs a non-constant reference")
    return math.sqrt(float(np.mean((ref - pred) ** 2))) / rng


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(ref, pred, data_range: float | None = None) -> np.ndarray:
    """Local SSIM over every window position fully inside the image."""
    ref, pred = _pair(ref, pred)
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if L <= 0:
        L = DEGENERATE_RANGE
    w = gaussian_window()
    filt = lambda a: correlate(a, w, mode="reflect")  # noqa: E731
    mu_x, mu_y = filt(ref), filt(pred)
    sxx = filt(ref * ref) - mu_x * mu_x
    syy = filt(pred * pred) - mu_y * mu_y
    sxy = filt(ref * pred) - mu_x * mu_y
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    pad = SSIM_WINDOW // 2
    return s[pad:-pad, pad:-pad]


def ssim(ref, pred) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), range from ``ref``."""
    ref, pred = _pair(ref, pred)
    if np.array_equal(ref, pred):
        return 1.0
    return float(ssim_map(ref, pred).mean())


class Decomposition(NamedTuple):
    mmse: float  # E||r0 - r0*||^2
    transport: float  # E||r0* - r^0||^2
    total: float  # E||r0 - r^0||^2
    residual: float  # |total - (mmse + transport)| / total


def decomposition_report(refs, means, samples) -> Decomposition:
    """Empirical terms of the distortion split through the posterior mean.

    Norms are per-pixel means, averaged over slices.
    """
    refs = [np.asarray(r, dtype=np.float64) for r in refs]
    means = [np.asarray(m, dtype=np.float64) for m in means]
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not (len(refs) == len(means) == len(samples)):
        raise ValueError("refs, means and samples must have the same length")
    if not refs:
        raise ValueError("empty input")
    d_star = float(np.mean([np.mean((r - m) ** 2) for r, m in zip(refs, means)]))
    transport = float(np.mean([np.mean((m - s) ** 2) for m, s in zip(means, samples)]))
    total = float(np.mean([np.mean((r - s) ** 2) for r, s in zip(refs, samples)]))
    residual = abs(total - (d_star + transport)) / total if total > 0 else 0.0
    return Decomposition(d_star, transport, total, residual)


@dataclass
class EvaluationReport:
    """Per-slice metrics for one method plus their aggregates."""

    method: str
    slice_ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    nrmse: list[float] = field(default_factory=list)

    def add(self, slice_id: str, ref, pred) -> None:
        self.slice_ids.append(slice_id)
        self.psnr.append(psnr(ref, pred))
        self.ssim.append(ssim(ref, pred))
        self.nrmse.append(nrmse(ref, pred))

    def __len__(self) -> int:
        return len(self.slice_ids)

    @staticmethod
    def _stats(values) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        if np.isinf(v).any():
            return (math.inf, 0.0) if np.isinf(v).all() else (math.inf, math.nan)
        return float(v.mean()), float(v.std())

    @property
    def psnr_stats(self):
        return self._stats(self.psnr)

    @property
    def ssim_stats(self):
        return self._stats(self.ssim)

    @property
    def nrmse_mean(self) -> float:
        return float(np.mean(self.nrmse))


def evaluate(method: str, slice_ids, refs, preds) -> EvaluationReport:
    if not (len(slice_ids) == len(refs) == len(preds)):
        raise ValueError("slice count mismatch between references and predictions")
    rep = EvaluationReport(method)
    for sid, r, p in zip(slice_ids, refs, preds):
        rep.add(sid, r, p)
    return rep
