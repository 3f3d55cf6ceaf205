"""The experiment stages behind each CLI subcommand.

All artifacts live under one run directory::

    config.txt
    dataset/     manifest.tsv, calibration.txt, phantoms/, references/,
                 sinograms/ (training counts), sinograms_high/, sinograms_expected/
    checkpoints/ estimator.pmdm, denoiser.pmdm, denoiser-palette-ablation.pmdm
    predictions/ <method>/...
    reports/
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import read_keyvalue, write_keyvalue
from ..classical import FBPReconstructor, MLEMReconstructor, OSEMReconstructor, make_reference, resolve_subsets
from ..estimators import ABLATION_TAG, PMDMReconstructor, PosteriorMeanEstimator
from ..io import (
    ManifestRecord,
    Sinogram,
    read_manifest,
    read_pimg,
    read_psin,
    write_manifest,
    write_pgm,
    write_pimg,
    write_psin,
)
from ..metrics import decomposition_report, evaluate as evaluate_method
from ..phantom import build_dataset
from ..projector import forward_project
from ..tensorcore import Rng
from . import report
from .config import RunConfig

logger = logging.getLogger(__name__)

BASELINES = ("fbp", "mlem", "osem")


class DataError(Exception):
    """Missing, inconsistent or mismatched on-disk data."""


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def manifest(self) -> Path:
        return self.dataset / "manifest.tsv"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def estimator(self) -> Path:
        return self.checkpoints / "estimator.pmdm"

    def denoiser(self, condition: str = "posterior_mean") -> Path:
        name = "denoiser.pmdm" if condition == "posterior_mean" else f"denoiser-{ABLATION_TAG}.pmdm"
        return self.checkpoints / name

    def predictions(self, method: str) -> Path:
        return self.root / "predictions" / method

    @property
    def reports(self) -> Path:
        return self.root / "reports"


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def simulate(cfg: RunConfig, layout: Layout) -> list[ManifestRecord]:
    """Phantoms, augmentations, sinograms and references plus the manifest."""
    sys = cfg.system()
    recon = cfg.reference_recon()
    layout.root.mkdir(parents=True, exist_ok=True)
    cfg.save(layout.config)
    records = build_dataset(
        cfg.n_phantoms,
        cfg.augment_per_phantom,
        cfg.grid_size,
        cfg.seed,
        layout.dataset,
        angle_range=(cfg.angle_min, cfg.angle_max),
        split_counts=cfg.split_counts,
        pixel_size=cfg.pixel_size,
    )
    for sub in ("references", "sinograms", "sinograms_high", "sinograms_expected"):
        (layout.dataset / sub).mkdir(exist_ok=True)
    phantoms = [read_pimg(layout.dataset / r.image_path).values for r in records]
    expected = [forward_project(p, sys) for p in phantoms]
    # one scanner-wide factor from counts back to activity units
    calibration = float(np.mean([e.sum() for e in expected]) / sys.total_counts)
    root = Rng(cfg.seed).spawn("simulate")
    out = []
    for rec, ph, exp in zip(records, phantoms, expected):
        train, high, ref = make_reference(
            ph, sys, root.spawn(rec.stem), recon, reference_factor=cfg.reference_factor, calibration=calibration
        )
        ref_path = f"references/{rec.stem}.pimg"
        sino_path = f"sinograms/{rec.stem}.psin"
        write_pimg(layout.dataset / ref_path, ref, cfg.pixel_size)
        write_psin(layout.dataset / sino_path, _sino(train, "counts", cfg))
        write_psin(layout.dataset / f"sinograms_high/{rec.stem}.psin", _sino(high, "counts", cfg))
        write_psin(layout.dataset / f"sinograms_expected/{rec.stem}.psin", _sino(exp, "expected", cfg))
        out.append(ManifestRecord(rec.split, rec.phantom_id, rec.angle, ref_path, sino_path))
    write_manifest(layout.manifest, out)
    write_keyvalue(layout.dataset / "calibration.txt", {"calibration": repr(calibration)})
    logger.info("simulated %d slices into %s", len(out), layout.dataset)
    return out


def _sino(values, kind: str, cfg: RunConfig) -> Sinogram:
    return Sinogram(np.asarray(values, dtype=np.float32), kind, cfg.bin_spacing, cfg.pixel_size)


def calibration(layout: Layout) -> float:
    path = layout.dataset / "calibration.txt"
    if not path.exists():
        raise DataError(f"missing {path}; run simulate first")
    return float(read_keyvalue(path)["calibration"])


def load_split(layout: Layout, split: str):
    """``(records, sinograms, references)`` for one split, in manifest order."""
    if not layout.manifest.exists():
        raise DataError(f"missing {layout.manifest}; run simulate first")
    records = [r for r in read_manifest(layout.manifest) if r.split == split]
    if not records:
        raise DataError(f"no {split!r} slices in {layout.manifest}")
    if any(r.sino_path == "-" for r in records):
        raise DataError("manifest has no sinograms; run simulate first")
    try:
        sinos = np.stack([read_psin(layout.dataset / r.sino_path).values for r in records])
        refs = np.stack([read_pimg(layout.dataset / r.image_path).values for r in records])
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    return records, sinos, refs


def _check_grid(cfg: RunConfig, refs: np.ndarray, what: str = "dataset") -> None:
    if refs.shape[1:] != (cfg.grid_size, cfg.grid_size):
        raise DataError(f"{what} grid {refs.shape[1:]} does not match grid_size={cfg.grid_size}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def make_estimator(cfg: RunConfig) -> PosteriorMeanEstimator:
    return PosteriorMeanEstimator(
        grid_size=cfg.grid_size,
        base_width=cfg.est_base_width,
        levels=cfg.est_levels,
        epochs=cfg.est_epochs,
        batch_size=cfg.est_batch_size,
        lr=cfg.est_lr,
        weight_decay=cfg.est_weight_decay,
        random_state=cfg.seed,
    )


def train_estimator(cfg: RunConfig, layout: Layout) -> PosteriorMeanEstimator:
    _, X, y = load_split(layout, "train")
    _, Xv, yv = load_split(layout, "val")
    _check_grid(cfg, y)
    est = make_estimator(cfg).fit(X, y, Xv, yv)
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    est.save(layout.estimator)
    layout.reports.mkdir(parents=True, exist_ok=True)
    report.write_history(
        layout.reports / "estimator_history.tsv",
        {"train_mse": est.history_["train_mse"], "val_mse": est.history_["val_mse"]},
    )
    return est


def load_estimator(cfg: RunConfig, layout: Layout) -> PosteriorMeanEstimator:
    if not layout.estimator.exists():
        raise DataError(f"missing estimator checkpoint {layout.estimator}")
    est = PosteriorMeanEstimator.load(layout.estimator)
    if est.grid_size != cfg.grid_size:
        raise DataError(f"estimator checkpoint grid {est.grid_size} does not match grid_size={cfg.grid_size}")
    return est


def make_reconstructor(cfg: RunConfig, condition: str, estimator=None) -> PMDMReconstructor:
    return PMDMReconstructor(
        estimator=estimator,
        condition=condition,
        T=cfg.T,
        beta_min=cfg.beta_min,
        beta_max=cfg.beta_max,
        sigma_mode=cfg.sigma_mode,
        base_width=cfg.diff_base_width,
        levels=cfg.diff_levels,
        groups=cfg.diff_groups,
        epochs=cfg.diff_epochs,
        batch_size=cfg.diff_batch_size,
        lr=cfg.diff_lr,
        weight_decay=cfg.diff_weight_decay,
        lr_schedule=cfg.diff_lr_schedule,
        clip_denoised=cfg.clip_denoised,
        random_state=cfg.seed,
    )


def train_diffusion(cfg: RunConfig, layout: Layout, condition: str = "posterior_mean", resume: bool = False):
    _, X, y = load_split(layout, "train")
    _check_grid(cfg, y)
    est = load_estimator(cfg, layout) if condition == "posterior_mean" else None
    model = make_reconstructor(cfg, condition, est)
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    model.fit(X, y, checkpoint=layout.denoiser(condition), resume=resume)
    layout.reports.mkdir(parents=True, exist_ok=True)
    report.write_history(layout.reports / f"diffusion_history_{model.tag}.tsv", {"loss": model.history_})
    return model


def load_reconstructor(cfg: RunConfig, layout: Layout, condition: str) -> PMDMReconstructor:
    path = layout.denoiser(condition)
    if not path.exists():
        raise DataError(f"missing denoiser checkpoint {path}")
    est = load_estimator(cfg, layout) if condition == "posterior_mean" else None
    try:
        model = PMDMReconstructor.load(path, estimator=est)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if model.grid_size_ != cfg.grid_size:
        raise DataError(f"denoiser checkpoint grid {model.grid_size_} does not match grid_size={cfg.grid_size}")
    return model


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _write_images(directory: Path, stems, images, pixel_size: float, vmax: float | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "previews").mkdir(exist_ok=True)
    for stem, img in zip(stems, images):
        write_pimg(directory / f"{stem}.pimg", img, pixel_size)
        write_pgm(directory / "previews" / f"{stem}.pgm", img, vmax)


def sample(
    cfg: RunConfig,
    layout: Layout,
    condition: str = "posterior_mean",
    n_samples: int | None = None,
    split: str = "test",
    seed: int | None = None,
) -> Path:
    """Write ``samples/`` (and ``means/`` when conditioning on the estimator).

    ``samples/<stem>.pimg`` holds the first sample of each slice; further
    samples are ``samples/<stem>.s<j>.pimg``.
    """
    records, X, _ = load_split(layout, split)
    model = load_reconstructor(cfg, layout, condition)
    k = n_samples or cfg.n_samples
    draws = model.sample(X, k, seed=cfg.seed if seed is None else seed)
    out = layout.predictions(model.tag)
    stems = [r.stem for r in records]
    _write_images(out / "samples", stems, draws[:, 0], cfg.pixel_size)
    for j in range(1, k):
        for stem, img in zip(stems, draws[:, j]):
            write_pimg(out / "samples" / f"{stem}.s{j}.pimg", img, cfg.pixel_size)
    if condition == "posterior_mean":
        _write_images(out / "means", stems, model.posterior_mean(X), cfg.pixel_size)
    return out


def baseline(
    cfg: RunConfig,
    layout: Layout,
    method: str,
    split: str = "test",
    iterations: int | None = None,
    subsets: int | None = None,
) -> Path:
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}; choose from {', '.join(BASELINES)}")
    records, X, _ = load_split(layout, split)
    sys = cfg.system()
    scale = calibration(layout)
    if method == "fbp":
        rec = FBPReconstructor(sys, scale=scale)
    elif method == "mlem":
        rec = MLEMReconstructor(sys, iterations=iterations or cfg.mlem_iterations, scale=scale)
    else:
        subsets = resolve_subsets(sys.n_angles, subsets or cfg.baseline_subsets)
        rec = OSEMReconstructor(sys, iterations=iterations or cfg.baseline_iterations, subsets=subsets, scale=scale)
    preds = rec.fit_transform(X)
    out = layout.predictions(method)
    _write_images(out, [r.stem for r in records], preds, cfg.pixel_size)
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def read_predictions(directory: Path, stems) -> np.ndarray:
    directory = Path(directory)
    missing = [s for s in stems if not (directory / f"{s}.pimg").exists()]
    if missing:
        raise DataError(f"{directory}: {len(missing)} of {len(stems)} slices missing (e.g. {missing[0]})")
    return np.stack([read_pimg(directory / f"{s}.pimg").values for s in stems])


def evaluate(
    cfg: RunConfig,
    layout: Layout,
    methods: list[tuple[str, Path]],
    means: Path | None = None,
    samples: Path | None = None,
    split: str = "test",
):
    """Score each ``(name, directory)`` against the references, in the given order."""
    if not methods:
        raise ValueError("no prediction directories given")
    records, X, refs = load_split(layout, split)
    stems = [r.stem for r in records]
    reports, preds = [], {}
    for name, directory in methods:
        p = read_predictions(directory, stems)
        preds[name] = p
        reports.append(evaluate_method(name, stems, refs, p))
    decomposition = None
    if means is not None and samples is not None:
        decomposition = decomposition_report(refs, read_predictions(means, stems), read_predictions(samples, stems))
    params = report.parameter_counts(layout.checkpoints)
    layout.reports.mkdir(parents=True, exist_ok=True)
    report.write_per_slice(layout.reports / "evaluation.tsv", reports)
    text = report.summary(reports, decomposition, params)
    (layout.reports / "summary.txt").write_text(text)
    montages = layout.reports / "montages"
    montages.mkdir(exist_ok=True)
    for i, stem in enumerate(stems):
        tile = report.montage(X[i], refs[i], [preds[n][i] for n, _ in methods], cfg.grid_size)
        write_pgm(montages / f"{stem}.pgm", tile)
    return reports, decomposition, text
