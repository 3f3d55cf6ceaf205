"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..checkpoint import read_keyvalue
from ..classical import ReconConfig
from ..diffusion import DiffusionConfig
from ..projector import SystemModel


@dataclass
class RunConfig:
    """Every knob of one experiment; the defaults give the 32x32 toy run."""

    seed: int = 0
    out: str = "run"
    # geometry
    grid_size: int = 32
    pixel_size: float = 2.0
    n_angles: int = 30
    n_bins: int = 48
    bin_spacing: float = 2.0
    psf_fwhm: float = 2.5
    # count budgets: training data, and the reference multiple of it
    total_counts: float = 2e4
    reference_factor: float = 50.0
    # dataset
    n_phantoms: int = 20
    augment_per_phantom: int = 5
    angle_min: float = 0.0
    angle_max: float = 15.0
    split_train: int = 17
    split_val: int = 1
    split_test: int = 2
    # reference reconstruction
    ref_method: str = "osem"
    ref_iterations: int = 10
    ref_subsets: int = 14
    # baselines
    baseline_iterations: int = 10
    baseline_subsets: int = 14
    mlem_iterations: int = 50
    # posterior-mean estimator
    est_base_width: int = 16
    est_levels: int = 2
    est_epochs: int = 50
    est_batch_size: int = 4
    est_lr: float = 1e-4
    est_weight_decay: float = 1e-5
    # diffusion
    T: int = 100
    beta_min: float | None = None
    beta_max: float | None = None
    sigma_mode: str = "posterior"
    diff_base_width: int = 32
    diff_levels: int = 3
    diff_groups: int = 8
    diff_epochs: int = 50
    diff_batch_size: int = 4
    diff_lr: float = 1e-3
    diff_weight_decay: float = 0.0
    diff_lr_schedule: str = "constant"
    clip_denoised: bool = True
    n_samples: int = 1

    def __post_init__(self):
        self.system()
        self.diffusion()
        self.reference_recon()
        if self.split_train + self.split_val + self.split_test != self.n_phantoms:
            raise ValueError("split counts must sum to n_phantoms")
        if self.angle_max < self.angle_min:
            raise ValueError("angle_max < angle_min")

    # -- derived configs ----------------------------------------------------
    def system(self) -> SystemModel:
        return SystemModel(
            grid_size=self.grid_size,
            pixel_size=self.pixel_size,
            n_angles=self.n_angles,
            n_bins=self.n_bins,
            bin_spacing=self.bin_spacing,
            psf_fwhm=self.psf_fwhm,
            total_counts=self.total_counts,
        )

    def diffusion(self, condition: str = "posterior_mean") -> DiffusionConfig:
        return DiffusionConfig(
            T=self.T, beta_min=self.beta_min, beta_max=self.beta_max, sigma_mode=self.sigma_mode, condition=condition
        )

    def reference_recon(self) -> ReconConfig:
        return ReconConfig(method=self.ref_method, iterations=self.ref_iterations, subsets=self.ref_subsets)

    @property
    def split_counts(self) -> tuple[int, int, int]:
        return (self.split_train, self.split_val, self.split_test)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_dict(cls, items: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(items) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: _parse(known[k].type, k, v) for k, v in items.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(read_keyvalue(path))


def _format(v) -> str:
    if v is None:
        return "auto"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(type_name: str, key: str, text: str):
    base = type_name.split("|")[0].strip()
    if "None" in type_name and text in ("auto", "None", ""):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return text.lower() in ("true", "1", "yes")
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {base}") from None
    return text
