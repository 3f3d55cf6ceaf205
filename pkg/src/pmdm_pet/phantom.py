"""Procedural brain-like activity phantoms and rotation augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import ManifestRecord, write_manifest, write_pimg
from .tensorcore import Rng

SPLITS = ("train", "val", "test")


@dataclass
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float  # radians
    value: float


@dataclass
class PhantomSpec:
    """Ellipse composite in normalized coordinates (support radius 1)."""

    ellipses: list[Ellipse] = field(default_factory=list)
    seed: int = 0


def support_mask(n: int) -> np.ndarray:
    """Pixels whose centres lie inside the inscribed circle."""
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[:n, :n]
    return np.hypot(xx - c, yy - c) <= n / 2.0 - 0.5


def phantom_spec(seed: int) -> PhantomSpec:
    rng = Rng(seed).spawn("phantom")
    u = rng.uniform
    spec = PhantomSpec(seed=seed)
    tilt = u(-0.15, 0.15)
    ax, ay = u(0.78, 0.88), u(0.84, 0.92)
    add = spec.ellipses.append
    # scalp ring
    add(Ellipse(0, 0, ax, ay, tilt, 0.25))
    add(Ellipse(0, 0, ax - 0.05, ay - 0.05, tilt, -0.25))
    # cortex band around white matter
    cx, cy = ax - 0.09, ay - 0.09
    add(Ellipse(0, 0, cx, cy, tilt, 1.0))
    band = u(0.08, 0.13)
    add(Ellipse(0, 0, cx - band, cy - band, tilt, -0.7))
    # ventricles: a pair of cold lobes near the centre
    vx = u(0.06, 0.12)
    for sgn in (-1, 1):
        add(Ellipse(sgn * vx, u(-0.1, 0.05), u(0.05, 0.09), u(0.16, 0.26), sgn * u(0.1, 0.4), -0.25))
    # deep grey / lesion-like structures
    for _ in range(int(rng.integers(3, 9))):
        r = u(0.0, 0.5)
        phi = u(0.0, 2 * np.pi)
        add(
            Ellipse(
                r * np.cos(phi),
                r * np.sin(phi),
                u(0.04, 0.14),
                u(0.04, 0.14),
                u(0.0, np.pi),
                float(u(-0.2, 0.9)),
            )
        )
    return spec


def rasterize(spec: PhantomSpec, n: int, supersample: int = 2) -> np.ndarray:
    m = n * supersample
    coords = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((m, m))
    for e in spec.ellipses:
        c, s = np.cos(e.theta), np.sin(e.theta)
        dx, dy = xx - e.cx, yy - e.cy
        u = (dx * c + dy * s) / e.a
        v = (-dx * s + dy * c) / e.b
        img[u * u + v * v <= 1.0] += e.value
    img = img.reshape(n, supersample, n, supersample).mean(axis=(1, 3))
    return np.maximum(img, 0.0)


def generate_phantom(seed: int, grid_size: int = 64) -> np.ndarray:
    """Deterministic ``(grid_size, grid_size)`` activity image with max 1."""
    if grid_size < 16:
        raise ValueError("grid_size must be >= 16")
    img = rasterize(phantom_spec(seed), grid_size)
    img[~support_mask(grid_size)] = 0.0
    return (img / img.max()).astype(np.float32)


def rotate_augment(img: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the image centre by ``angle`` degrees."""
    img = np.asarray(img, dtype=np.float32)
    if angle == 0:
        return img.copy()
    out = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0, prefilter=False)
    out[~support_mask(img.shape[0])] = 0.0
    return np.maximum(out, 0.0).astype(np.float32)


def split_phantoms(n_phantoms: int, seed: int, counts: tuple[int, int, int] | None = None) -> dict[int, str]:
    """Assign whole phantoms to train/val/test.

    Default proportions are 17/1/2 out of 20, rounded, keeping at least one
    training phantom.
    """
    if n_phantoms < 1:
        raise ValueError("need at least one phantom")
    if counts is None:
        n_test = int(round(n_phantoms * 2 / 20)) if n_phantoms >= 3 else 0
        n_val = int(round(n_phantoms * 1 / 20)) if n_phantoms >= 3 else 0
        n_test = max(n_test, 1) if n_phantoms >= 3 else n_test
        n_val = max(n_val, 1) if n_phantoms >= 3 else n_val
        counts = (n_phantoms - n_val - n_test, n_val, n_test)
    if sum(counts) != n_phantoms or counts[0] < 1:
        raise ValueError(f"split counts {counts} do not partition {n_phantoms} phantoms")
    order = Rng(seed).spawn("split").permutation(n_phantoms)
    out, pos = {}, 0
    for name, k in zip(SPLITS, counts):
        for pid in order[pos : pos + k]:
            out[int(pid)] = name
        pos += k
    return out


def augmentation_angles(seed: int, phantom_id: int, k: int, angle_range=(0.0, 15.0)) -> list[float]:
    rng = Rng(seed).spawn(f"angles/{phantom_id}")
    lo, hi = angle_range
    return [float(a) for a in rng.uniform(lo, hi, size=k)]


def build_dataset(
    n_phantoms: int,
    augment_per_phantom: int,
    grid_size: int,
    seed: int,
    out_dir,
    angle_range=(0.0, 15.0),
    split_counts=None,
    pixel_size: float = 2.0,
) -> list[ManifestRecord]:
    """Write augmented phantoms under ``out_dir/phantoms`` plus ``manifest.tsv``.

    The returned records point at the phantom images; simulation later
    rewrites the manifest to point at references and sinograms.
    """
    out = Path(out_dir)
    (out / "phantoms").mkdir(parents=True, exist_ok=True)
    splits = split_phantoms(n_phantoms, seed, split_counts)
    records = []
    for pid in range(n_phantoms):
        base = generate_phantom(seed * 1000003 + pid, grid_size)
        for k, angle in enumerate(augmentation_angles(seed, pid, augment_per_phantom, angle_range)):
            rel = f"phantoms/p{pid:03d}_a{k}.pimg"
            write_pimg(out / rel, rotate_augment(base, angle), pixel_size)
            records.append(ManifestRecord(splits[pid], pid, angle, rel, "-"))
    write_manifest(out / "manifest.tsv", records)
    return records
