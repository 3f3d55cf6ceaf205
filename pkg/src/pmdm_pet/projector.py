"""Discrete 2-D PET forward model.

Line integrals use Joseph's method (linear interpolation along the
dominant axis of each ray); a 1-D Gaussian PSF is then applied along the
detector-bin axis. Both stages are assembled once into a sparse matrix per
geometry, so :func:`back_project` is the exact transpose of
:func:`forward_project`.

Sinograms are laid out ``(n_bins, n_angles)``. Images are ``(N, N)`` with
columns along +x and rows along +y. Line integrals are measured in pixel
lengths, so one angle's profile sums to ``img.sum() * pixel_size /
bin_spacing``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

FWHM_TO_SIGMA = 1.0 / 2.355


@dataclass(frozen=True)
class SystemModel:
    """Scanner geometry and count budget.

    Defaults are the desk-scale 64x64 setup; everything is overridable.
    """

    grid_size: int = 64
    pixel_size: float = 2.0
    n_angles: int = 60
    n_bins: int = 96
    bin_spacing: float = 2.0
    psf_fwhm: float = 2.5
    total_counts: float = 5e5

    def __post_init__(self):
        if self.grid_size < 2 or self.n_angles < 1 or self.n_bins < 1:
            raise ValueError("grid_size, n_angles and n_bins must be positive")
        if self.pixel_size <= 0 or self.bin_spacing <= 0:
            raise ValueError("pixel_size and bin_spacing must be positive")
        if self.psf_fwhm < 0:
            raise ValueError("psf_fwhm must be >= 0")
        if self.total_counts <= 0:
            raise ValueError("total_counts must be > 0")
        diagonal = np.sqrt(2.0) * self.grid_size * self.pixel_size
        if self.n_bins * self.bin_spacing < diagonal - 1e-9:
            raise ValueError(
                f"detector too small: {self.n_bins} bins x {self.bin_spacing} mm "
                f"< image diagonal {diagonal:.1f} mm"
            )

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_bins, self.n_angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.grid_size, self.grid_size)

    def replace(self, **changes) -> "SystemModel":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return SystemModel(**fields)


def _joseph_matrix(sys: SystemModel) -> sp.csr_matrix:
    n, nb, na = sys.grid_size, sys.n_bins, sys.n_angles
    centre = (n - 1) / 2.0
    coords = np.arange(n) - centre
    u = (np.arange(nb) - (nb - 1) / 2.0) * (sys.bin_spacing / sys.pixel_size)
    rows, cols, vals = [], [], []
    for a, theta in enumerate(sys.angles):
        c, s = np.cos(theta), np.sin(theta)
        if abs(c) >= abs(s):
            # march over image rows, interpolate across columns
            pos = (u[:, None] - coords[None, :] * s) / c + centre
            step = 1.0 / abs(c)
            fixed = np.broadcast_to(np.arange(n)[None, :], pos.shape)
            along_cols = True
        else:
            pos = (u[:, None] - coords[None, :] * c) / s + centre
            step = 1.0 / abs(s)
            fixed = np.broadcast_to(np.arange(n)[None, :], pos.shape)
            along_cols = False
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        bins = np.broadcast_to(np.arange(nb)[:, None], pos.shape)
        for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
            ok = (idx >= 0) & (idx < n) & (w > 0)
            if along_cols:
                pix = fixed[ok] * n + idx[ok]
            else:
                pix = idx[ok] * n + fixed[ok]
            rows.append(bins[ok] * na + a)
            cols.append(pix)
            vals.append(w[ok] * step)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nb * na, n * n),
    )
    return mat.tocsr()


def psf_kernel(sys: SystemModel) -> np.ndarray:
    """Sampled, unit-sum Gaussian over detector bins (length 1 if no PSF)."""
    sigma = sys.psf_fwhm * FWHM_TO_SIGMA / sys.bin_spacing
    if sigma <= 0:
        return np.ones(1)
    half = max(1, int(np.ceil(4 * sigma)))
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _psf_matrix(sys: SystemModel) -> sp.csr_matrix:
    k = psf_kernel(sys)
    half = len(k) // 2
    blur = sp.diags(list(k), list(range(-half, half + 1)), shape=(sys.n_bins, sys.n_bins))
    return sp.kron(blur, sp.identity(sys.n_angles), format="csr")


@functools.lru_cache(maxsize=8)
def system_matrix(sys: SystemModel) -> sp.csr_matrix:
    """Sparse ``A`` with rows ordered ``bin * n_angles + angle``."""
    mat = _joseph_matrix(sys)
    if sys.psf_fwhm > 0:
        mat = _psf_matrix(sys) @ mat
    mat = mat.tocsr()
    mat.sort_indices()
    return mat


@functools.lru_cache(maxsize=8)
def _transpose(sys: SystemModel) -> sp.csr_matrix:
    return system_matrix(sys).T.tocsr()


def forward_project(img: np.ndarray, sys: SystemModel) -> np.ndarray:
    """Expected sinogram ``A x`` of shape ``(n_bins, n_angles)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != sys.image_shape:
        raise ValueError(f"image shape {img.shape} does not match geometry {sys.image_shape}")
    return (system_matrix(sys) @ img.ravel()).reshape(sys.sino_shape)


def back_project(sino: np.ndarray, sys: SystemModel) -> np.ndarray:
    """Exact adjoint ``A^T y``."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != sys.sino_shape:
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {sys.sino_shape}")
    return (_transpose(sys) @ sino.ravel()).reshape(sys.image_shape)


def add_poisson_noise(expected: np.ndarray, sys: SystemModel, rng, total_counts: float | None = None) -> np.ndarray:
    """Rescale to the count budget and replace every bin by a Poisson draw.

    ``rng`` is a :class:`~pmdm_pet.tensorcore.Rng` or numpy Generator.
    """
    expected = np.asarray(expected, dtype=np.float64)
    if (expected < 0).any():
        raise ValueError("expected sinogram has negative values")
    budget = sys.total_counts if total_counts is None else total_counts
    total = expected.sum()
    mean = expected * (budget / total) if total > 0 else expected
    return rng.poisson(mean).astype(np.float64)


def pad_offsets(shape: tuple[int, int], target: int) -> tuple[int, int]:
    if shape[0] > target or shape[1] > target:
        raise ValueError(f"cannot pad {shape} to {target}x{target}")
    return ((target - shape[0]) // 2, (target - shape[1]) // 2)


def pad_to_square(arr: np.ndarray, target: int) -> np.ndarray:
    """Zero-pad the last two axes to ``target x target``, centred."""
    arr = np.asarray(arr)
    r0, c0 = pad_offsets(arr.shape[-2:], target)
    out = np.zeros(arr.shape[:-2] + (target, target), dtype=arr.dtype)
    out[..., r0 : r0 + arr.shape[-2], c0 : c0 + arr.shape[-1]] = arr
    return out


def crop_center(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`pad_to_square`."""
    arr = np.asarray(arr)
    r0, c0 = pad_offsets(shape, arr.shape[-1])
    return arr[..., r0 : r0 + shape[0], c0 : c0 + shape[1]]
