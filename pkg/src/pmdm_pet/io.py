"""On-disk formats: PIMG images, PSIN sinograms, the dataset manifest and
binary PGM previews. All binary fields are little-endian."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIMG_MAGIC = b"PIMG"
PSIN_MAGIC = b"PSIN"
FORMAT_VERSION = 1
KINDS = ("expected", "counts")


@dataclass
class ImageGrid:
    values: np.ndarray
    pixel_size: float = 2.0

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class Sinogram:
    """``values`` is ``(n_bins, n_angles)``."""

    values: np.ndarray
    kind: str = "expected"
    bin_spacing: float = 2.0
    pixel_size: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sinogram kind must be one of {KINDS}, got {self.kind!r}")

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_angles(self) -> int:
        return self.values.shape[1]


def _payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_pimg(path, img: ImageGrid | np.ndarray, pixel_size: float = 2.0) -> None:
    if not isinstance(img, ImageGrid):
        img = ImageGrid(np.asarray(img), pixel_size)
    h, w = img.values.shape
    head = PIMG_MAGIC + struct.pack("<IIIf", FORMAT_VERSION, w, h, img.pixel_size)
    Path(path).write_bytes(head + _payload(img.values))


def read_pimg(path) -> ImageGrid:
    buf = Path(path).read_bytes()
    if buf[:4] != PIMG_MAGIC:
        raise ValueError(f"{path}: not a PIMG file")
    version, w, h, px = struct.unpack_from("<IIIf", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported PIMG version {version}")
    vals = np.frombuffer(buf, dtype="<f4", count=w * h, offset=20).reshape(h, w).astype(np.float32)
    return ImageGrid(vals, float(px))


def write_psin(path, sino: Sinogram) -> None:
    nb, na = sino.values.shape
    head = PSIN_MAGIC + struct.pack(
        "<IIIfIIfB", FORMAT_VERSION, na, nb, sino.pixel_size, na, nb, sino.bin_spacing, KINDS.index(sino.kind)
    )
    Path(path).write_bytes(head + _payload(sino.values))


_PSIN_HEAD = struct.calcsize("<IIIfIIfB")


def read_psin(path) -> Sinogram:
    buf = Path(path).read_bytes()
    if buf[:4] != PSIN_MAGIC:
        raise ValueError(f"{path}: not a PSIN file")
    version, w, h, px, na, nb, bs, kind = struct.unpack_from("<IIIfIIfB", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported PSIN version {version}")
    if (w, h) != (na, nb):
        raise ValueError(f"{path}: inconsistent sinogram header")
    vals = np.frombuffer(buf, dtype="<f4", count=na * nb, offset=4 + _PSIN_HEAD).reshape(nb, na).astype(np.float32)
    return Sinogram(vals, KINDS[kind], float(bs), float(px))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    split: str
    phantom_id: int
    angle: float
    image_path: str
    sino_path: str = "-"

    @property
    def stem(self) -> str:
        return Path(self.image_path).stem


def write_manifest(path, records) -> None:
    lines = [f"{r.split}\t{r.phantom_id}\t{r.angle!r}\t{r.image_path}\t{r.sino_path}\n" for r in records]
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
        split, pid, angle, img, sino = parts
        out.append(ManifestRecord(split, int(pid), float(angle), img, sino))
    return out


# ---------------------------------------------------------------------------
# previews
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray, vmax: float | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo = 0.0
    hi = float(img.max()) if vmax is None else float(vmax)
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(np.clip((img - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray, vmax: float | None = None) -> None:
    """Binary (P5) 8-bit portable graymap."""
    data = img if img.dtype == np.uint8 else to_uint8(img, vmax)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, size, _maxval, data = buf.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in size.split())
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)
