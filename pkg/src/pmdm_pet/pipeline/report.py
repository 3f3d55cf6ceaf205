"""Plain-text reports and montage images for the evaluate stage."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..checkpoint import read_keyvalue, sidecar_path
from ..io import to_uint8
from ..metrics import Decomposition, EvaluationReport
from ..nn import build_network
from ..projector import pad_to_square


def _num(x: float, digits: int = 4) -> str:
    if math.isinf(x):
        return "inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.{digits}f}"


def write_history(path, columns: dict[str, list[float]]) -> None:
    names = list(columns)
    n = max((len(v) for v in columns.values()), default=0)
    lines = ["epoch\t" + "\t".join(names)]
    for i in range(n):
        vals = [repr(columns[k][i]) if i < len(columns[k]) else "-" for k in names]
        lines.append(f"{i + 1}\t" + "\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def write_per_slice(path, reports: list[EvaluationReport]) -> None:
    lines = ["method\tslice\tpsnr\tssim\tnrmse"]
    for rep in reports:
        for sid, p, s, n in zip(rep.slice_ids, rep.psnr, rep.ssim, rep.nrmse):
            lines.append(f"{rep.method}\t{sid}\t{p!r}\t{s!r}\t{n!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def parameter_counts(checkpoint_dir) -> dict[str, int]:
    """Trainable-parameter counts of every checkpoint in ``checkpoint_dir``."""
    out = {}
    for path in sorted(Path(checkpoint_dir).glob("*.pmdm")):
        side = sidecar_path(path)
        if not side.exists():
            continue
        meta = read_keyvalue(side)
        arch = {k[5:]: v for k, v in meta.items() if k.startswith("arch.")}
        out[path.stem] = build_network(meta["kind"], arch).parameter_count()
    return out


def summary(reports: list[EvaluationReport], decomposition: Decomposition | None = None, params=None) -> str:
    """Table of mean +/- std PSNR and SSIM and mean NRMSE, one row per method."""
    width = max(len("method"), *(len(r.method) for r in reports))
    lines = [
        f"slices: {len(reports[0])}",
        "",
        f"{'method':<{width}}  {'PSNR (dB)':>17}  {'SSIM':>15}  {'NRMSE':>7}",
    ]
    for rep in reports:
        pm, ps = rep.psnr_stats
        sm, ss = rep.ssim_stats
        lines.append(
            f"{rep.method:<{width}}  {_num(pm, 2):>8} +/- {_num(ps, 2):<4}  "
            f"{_num(sm):>6} +/- {_num(ss):<6}  {_num(rep.nrmse_mean):>7}"
        )
    if decomposition is not None:
        d = decomposition
        lines += [
            "",
            "distortion decomposition (per-pixel mean squared error)",
            f"  reference vs posterior mean   {d.mmse:.6e}",
            f"  posterior mean vs sample      {d.transport:.6e}",
            f"  reference vs sample           {d.total:.6e}",
            f"  relative residual             {d.residual:.4f}",
        ]
    if params:
        lines += ["", "trainable parameters"]
        lines += [f"  {name:<28}{count:>10d}" for name, count in params.items()]
    return "\n".join(lines) + "\n"


def montage(sinogram, reference, predictions, grid_size: int, gap: int = 2) -> np.ndarray:
    """Two-row 8-bit montage.

    Top row: sinogram, reference, each prediction. Bottom row under each
    prediction: its squared-error map. Images share the reference's scale;
    error maps share the largest error.
    """
    g = grid_size
    sino = np.asarray(sinogram, dtype=np.float64)
    keep = min(g, sino.shape[0])
    start = (sino.shape[0] - keep) // 2
    sino = pad_to_square(sino[start : start + keep, : min(g, sino.shape[1])], g)
    ref = np.asarray(reference, dtype=np.float64)
    errs = [(ref - np.asarray(p, dtype=np.float64)) ** 2 for p in predictions]
    emax = max((float(e.max()) for e in errs), default=0.0)
    vmax = float(ref.max())
    n = 2 + len(predictions)
    canvas = np.zeros((2 * g + gap, n * g + (n - 1) * gap), dtype=np.uint8)

    def put(row, col, tile):
        y, x = row * (g + gap), col * (g + gap)
        canvas[y : y + g, x : x + g] = tile

    put(0, 0, to_uint8(sino))
    put(0, 1, to_uint8(ref, vmax))
    for i, (p, e) in enumerate(zip(predictions, errs)):
        put(0, 2 + i, to_uint8(p, vmax))
        put(1, 2 + i, to_uint8(e, emax))
    return canvas
