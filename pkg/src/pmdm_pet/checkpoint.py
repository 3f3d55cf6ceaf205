"""Network checkpoints: a PMDM weight file plus a ``key=value`` sidecar.

The sidecar (same path with ``.txt`` appended) carries the architecture
hyperparameters so loading never has to guess shapes, along with any
training metadata the caller adds.
"""

from __future__ import annotations

import json
from pathlib import Path

from .nn import build_network
from .tensorcore import load_arrays, save_arrays


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".txt")


def write_keyvalue(path, items: dict) -> None:
    lines = []
    for k, v in items.items():
        text = str(v)
        if "\n" in text:
            raise ValueError(f"value for {k!r} spans lines")
        lines.append(f"{k}={text}\n")
    Path(path).write_text("".join(lines))


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(path, network, kind: str, meta: dict | None = None, optimizer=None, rng=None) -> None:
    arrays = dict(network.params.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    save_arrays(path, arrays)
    items = {"kind": kind}
    items.update({f"arch.{k}": v for k, v in network.hparams().items()})
    items.update(meta or {})
    if rng is not None:
        items["rng_state"] = json.dumps(rng.get_state(), sort_keys=True)
    write_keyvalue(sidecar_path(path), items)


def load_checkpoint(path, kind: str | None = None):
    """Return ``(network, meta, arrays)``; ``arrays`` includes optimizer state."""
    meta = read_keyvalue(sidecar_path(path))
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    arch = {k[5:]: v for k, v in meta.items() if k.startswith("arch.")}
    net = build_network(meta["kind"], arch)
    arrays = load_arrays(path)
    net.params.load_state_arrays(arrays)
    return net, meta, arrays
