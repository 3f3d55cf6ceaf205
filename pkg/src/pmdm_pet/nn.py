"""The posterior-mean estimator and the conditional denoising U-Net.

Both networks keep their weights in a :class:`ParamStore` and expose a
plain ``forward``; hyperparameters are returned by :meth:`hparams` so a
checkpoint can rebuild the exact architecture.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensorcore as tc
from .tensorcore import ParamStore, Rng, Tensor, kaiming_uniform


class _Network:
    """Shared parameter-registration helpers."""

    def __init__(self, seed: int):
        self.params = ParamStore()
        self._init_rng = Rng(seed).spawn(f"init/{type(self).__name__}")

    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        self.params.add(f"{name}.weight", kaiming_uniform(self._init_rng, (cout, cin, k, k), fan_in))
        self.params.add(f"{name}.bias", np.zeros(cout))

    def _linear(self, name: str, din: int, dout: int) -> None:
        self.params.add(f"{name}.weight", kaiming_uniform(self._init_rng, (dout, din), din))
        self.params.add(f"{name}.bias", np.zeros(dout))

    def _norm(self, name: str, channels: int) -> None:
        self.params.add(f"{name}.gamma", np.ones(channels))
        self.params.add(f"{name}.beta", np.zeros(channels))

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        return tc.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)

    def linear(self, name: str, x: Tensor) -> Tensor:
        return tc.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def parameter_count(self) -> int:
        return self.params.count()

    def fingerprint(self) -> str:
        """Hash of the weights (useful for bitwise reproducibility checks)."""
        h = hashlib.sha256()
        for name, arr in self.params.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# stage 1: sinogram -> posterior mean
# ---------------------------------------------------------------------------


def encoder_kernel_sizes(n_layers: int) -> list[int]:
    """7x7 for the first two layers, 5x5 for the next two, 3x3 after."""
    return [7 if i < 2 else 5 if i < 4 else 3 for i in range(n_layers)]


class PosteriorMeanNet(_Network):
    """Encoder-decoder regressing images from (square-padded) sinograms.

    The encoder is one full-resolution conv followed, per level, by a
    stride-2 conv that doubles the channels and a stride-1 conv. The decoder
    mirrors it with nearest 2x upsampling and 3x3 convs halving the
    channels. Every conv except the last is followed by BN and ReLU; the
    output goes through ReLU so activity stays nonnegative.
    """

    def __init__(self, grid_size: int = 64, base_width: int = 16, levels: int = 2, seed: int = 0):
        super().__init__(seed)
        if grid_size % (2**levels):
            raise ValueError(f"grid_size {grid_size} not divisible by 2**{levels}")
        self.grid_size = grid_size
        self.base_width = base_width
        self.levels = levels
        self.seed = seed
        ks = encoder_kernel_sizes(1 + 2 * levels)
        self.encoder = []  # (name, stride)
        c = base_width
        self._conv_bn("enc0", 1, c, ks[0])
        self.encoder.append(("enc0", 1))
        for lvl in range(levels):
            self._conv_bn(f"enc{2 * lvl + 1}", c, 2 * c, ks[2 * lvl + 1])
            self.encoder.append((f"enc{2 * lvl + 1}", 2))
            c *= 2
            self._conv_bn(f"enc{2 * lvl + 2}", c, c, ks[2 * lvl + 2])
            self.encoder.append((f"enc{2 * lvl + 2}", 1))
        self.decoder = []  # names, an upsample precedes every even entry
        for lvl in range(levels):
            self._conv_bn(f"dec{2 * lvl}", c, c // 2, 3)
            self._conv_bn(f"dec{2 * lvl + 1}", c // 2, c // 2, 3)
            self.decoder.append((f"dec{2 * lvl}", f"dec{2 * lvl + 1}"))
            c //= 2
        self._conv("out", c, 1, 3)

    def _conv_bn(self, name: str, cin: int, cout: int, k: int) -> None:
        self._conv(name, cin, cout, k)
        self._norm(f"{name}.bn", cout)
        self.params.add_stats(f"{name}.bn", cout)

    def _block(self, name: str, x: Tensor, stride: int, training: bool) -> Tensor:
        h = self.conv(name, x, stride)
        h = tc.batch_norm2d(
            h, self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"], self.params.stats(f"{name}.bn"), training
        )
        return tc.relu(h)

    def hparams(self) -> dict:
        return {"grid_size": self.grid_size, "base_width": self.base_width, "levels": self.levels, "seed": self.seed}

    @property
    def n_conv_layers(self) -> int:
        return len(self.encoder) + 2 * len(self.decoder) + 1

    def forward(self, s, training: bool = False) -> Tensor:
        s = tc.tensor(s)
        if s.ndim != 4 or s.shape[1] != 1 or s.shape[2:] != (self.grid_size, self.grid_size):
            raise ValueError(f"expected input (N, 1, {self.grid_size}, {self.grid_size}), got {s.shape}")
        h = s
        for name, stride in self.encoder:
            h = self._block(name, h, stride, training)
        for a, b in self.decoder:
            h = tc.nearest_upsample2x(h)
            h = self._block(a, h, 1, training)
            h = self._block(b, h, 1, training)
        return tc.relu(self.conv("out", h))

    __call__ = forward


# ---------------------------------------------------------------------------
# stage 2: conditional noise predictor
# ---------------------------------------------------------------------------


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(tc.get_default_dtype())


class DenoiserUNet(_Network):
    """U-Net predicting the noise in ``r_t`` given ``t`` and a condition image.

    The condition (posterior mean, or the padded sinogram for the ablation)
    is concatenated to ``r_t`` as a second input channel. Residual blocks
    use group norm and SiLU, with the timestep embedding added after the
    first conv of each block.
    """

    def __init__(
        self,
        grid_size: int = 32,
        base_width: int = 32,
        levels: int = 3,
        channel_mult: tuple[int, ...] | None = None,
        groups: int = 8,
        T: int = 100,
        seed: int = 0,
    ):
        super().__init__(seed)
        if grid_size % (2 ** (levels - 1)):
            raise ValueError(f"grid_size {grid_size} not divisible by 2**{levels - 1}")
        mult = tuple(channel_mult) if channel_mult else tuple(min(2**i, 2) for i in range(levels))
        if len(mult) != levels:
            raise ValueError("channel_mult must have one entry per level")
        self.grid_size = grid_size
        self.base_width = base_width
        self.levels = levels
        self.channel_mult = mult
        self.groups = groups
        self.T = T
        self.seed = seed
        self.temb_dim = base_width * 2
        w = base_width
        self._linear("temb.0", w, self.temb_dim)
        self._linear("temb.1", self.temb_dim, self.temb_dim)
        self._conv("head", 2, w, 3)
        chans = [w * m for m in mult]
        c = w
        for i, co in enumerate(chans):
            self._resblock(f"down{i}", c, co)
            c = co
            if i < levels - 1:
                self._conv(f"down{i}.pool", c, c, 3)
        self._resblock("mid", c, c)
        for i in reversed(range(levels)):
            self._resblock(f"up{i}", c + chans[i], chans[i])
            c = chans[i]
            if i > 0:
                self._conv(f"up{i}.interp", c, c, 3)
        self._norm("out.norm", c)
        self._conv("out", c, 1, 3)

    def _resblock(self, name: str, cin: int, cout: int) -> None:
        self._norm(f"{name}.norm1", cin)
        self._conv(f"{name}.conv1", cin, cout, 3)
        self._linear(f"{name}.temb", self.temb_dim, cout)
        self._norm(f"{name}.norm2", cout)
        self._conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1)

    def _gn_silu(self, name: str, x: Tensor) -> Tensor:
        return tc.silu(tc.group_norm(x, self.groups, self.params[f"{name}.gamma"], self.params[f"{name}.beta"]))

    def _apply_resblock(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv(f"{name}.conv1", self._gn_silu(f"{name}.norm1", x))
        proj = self.linear(f"{name}.temb", temb)
        h = h + proj.reshape(proj.shape[0], proj.shape[1], 1, 1)
        h = self.conv(f"{name}.conv2", self._gn_silu(f"{name}.norm2", h))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.weight" in self.params else x
        return h + skip

    def hparams(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "base_width": self.base_width,
            "levels": self.levels,
            "channel_mult": ",".join(str(m) for m in self.channel_mult),
            "groups": self.groups,
            "T": self.T,
            "seed": self.seed,
        }

    def embed(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return tc.tensor(timestep_embedding(t, self.base_width))

    def forward(self, r_t, t, cond) -> Tensor:
        r_t, cond = tc.tensor(r_t), tc.tensor(cond)
        if r_t.shape != cond.shape:
            raise ValueError(f"r_t {r_t.shape} and condition {cond.shape} must have the same shape")
        if r_t.ndim != 4 or r_t.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {r_t.shape}")
        n = r_t.shape[0]
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        temb = self.linear("temb.1", tc.silu(self.linear("temb.0", self.embed(t))))
        temb = tc.silu(temb)
        h = self.conv("head", tc.concat_channels([r_t, cond]))
        skips = []
        for i in range(self.levels):
            h = self._apply_resblock(f"down{i}", h, temb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.conv(f"down{i}.pool", h, stride=2)
        h = self._apply_resblock("mid", h, temb)
        for i in reversed(range(self.levels)):
            h = self._apply_resblock(f"up{i}", tc.concat_channels([h, skips[i]]), temb)
            if i > 0:
                h = self.conv(f"up{i}.interp", tc.nearest_upsample2x(h))
        return self.conv("out", self._gn_silu("out.norm", h))

    __call__ = forward


def build_network(kind: str, hparams: dict):
    hp = dict(hparams)
    if kind == "estimator":
        return PosteriorMeanNet(**{k: int(v) for k, v in hp.items()})
    if kind == "denoiser":
        mult = hp.pop("channel_mult", None)
        if isinstance(mult, str):
            mult = tuple(int(m) for m in mult.split(",") if m)
        return DenoiserUNet(channel_mult=mult, **{k: int(v) for k, v in hp.items()})
    raise ValueError(f"unknown network kind {kind!r}")
