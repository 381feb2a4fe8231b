"""CAN-ResBlocks and the CANNet U-Net, with manual backward passes.

All feature maps are batched channels-last arrays ``(N, H, W, C)``. Every
layer keeps the cache of its last forward call and accumulates parameter
gradients into ``layer.grads`` on ``backward``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from .numerics import SeededRng, fold, unfold
from .pwac import CanConvParams, PartitionTable, build_partition, canconv_backward, canconv_forward
from .srp import KMeansConfig, srp_partition

Partitioner = Callable[[np.ndarray, int, KMeansConfig], np.ndarray]


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, "Layer"] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.params.items():
            yield prefix + name, arr
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(a) for n, a in self.params.items()}
        for child in self.children.values():
            child.zero_grad()

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        self.grads[name] = self.grads[name] + g.astype(self.params[name].dtype, copy=False)


class Conv2d(Layer):
    """Standard zero-padded convolution, weights stored as ``(k*k*C_in, C_out)``."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 rng: SeededRng | None = None, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        rng = rng or SeededRng(0)
        fan_in = k * k * c_in
        bound = np.sqrt(6.0 / fan_in)
        self.k, self.stride, self.c_in, self.c_out = k, stride, c_in, c_out
        self.params = {
            "w": rng.uniform(-bound, bound, size=(fan_in, c_out)).astype(dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }
        self.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c}")
        if self.stride == 2 and (h % 2 or w % 2):
            raise ValueError(f"stride-2 convolution needs even extents, got {h}x{w}")
        p = unfold(x, self.k)
        if self.stride == 2:
            p = p[:, ::2, ::2]
        ho, wo = p.shape[1:3]
        p = p.reshape(n * ho * wo, -1)
        self._cache = (p, x.shape, (n, ho, wo))
        y = p @ self.params["w"].astype(x.dtype, copy=False) + self.params["b"].astype(x.dtype, copy=False)
        return y.reshape(n, ho, wo, self.c_out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        p, xshape, (n, ho, wo) = self._cache
        dyf = dy.reshape(-1, self.c_out)
        self._accumulate("w", p.T @ dyf)
        self._accumulate("b", dyf.sum(axis=0))
        dp = (dyf @ self.params["w"].astype(dy.dtype, copy=False).T).reshape(n, ho, wo, -1)
        if self.stride == 2:
            full = np.zeros((*xshape[:3], dp.shape[-1]), dtype=dp.dtype)
            full[:, ::2, ::2] = dp
            dp = full
        return fold(dp, self.k, self.c_in)


class Upsample(Layer):
    """Nearest-neighbour 2x upsampling followed by a 1x1 convolution halving channels.

    The 1x1 convolution is applied before the repeat; both orders give the
    same values.
    """

    def __init__(self, c: int, rng: SeededRng | None = None, dtype=np.float32):
        super().__init__()
        if c % 2:
            raise ValueError(f"upsample needs an even channel count, got {c}")
        rng = rng or SeededRng(0)
        bound = np.sqrt(6.0 / c)
        self.c = c
        self.params = {
            "w": rng.uniform(-bound, bound, size=(c, c // 2)).astype(dtype),
            "b": np.zeros(c // 2, dtype=dtype),
        }
        self.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.c:
            raise ValueError(f"upsample expects {self.c} channels, got {x.shape[-1]}")
        self._x = x
        z = x @ self.params["w"].astype(x.dtype, copy=False) + self.params["b"].astype(x.dtype, copy=False)
        return z.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        n, h, w, c = x.shape
        dz = dy.reshape(n, h, 2, w, 2, c // 2).sum(axis=(2, 4))
        self._accumulate("w", x.reshape(-1, c).T @ dz.reshape(-1, c // 2))
        self._accumulate("b", dz.sum(axis=(0, 1, 2)))
        return dz @ self.params["w"].astype(dy.dtype, copy=False).T


class CanConv(Layer):
    def __init__(self, c_in: int, c_out: int, k: int = 3, eta: float = 0.005,
                 rng: SeededRng | None = None, dtype=np.float32):
        super().__init__()
        self.conv = CanConvParams.init(c_in, c_out, k, eta, rng=rng, dtype=dtype)
        self.params = self.conv.arrays()
        self.zero_grad()

    def view(self, dtype) -> CanConvParams:
        arrays = {n: a.astype(dtype, copy=False) for n, a in self.params.items()}
        return CanConvParams(**arrays, k=self.conv.k, eta=self.conv.eta)

    def forward(self, x: np.ndarray, index: np.ndarray, training: bool = False,
                table: PartitionTable | None = None) -> np.ndarray:
        params = self.view(x.dtype)
        y, self._cache = canconv_forward(x, index, params, training=training, table=table)
        self._params = params
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        grads = canconv_backward(dy, self._cache, self._params)
        for name, g in grads.params.items():
            self._accumulate(name, g)
        return grads.dx


class CanResBlock(Layer):
    """``y = x + conv2(relu(conv1(x, I)), I)`` with a single shared index matrix."""

    def __init__(self, c: int, k: int = 3, eta: float = 0.005,
                 rng: SeededRng | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or SeededRng(0)
        self.conv1 = CanConv(c, c, k, eta, rng=rng.spawn(1), dtype=dtype)
        self.conv2 = CanConv(c, c, k, eta, rng=rng.spawn(2), dtype=dtype)
        self.children = {"conv1": self.conv1, "conv2": self.conv2}
        self.k = k

    def partition(self, x: np.ndarray, cfg: KMeansConfig,
                  partitioner: Partitioner = srp_partition) -> np.ndarray:
        return np.stack([partitioner(xi, self.k, cfg) for xi in x])

    def forward(self, x: np.ndarray, index: np.ndarray | None = None,
                cfg: KMeansConfig | None = None, training: bool = False,
                partitioner: Partitioner = srp_partition) -> tuple[np.ndarray, np.ndarray]:
        if index is None:
            if cfg is None:
                raise ValueError("need either an index matrix or a K-Means config")
            index = self.partition(x, cfg, partitioner)
        table = build_partition(index)
        a = self.conv1.forward(x, index, training, table)
        self._mask = a > 0
        y = x + self.conv2.forward(a * self._mask, index, training, table)
        return y, index

    def backward(self, dy: np.ndarray) -> np.ndarray:
        da = self.conv2.backward(dy) * self._mask
        return dy + self.conv1.backward(da)


# -- bicubic upsampling of the LRMS input --------------------------------------

def _cubic(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1, ((a + 2) * t - (a + 3)) * t * t + 1,
        np.where(t < 2, (((t - 5) * t + 8) * t - 4) * a, 0.0),
    )


def bicubic_matrix(n_in: int, ratio: int) -> np.ndarray:
    """``(n_in*ratio, n_in)`` interpolation matrix (Keys a=-0.75, half-pixel centres, clamped edges)."""
    n_out = n_in * ratio
    src = (np.arange(n_out) + 0.5) / ratio - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        j = base + off
        wgt = _cubic(src - j)
        np.add.at(m, (np.arange(n_out), np.clip(j, 0, n_in - 1)), wgt)
    return m


def bicubic_upsample(x: np.ndarray, ratio: int = 4) -> np.ndarray:
    """Upsample ``(..., h, w, C)`` by an integer ratio."""
    *_, h, w, _ = x.shape
    mh = bicubic_matrix(h, ratio).astype(x.dtype)
    mw = bicubic_matrix(w, ratio).astype(x.dtype)
    return np.einsum("Hh,...hwc,Ww->...HWc", mh, x, mw)


# -- CANNet ---------------------------------------------------------------------

@dataclass
class CanNetConfig:
    ms_channels: int = 4
    levels: int = 3
    base_channels: int = 32
    k: int = 3
    k_train: int = 32
    eta: float = 0.005
    ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.ms_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def in_channels(self) -> int:
        return self.ms_channels + 1

    def to_dict(self) -> dict:
        return asdict(self)


class CanNet(Layer):
    """U-Net of CAN-ResBlocks with detail injection.

    Level ``l`` runs at ``H/2**l`` with ``base*2**l`` channels. Each level has a
    head block that computes its index matrix; the tail block on the way back
    up reuses that same matrix object.
    """

    def __init__(self, config: CanNetConfig, dtype=np.float32):
        super().__init__()
        self.config = cfg = config
        rng = SeededRng(cfg.seed)
        ch = [cfg.base_channels * 2 ** lv for lv in range(cfg.levels)]
        self.head_conv = Conv2d(cfg.in_channels, ch[0], 3, rng=rng.spawn(1), dtype=dtype)
        self.head_blocks = [CanResBlock(c, cfg.k, cfg.eta, rng.spawn(100 + i), dtype)
                            for i, c in enumerate(ch)]
        self.downs = [Conv2d(ch[i], ch[i + 1], 3, stride=2, rng=rng.spawn(200 + i), dtype=dtype)
                      for i in range(cfg.levels - 1)]
        self.ups = [Upsample(ch[i + 1], rng.spawn(300 + i), dtype) for i in range(cfg.levels - 1)]
        self.merges = [Conv2d(2 * ch[i], ch[i], 1, rng=rng.spawn(400 + i), dtype=dtype)
                       for i in range(cfg.levels - 1)]
        self.tail_blocks = [CanResBlock(ch[i], cfg.k, cfg.eta, rng.spawn(500 + i), dtype)
                            for i in range(cfg.levels - 1)]
        self.tail_conv = Conv2d(ch[0], cfg.ms_channels, 3, rng=rng.spawn(600), dtype=dtype)
        # Start from the pure detail-injection output (upsampled LRMS).
        self.tail_conv.params["w"][...] = 0
        self.children = {"head_conv": self.head_conv}
        for i, b in enumerate(self.head_blocks):
            self.children[f"head_blocks.{i}"] = b
        for name, layers in (("downs", self.downs), ("ups", self.ups),
                             ("merges", self.merges), ("tail_blocks", self.tail_blocks)):
            for i, layer in enumerate(layers):
                self.children[f"{name}.{i}"] = layer
        self.children["tail_conv"] = self.tail_conv
        self.partitioner: Partitioner = srp_partition
        self.last_indices: list[np.ndarray] | None = None

    def kmeans_config(self, level: int, n_clusters: int) -> KMeansConfig:
        return KMeansConfig(K=n_clusters, seed=self.config.seed * 7919 + level)

    def forward(self, pan: np.ndarray, lrms: np.ndarray, indices: list | None = None,
                n_clusters: int | None = None, training: bool = False) -> np.ndarray:
        """HRMS prediction ``(N, H, W, C_ms)`` from ``pan (N, H, W, 1)`` and ``lrms (N, H/r, W/r, C_ms)``.

        ``indices`` (one ``(N, H_l, W_l)`` array per level) skips clustering.
        The indices actually used are left in ``self.last_indices``.
        """
        cfg = self.config
        if pan.ndim == 3:
            pan, lrms = pan[None], lrms[None]
        n, h, w, one = pan.shape
        if one != 1 or lrms.shape[-1] != cfg.ms_channels:
            raise ValueError("pan must have 1 band and lrms ms_channels bands")
        if lrms.shape[:3] != (n, h // cfg.ratio, w // cfg.ratio) or h % cfg.ratio or w % cfg.ratio:
            raise ValueError(f"lrms {lrms.shape} does not match pan {pan.shape} at ratio {cfg.ratio}")
        if h % 2 ** (cfg.levels - 1) or w % 2 ** (cfg.levels - 1):
            raise ValueError(f"spatial size {h}x{w} not divisible by 2**(levels-1)")
        n_clusters = n_clusters or cfg.k_train
        lms = bicubic_upsample(lrms, cfg.ratio).astype(pan.dtype)
        x = self.head_conv.forward(np.concatenate([pan, lms], axis=-1))
        used, skips = [], []
        for lv, block in enumerate(self.head_blocks):
            given = None if indices is None else indices[lv]
            kcfg = self.kmeans_config(lv, n_clusters)
            x, idx = block.forward(x, given, kcfg, training, self.partitioner)
            used.append(idx)
            if lv < cfg.levels - 1:
                skips.append(x)
                x = self.downs[lv].forward(x)
        for lv in range(cfg.levels - 2, -1, -1):
            x = self.ups[lv].forward(x)
            x = self.merges[lv].forward(np.concatenate([x, skips[lv]], axis=-1))
            x, _ = self.tail_blocks[lv].forward(x, used[lv], training=training)
        self.last_indices = used
        return self.tail_conv.forward(x) + lms

    def backward(self, dout: np.ndarray) -> None:
        levels = self.config.levels
        dx = self.tail_conv.backward(dout)
        dskips = [None] * (levels - 1)
        for lv in range(levels - 1):
            dx = self.tail_blocks[lv].backward(dx)
            dcat = self.merges[lv].backward(dx)
            c = dcat.shape[-1] // 2
            dskips[lv] = dcat[..., c:]
            dx = self.ups[lv].backward(dcat[..., :c])
        for lv in range(levels - 1, -1, -1):
            dx = self.head_blocks[lv].backward(dx)
            if lv > 0:
                dx = self.downs[lv - 1].backward(dx) + dskips[lv - 1]
        self.head_conv.backward(dx)
