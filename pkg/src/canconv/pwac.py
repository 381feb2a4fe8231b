"""Partition-wise adaptive convolution and its hand-written backward pass.

Every cluster ``i`` gets a kernel ``W_i`` and bias ``b_i`` generated from the
centroid ``c_i`` of the unfolded neighborhoods of its member pixels:

* trunk: ``h = leaky(c @ trunk_w + trunk_b)`` (width ``C_in``)
* heads: ``w_cin, w_s, w_cout = sigmoid(h @ head_*_w + head_*_b)``
* kernel: ``W_i[tap*C_in + ch, o] = w_cin[ch] * w_s[tap] * w_cout[o] * W[ch, tap, o]``
* bias: ``b_i = leaky(c @ bias_w1 + bias_b1) @ bias_w2 + bias_b2``

and every member pixel is convolved as ``y = p @ W_i + b_i``. Cluster
assignment is treated as a constant in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, fold, leaky_relu, sigmoid, unfold

LEAKY_SLOPE = 0.2

PARAM_NAMES = (
    "W",
    "trunk_w", "trunk_b",
    "head_cin_w", "head_cin_b",
    "head_s_w", "head_s_b",
    "head_cout_w", "head_cout_b",
    "bias_w1", "bias_b1",
    "bias_w2", "bias_b2",
)


def kaiming_uniform(rng: SeededRng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class CanConvParams:
    W: np.ndarray  # (C_in, k*k, C_out)
    trunk_w: np.ndarray  # (k*k*C_in, C_in)
    trunk_b: np.ndarray
    head_cin_w: np.ndarray  # (C_in, C_in)
    head_cin_b: np.ndarray
    head_s_w: np.ndarray  # (C_in, k*k)
    head_s_b: np.ndarray
    head_cout_w: np.ndarray  # (C_in, C_out)
    head_cout_b: np.ndarray
    bias_w1: np.ndarray  # (k*k*C_in, C_in)
    bias_b1: np.ndarray
    bias_w2: np.ndarray  # (C_in, C_out)
    bias_b2: np.ndarray
    k: int = 3
    eta: float = 0.005

    def __post_init__(self):
        c_in, kk, c_out = self.W.shape
        if kk != self.k * self.k:
            raise ValueError(f"global kernel has {kk} taps, expected {self.k ** 2}")
        d = kk * c_in
        want = {
            "trunk_w": (d, c_in), "trunk_b": (c_in,),
            "head_cin_w": (c_in, c_in), "head_cin_b": (c_in,),
            "head_s_w": (c_in, kk), "head_s_b": (kk,),
            "head_cout_w": (c_in, c_out), "head_cout_b": (c_out,),
            "bias_w1": (d, c_in), "bias_b1": (c_in,),
            "bias_w2": (c_in, c_out), "bias_b2": (c_out,),
        }
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")

    @property
    def c_in(self) -> int:
        return self.W.shape[0]

    @property
    def c_out(self) -> int:
        return self.W.shape[2]

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int = 3, eta: float = 0.005,
             rng: SeededRng | None = None, dtype=np.float32) -> "CanConvParams":
        rng = rng or SeededRng(0)
        d = k * k * c_in
        ku = lambda shape, fan: kaiming_uniform(rng, shape, fan, dtype)  # noqa: E731
        zeros = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(
            W=ku((c_in, k * k, c_out), d),
            trunk_w=ku((d, c_in), d), trunk_b=zeros(c_in),
            head_cin_w=ku((c_in, c_in), c_in), head_cin_b=zeros(c_in),
            head_s_w=ku((c_in, k * k), c_in), head_s_b=zeros(k * k),
            head_cout_w=ku((c_in, c_out), c_in), head_cout_b=zeros(c_out),
            bias_w1=ku((d, c_in), d), bias_b1=zeros(c_in),
            bias_w2=zeros(c_in, c_out), bias_b2=zeros(c_out),
            k=k, eta=eta,
        )

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def astype(self, dtype) -> "CanConvParams":
        return CanConvParams(**{n: a.astype(dtype) for n, a in self.arrays().items()},
                             k=self.k, eta=self.eta)


@dataclass
class CanConvGrads:
    dx: np.ndarray
    params: dict  # name -> gradient array, same keys/shapes as CanConvParams.arrays()


@dataclass
class PartitionTable:
    """Cluster membership for a batch of index matrices.

    Clusters of different samples are kept apart: group ``g`` belongs to sample
    ``sample[g]`` and carries original id ``cluster_id[g]``. Members are listed
    in row-major scan order.
    """
    shape: tuple  # (N, H, W)
    group: np.ndarray  # (N*H*W,) group of each pixel
    order: np.ndarray  # pixels sorted by group, stable
    starts: np.ndarray  # (G+1,) offsets into ``order``
    sample: np.ndarray  # (G,)
    cluster_id: np.ndarray  # (G,)

    @property
    def n_groups(self) -> int:
        return len(self.sample)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def members(self, g: int) -> np.ndarray:
        """Flat pixel indices (into ``N*H*W``) of group ``g``."""
        return self.order[self.starts[g]:self.starts[g + 1]]

    def coordinates(self, g: int) -> np.ndarray:
        """``(n, y, x)`` coordinates of group ``g``'s members."""
        return np.stack(np.unravel_index(self.members(g), self.shape), axis=1)

    def to_index(self) -> np.ndarray:
        out = np.empty(int(np.prod(self.shape)), dtype=np.int64)
        for g in range(self.n_groups):
            out[self.members(g)] = self.cluster_id[g]
        return out.reshape(self.shape)


def build_partition(index: np.ndarray) -> PartitionTable:
    """Group pixels by (sample, cluster id). Accepts ``(H, W)`` or ``(N, H, W)``."""
    index = np.asarray(index)
    if index.ndim == 2:
        index = index[None]
    if index.ndim != 3:
        raise ValueError("index matrix must be (H, W) or (N, H, W)")
    if index.size and index.min() < 0:
        raise ValueError("cluster ids must be non-negative")
    n, h, w = index.shape
    span = int(index.max()) + 1 if index.size else 1
    key = (np.arange(n)[:, None, None] * span + index).ravel()
    uniq, group = np.unique(key, return_inverse=True)
    group = group.ravel()
    order = np.argsort(group, kind="stable")
    starts = np.concatenate([[0], np.cumsum(np.bincount(group, minlength=len(uniq)))])
    return PartitionTable((n, h, w), group, order, starts, uniq // span, uniq % span)


def compute_centroids(p: np.ndarray, table: PartitionTable, eta: float,
                      training: bool, p_sorted: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Cluster centroids of unfolded rows ``p`` (``(N*H*W, D)``).

    Returns ``(centroids (G, D), fallback (G,) bool)``. With ``training`` set,
    clusters smaller than ``eta*H*W`` use their sample's global mean instead.
    """
    n, h, w = table.shape
    hw = h * w
    counts = table.counts
    if np.any(counts == 0):
        raise RuntimeError("partition table has an empty cluster")
    cent = np.empty((table.n_groups, p.shape[1]), dtype=p.dtype)
    fallback = np.zeros(table.n_groups, dtype=bool)
    if training:
        fallback = counts < eta * hw
    if p_sorted is None:
        p_sorted = p[table.order]
    global_mean = {}
    for g in range(table.n_groups):
        if fallback[g]:
            s = int(table.sample[g])
            if s not in global_mean:
                global_mean[s] = p[s * hw:(s + 1) * hw].mean(axis=0)
            cent[g] = global_mean[s]
        else:
            cent[g] = p_sorted[table.starts[g]:table.starts[g + 1]].mean(axis=0)
    return cent, fallback


@dataclass
class _Generated:
    c: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    w_cin: np.ndarray
    w_s: np.ndarray
    w_cout: np.ndarray
    g_pre: np.ndarray
    g: np.ndarray
    kernels: np.ndarray  # (G, D, C_out)
    biases: np.ndarray  # (G, C_out)


def _heads(c: np.ndarray, params: CanConvParams, override=None):
    h_pre = c @ params.trunk_w + params.trunk_b
    h = leaky_relu(h_pre, LEAKY_SLOPE)
    if override is not None:
        g = len(c)
        w_cin, w_s, w_cout = (np.broadcast_to(np.asarray(v, dtype=c.dtype), (g, len(v))).copy()
                              for v in override)
    else:
        w_cin = sigmoid(h @ params.head_cin_w + params.head_cin_b)
        w_s = sigmoid(h @ params.head_s_w + params.head_s_b)
        w_cout = sigmoid(h @ params.head_cout_w + params.head_cout_b)
    return h_pre, h, w_cin, w_s, w_cout


def _assemble_kernels(w_cin, w_s, w_cout, W):
    # (G, C_in, k*k, C_out) modulation, then reorder rows to (tap, channel).
    mod = w_cin[:, :, None, None] * w_s[:, None, :, None] * w_cout[:, None, None, :]
    k_full = mod * W[None]
    g, c_in, kk, c_out = k_full.shape
    return k_full.transpose(0, 2, 1, 3).reshape(g, kk * c_in, c_out)


def _generate(c: np.ndarray, params: CanConvParams, override=None) -> _Generated:
    h_pre, h, w_cin, w_s, w_cout = _heads(c, params, override)
    kernels = _assemble_kernels(w_cin, w_s, w_cout, params.W)
    g_pre = c @ params.bias_w1 + params.bias_b1
    g = leaky_relu(g_pre, LEAKY_SLOPE)
    biases = g @ params.bias_w2 + params.bias_b2
    return _Generated(c, h_pre, h, w_cin, w_s, w_cout, g_pre, g, kernels, biases)


def generate_kernel(c: np.ndarray, params: CanConvParams, heads_override=None) -> np.ndarray:
    """Kernel ``(k*k*C_in, C_out)`` for one centroid ``c`` of length ``k*k*C_in``.

    ``heads_override`` replaces the three sigmoid head outputs with fixed
    vectors ``(w_cin, w_s, w_cout)``; meant for tests.
    """
    c = np.asarray(c)
    if c.shape != (params.k * params.k * params.c_in,):
        raise ValueError(f"centroid has shape {c.shape}")
    return _generate(c[None], params, heads_override).kernels[0]


def generate_bias(c: np.ndarray, params: CanConvParams) -> np.ndarray:
    c = np.asarray(c)
    if c.shape != (params.k * params.k * params.c_in,):
        raise ValueError(f"centroid has shape {c.shape}")
    g = leaky_relu(c[None] @ params.bias_w1 + params.bias_b1, LEAKY_SLOPE)
    return (g @ params.bias_w2 + params.bias_b2)[0]


@dataclass
class ForwardCache:
    x_shape: tuple
    p_sorted: np.ndarray  # (P, D) unfolded rows in cluster order
    table: PartitionTable
    fallback: np.ndarray
    gen: _Generated
    heads_override: object = None
    token: object = field(default_factory=object)
    consumed: bool = False


def canconv_forward(x: np.ndarray, index: np.ndarray, params: CanConvParams,
                    training: bool = False, heads_override=None,
                    table: PartitionTable | None = None):
    """Apply CANConv to ``x`` of shape ``(H, W, C_in)`` or ``(N, H, W, C_in)``.

    ``index`` holds cluster ids per pixel with matching leading shape. Returns
    ``(y, cache)``; ``y`` has the same leading shape as ``x``.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    idx = np.asarray(index)
    idx = idx[None] if idx.ndim == 2 else idx
    n, h, w, c_in = xb.shape
    if c_in != params.c_in:
        raise ValueError(f"input has {c_in} channels, params expect {params.c_in}")
    if idx.shape != (n, h, w):
        raise ValueError(f"index shape {idx.shape} does not match input {xb.shape[:3]}")
    if table is None:
        table = build_partition(idx)
    elif table.shape != (n, h, w):
        raise ValueError("partition table does not match input")
    p = unfold(xb, params.k).reshape(n * h * w, -1)
    # One gather into cluster-contiguous order, one GEMM per cluster.
    p_sorted = p[table.order]
    cent, fallback = compute_centroids(p, table, params.eta, training, p_sorted)
    gen = _generate(cent, params, heads_override)
    y_sorted = np.empty((n * h * w, params.c_out), dtype=p.dtype)
    st = table.starts
    for gi in range(table.n_groups):
        y_sorted[st[gi]:st[gi + 1]] = p_sorted[st[gi]:st[gi + 1]] @ gen.kernels[gi] + gen.biases[gi]
    y = np.empty_like(y_sorted)
    y[table.order] = y_sorted
    y = y.reshape(n, h, w, params.c_out)
    cache = ForwardCache(xb.shape, p_sorted, table, fallback, gen, heads_override)
    return (y[0] if single else y), cache


def canconv_backward(dy: np.ndarray, cache: ForwardCache, params: CanConvParams) -> CanConvGrads:
    """Gradients of a CANConv layer given the upstream gradient ``dy``.

    ``dL/dc_i`` collects the kernel path ``sum p^T dy`` through ``dW_i/dc_i``
    and the bias path ``sum dy`` through ``db_i/dc_i``; each pixel then gets
    ``dy W_i^T`` plus ``dL/dc_i / |S_i|`` (or ``/ (H*W)`` over the whole sample
    when the global-centroid fallback was used). Cluster ids get no gradient.
    """
    if cache.consumed:
        raise RuntimeError("stale forward cache: backward already ran on it")
    n, h, w, c_in = cache.x_shape
    if dy.shape[-3:] != (h, w, params.c_out) or dy.size != n * h * w * params.c_out:
        raise ValueError(f"dy shape {dy.shape} does not match forward output")
    cache.consumed = True
    table, gen, p_sorted = cache.table, cache.gen, cache.p_sorted
    dt = p_sorted.dtype
    k, kk = params.k, params.k * params.k
    dyf = dy.reshape(n * h * w, params.c_out).astype(dt, copy=False)
    G = table.n_groups
    order, st = table.order, table.starts
    dy_sorted = dyf[order]
    dp_sorted = np.empty_like(p_sorted)
    d_kernels = np.empty_like(gen.kernels)
    d_biases = np.empty((G, params.c_out), dtype=dt)
    for gi in range(G):
        sl = slice(st[gi], st[gi + 1])
        d_kernels[gi] = p_sorted[sl].T @ dy_sorted[sl]
        d_biases[gi] = dy_sorted[sl].sum(axis=0)
        dp_sorted[sl] = dy_sorted[sl] @ gen.kernels[gi].T

    # Kernel path: undo the (tap, channel) row order, then the modulation.
    dk_full = d_kernels.reshape(G, kk, c_in, params.c_out).transpose(0, 2, 1, 3)
    w_cin, w_s, w_cout = gen.w_cin, gen.w_s, gen.w_cout
    mod = w_cin[:, :, None, None] * w_s[:, None, :, None] * w_cout[:, None, None, :]
    grads = {}
    grads["W"] = (dk_full * mod).sum(axis=0)
    d_mod = dk_full * params.W[None]
    # Contract d_mod against two of the three attention vectors at a time.
    by_out = (d_mod @ w_cout[:, None, :, None])[..., 0]  # (G, C_in, k*k)
    d_wcin = (by_out @ w_s[:, :, None])[..., 0]
    d_ws = (w_cin[:, None, :] @ by_out)[:, 0]
    by_tap = (w_s[:, None, None, :] @ d_mod)[:, :, 0]  # (G, C_in, C_out)
    d_wcout = (w_cin[:, None, :] @ by_tap)[:, 0]

    hid = gen.h
    dh = np.zeros_like(hid)
    if cache.heads_override is not None:
        for name in ("head_cin", "head_s", "head_cout"):
            grads[name + "_w"] = np.zeros_like(getattr(params, name + "_w"))
            grads[name + "_b"] = np.zeros_like(getattr(params, name + "_b"))
    else:
        for name, act, dact in (("head_cin", w_cin, d_wcin), ("head_s", w_s, d_ws),
                                ("head_cout", w_cout, d_wcout)):
            du = dact * act * (1 - act)
            grads[name + "_w"] = hid.T @ du
            grads[name + "_b"] = du.sum(axis=0)
            dh += du @ getattr(params, name + "_w").T
    dh_pre = dh * np.where(gen.h_pre > 0, 1.0, LEAKY_SLOPE).astype(dt)
    grads["trunk_w"] = gen.c.T @ dh_pre
    grads["trunk_b"] = dh_pre.sum(axis=0)
    dc = dh_pre @ params.trunk_w.T

    # Bias path.
    grads["bias_w2"] = gen.g.T @ d_biases
    grads["bias_b2"] = d_biases.sum(axis=0)
    dg_pre = (d_biases @ params.bias_w2.T) * np.where(gen.g_pre > 0, 1.0, LEAKY_SLOPE).astype(dt)
    grads["bias_w1"] = gen.c.T @ dg_pre
    grads["bias_b1"] = dg_pre.sum(axis=0)
    dc += dg_pre @ params.bias_w1.T

    # Centroid -> member rows (or the whole sample under the fallback).
    counts = table.counts
    hw = h * w
    spread = np.zeros((n, p_sorted.shape[1]), dtype=dt)
    for gi in range(G):
        if cache.fallback[gi]:
            spread[table.sample[gi]] += dc[gi] / dt.type(hw)
        else:
            dp_sorted[st[gi]:st[gi + 1]] += dc[gi] / dt.type(counts[gi])
    dp = np.empty_like(dp_sorted)
    dp[order] = dp_sorted
    if cache.fallback.any():
        dp = (dp.reshape(n, h * w, -1) + spread[:, None, :]).reshape(n * h * w, -1)

    dx = fold(dp.reshape(n, h, w, -1), k, c_in)
    if len(dy.shape) == 3:
        dx = dx[0]
    grads = {name: grads[name].astype(dt, copy=False) for name in PARAM_NAMES}
    return CanConvGrads(dx, grads)


def adaptive_conv_reference(x: np.ndarray, params: CanConvParams) -> np.ndarray:
    """Single content-adaptive convolution: one kernel from the global centroid."""
    h, w, c = x.shape
    p = unfold(x, params.k).reshape(h * w, -1)
    c_glob = p.mean(axis=0)
    kernel = generate_kernel(c_glob, params)
    bias = generate_bias(c_glob, params)
    return (p @ kernel + bias).reshape(h, w, params.c_out)


def params_nbytes(params: CanConvParams) -> int:
    return sum(a.nbytes for a in params.arrays().values())

