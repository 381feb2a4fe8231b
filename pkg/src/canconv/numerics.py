"""Dense tensor helpers shared by the clustering and convolution code.

Tensors are plain ``numpy.ndarray`` objects laid out channels-last
(``..., H, W, C``). Neighborhoods are flattened in ``(dy, dx, channel)``
order everywhere: row ``(y, x)`` of :func:`unfold` holds
``x[y+dy-r, x+dx-r, c]`` at column ``(dy*k + dx)*C + c`` with ``r = k//2``.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np
import scipy.sparse as sp

DEFAULT_DTYPE = np.float32


class SeededRng:
    """Reproducible random source.

    Backed by numpy's PCG64 bit generator (PCG-XSL-RR 128/64, O'Neill 2014),
    whose raw 64-bit stream is fixed for a given seed on every platform.
    Floats are drawn as ``(u64 >> 11) * 2**-53``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def next_u64(self, n: int | None = None):
        return self._gen.bit_generator.random_raw(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        raw = np.asarray(self._gen.bit_generator.random_raw(1 if size is None else int(np.prod(size))))
        u = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        return min(int(self.uniform() * high), high - 1)

    def normal(self, size):
        # Box-Muller on our own uniforms keeps the sequence version-independent.
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=(m,))
        u2 = self.uniform(size=(m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by uniform draws.
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag: int) -> "SeededRng":
        return SeededRng((self.seed * 1_000_003 + tag) % (2**63))


def _check_window(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {k!r}")


def unfold(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded k x k neighborhoods: ``(..., H, W, C) -> (..., H, W, k*k*C)``."""
    _check_window(k)
    *lead, h, w, c = x.shape
    if h < 1 or w < 1:
        raise ValueError("spatial extents must be positive")
    if k == 1:
        return x.copy()
    r = k // 2
    pad = [(0, 0)] * len(lead) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x, pad)
    out = np.empty((*lead, h, w, k * k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out[..., dy * k + dx, :] = xp[..., dy:dy + h, dx:dx + w, :]
    return out.reshape(*lead, h, w, k * k * c)


def fold(cols: np.ndarray, k: int, channels: int) -> np.ndarray:
    """Adjoint of :func:`unfold`; sums overlapping taps back onto pixels."""
    _check_window(k)
    *lead, h, w, _ = cols.shape
    if k == 1:
        return cols.copy()
    r = k // 2
    cols = cols.reshape(*lead, h, w, k * k, channels)
    xp = np.zeros((*lead, h + 2 * r, w + 2 * r, channels), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[..., dy:dy + h, dx:dx + w, :] += cols[..., dy * k + dx, :]
    return xp[..., r:r + h, r:r + w, :]


def mean_pool_window(x: np.ndarray, k: int) -> np.ndarray:
    """Window mean with zero padding, always divided by ``k*k`` (borders included)."""
    _check_window(k)
    *lead, h, w, c = x.shape
    r = k // 2
    pad = [(0, 0)] * len(lead) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x, pad)
    acc = np.zeros(x.shape, dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            acc += xp[..., dy:dy + h, dx:dx + w, :]
    return acc / x.dtype.type(k * k)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product via BLAS gemm.

    Accumulation order is whatever the linked BLAS uses for the given shapes;
    it is fixed for a given build, so results are reproducible run to run.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def kron3(w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Outer product of three vectors, ``out[i, j, l] = w1[i] * w2[j] * w3[l]``."""
    if min(len(w1), len(w2), len(w3)) == 0:
        raise ValueError("kron3 needs nonempty vectors")
    return (w1[:, None, None] * w2[None, :, None]) * w3[None, None, :]


def segment_matrix(labels: np.ndarray, n_segments: int, dtype=np.float64) -> sp.csr_matrix:
    """Sparse one-hot ``(n_segments, len(labels))`` used for per-segment sums."""
    n = len(labels)
    return sp.csr_matrix(
        (np.ones(n, dtype=dtype), (labels, np.arange(n))), shape=(n_segments, n)
    )


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, x * x.dtype.type(slope))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# -- .ctn container -----------------------------------------------------------

CTN_MAGIC = b"CANT"
CTN_VERSION = 1
_CTN_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CTN_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def ctn_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    code = _CTN_CODES.get(x.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype for .ctn: {x.dtype}")
    header = CTN_MAGIC + struct.pack("<BBB", CTN_VERSION, code, x.ndim)
    header += struct.pack(f"<{x.ndim}Q", *x.shape)
    return header + np.ascontiguousarray(x, dtype=_CTN_DTYPES[code]).tobytes()


def read_ctn_stream(f: BinaryIO) -> np.ndarray:
    if f.read(4) != CTN_MAGIC:
        raise ValueError("not a .ctn tensor (bad magic)")
    version, code, ndim = struct.unpack("<BBB", f.read(3))
    if version != CTN_VERSION or code not in _CTN_DTYPES:
        raise ValueError(f"unsupported .ctn version/dtype {version}/{code}")
    dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
    dt = _CTN_DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    buf = f.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("truncated .ctn payload")
    return np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def ctn_from_bytes(data: bytes) -> np.ndarray:
    return read_ctn_stream(io.BytesIO(data))


def save_ctn(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(ctn_bytes(x))


def load_ctn(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_ctn_stream(f)
