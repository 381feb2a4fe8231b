"""Similarity relationship partition: windowed-mean observations + K-Means."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, mean_pool_window, segment_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KMeansConfig:
    K: int
    max_iters: int = 100
    reassignment_stop_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 < self.reassignment_stop_fraction < 1.0:
            raise ValueError("reassignment_stop_fraction must lie in (0, 1)")


@dataclass
class KMeansResult:
    labels: np.ndarray  # (n,) int64
    centroids: np.ndarray  # (K_eff, d) float64
    iters: int
    k_requested: int
    inertia_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def shrunk(self) -> bool:
        return self.k < self.k_requested


def compute_observations(x: np.ndarray, k: int = 3) -> np.ndarray:
    """Per-pixel observation vectors ``(H*W, C)`` from an ``(H, W, C)`` map."""
    h, w, c = x.shape
    return mean_pool_window(x, k).reshape(h * w, c)


def _sq_dists(obs: np.ndarray, centers: np.ndarray, chunk: int = 1 << 20) -> np.ndarray:
    # Direct differences (not the |a|^2-2ab+|b|^2 expansion) so that a point
    # coinciding with a center gets distance exactly 0.
    n, d = obs.shape
    kk = len(centers)
    out = np.empty((n, kk), dtype=np.float64)
    step = max(1, chunk // max(1, kk * d))
    for s in range(0, n, step):
        diff = obs[s:s + step, None, :] - centers[None, :, :]
        out[s:s + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _min_sq_dist(obs: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = obs - center
    return np.einsum("nd,nd->n", diff, diff)


def kmeans_pp_init(obs: np.ndarray, cfg: KMeansConfig) -> np.ndarray:
    """K-Means++ seeding (D^2 weighting). May return fewer than ``K`` centers.

    When the observations hold fewer distinct rows than ``K``, the count is
    shrunk to the number of distinct rows and a warning is logged.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n = len(obs)
    if cfg.K > n:
        raise ValueError(f"K={cfg.K} exceeds number of observations {n}")
    k = cfg.K
    if k > 1:
        distinct = len(np.unique(obs, axis=0))
        if distinct < k:
            log.warning("kmeans: shrinking K from %d to %d distinct rows", k, distinct)
            k = distinct
    rng = SeededRng(cfg.seed)
    idx = [rng.integers(n)]
    d2 = _min_sq_dist(obs, obs[idx[0]])
    for _ in range(1, k):
        total = d2.sum()
        target = rng.uniform() * total
        cum = np.cumsum(d2)
        j = int(np.searchsorted(cum, target, side="right"))
        j = min(j, n - 1)
        while d2[j] == 0.0:  # never pick a point that already is a center
            j = (j + 1) % n
        idx.append(j)
        d2 = np.minimum(d2, _min_sq_dist(obs, obs[j]))
    return obs[idx].copy()


def _inertia(obs, centers, labels) -> float:
    diff = obs - centers[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_run(obs: np.ndarray, cfg: KMeansConfig) -> KMeansResult:
    """Lloyd iterations from a K-Means++ start.

    Stops once fewer than ``reassignment_stop_fraction`` of the points changed
    cluster in an assignment pass, or after ``max_iters`` passes. Ties go to
    the lowest cluster id. A cluster that loses all its points is re-seeded at
    the point farthest from its assigned center.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n = len(obs)
    centers = kmeans_pp_init(obs, cfg)
    k = len(centers)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iters = 0
    while iters < cfg.max_iters:
        iters += 1
        d = _sq_dists(obs, centers)
        new = np.argmin(d, axis=1)
        point_d = d[np.arange(n), new]
        counts = np.bincount(new, minlength=k)
        taken = set()
        for j in np.flatnonzero(counts == 0):
            order = np.argsort(-point_d, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken and counts[new[i]] > 1)
            taken.add(far)
            counts[new[far]] -= 1
            counts[j] += 1
            new[far] = j
            point_d[far] = 0.0
            centers[j] = obs[far]
        # Same reduction as the final entry so equal states give equal values.
        history.append(_inertia(obs, centers, new))
        changed = int(np.count_nonzero(new != labels))
        labels = new
        m = segment_matrix(labels, k)
        centers = np.asarray(m @ obs) / counts[:, None]
        if changed < cfg.reassignment_stop_fraction * n:
            break
    history.append(_inertia(obs, centers, labels))
    return KMeansResult(labels, centers, iters, cfg.K, history)


def srp_partition(x: np.ndarray, k: int, cfg: KMeansConfig) -> np.ndarray:
    """Cluster index matrix ``(H, W)`` for a single ``(H, W, C)`` feature map."""
    h, w, _ = x.shape
    obs = compute_observations(x, k)
    res = kmeans_run(obs, KMeansConfig(min(cfg.K, h * w), cfg.max_iters,
                                       cfg.reassignment_stop_fraction, cfg.seed))
    return res.labels.reshape(h, w)


def write_pgm(path, index: np.ndarray) -> None:
    """Debug dump of an index matrix as 8-bit binary PGM (ids clamped to 255)."""
    h, w = index.shape
    data = np.clip(index, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
