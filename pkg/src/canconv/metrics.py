"""Reduced-resolution fusion quality metrics: SAM, ERGAS and a per-band Q index.

``q_avg`` is the Wang-Bovik universal image quality index averaged over bands
and sliding windows. It is not the hypercomplex Q4/Q8 index and its values are
not comparable with Q4/Q8 numbers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class UndefinedMetric(ValueError):
    pass


def _check(pred, gt):
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"expected matching (H, W, C) arrays, got {pred.shape} and {gt.shape}")
    return np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)


def sam(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-8, return_skipped: bool = False):
    """Mean spectral angle in degrees.

    Pixels where either vector has norm below ``eps`` are skipped.
    """
    p, g = _check(pred, gt)
    p = p.reshape(-1, p.shape[-1])
    g = g.reshape(-1, g.shape[-1])
    dot = np.einsum("nc,nc->n", p, g)
    pp = np.einsum("nc,nc->n", p, p)
    gg = np.einsum("nc,nc->n", g, g)
    ok = (pp >= eps * eps) & (gg >= eps * eps)
    if not ok.any():
        raise UndefinedMetric("SAM undefined: every pixel has a (near) zero spectrum")
    # sqrt(pp*gg) rather than sqrt(pp)*sqrt(gg): identical vectors give cos == 1 exactly.
    cos = np.clip(dot[ok] / np.sqrt(pp[ok] * gg[ok]), -1.0, 1.0)
    angle = float(np.degrees(np.arccos(cos)).mean())
    skipped = int((~ok).sum())
    return (angle, skipped) if return_skipped else angle


def ergas(pred: np.ndarray, gt: np.ndarray, ratio: int = 4) -> float:
    p, g = _check(pred, gt)
    mu = g.reshape(-1, g.shape[-1]).mean(axis=0)
    if np.any(mu == 0):
        raise UndefinedMetric("ERGAS undefined: a reference band has zero mean")
    mse = ((p - g) ** 2).reshape(-1, g.shape[-1]).mean(axis=0)
    return float(100.0 / ratio * np.sqrt(np.mean(mse / mu ** 2)))


def q_index_maps(pred: np.ndarray, gt: np.ndarray, window: int = 32, step: int = 1):
    """Per-band, per-window Q values ``(C, n_windows)`` and a validity mask.

    ``Q = 2 cov / (var_p + var_g) * 2 mu_p mu_g / (mu_p^2 + mu_g^2)``; the
    luminance factor is taken as 1 when both means are zero, and windows where
    both variances vanish are marked invalid.
    """
    p, g = _check(pred, gt)
    h, w, c = p.shape
    if window > h or window > w or window < 1:
        raise ValueError(f"window {window} does not fit a {h}x{w} image")
    pw = sliding_window_view(p, (window, window), axis=(0, 1))[::step, ::step]
    gw = sliding_window_view(g, (window, window), axis=(0, 1))[::step, ::step]
    # (nh, nw, C, win, win) -> (C, n, win*win)
    pw = pw.transpose(2, 0, 1, 3, 4).reshape(c, -1, window * window)
    gw = gw.transpose(2, 0, 1, 3, 4).reshape(c, -1, window * window)
    mp = pw.mean(axis=-1)
    mg = gw.mean(axis=-1)
    dp = pw - mp[..., None]
    dg = gw - mg[..., None]
    vp = (dp * dp).mean(axis=-1)
    vg = (dg * dg).mean(axis=-1)
    cov = (dp * dg).mean(axis=-1)
    vsum = vp + vg
    msum = mp * mp + mg * mg
    valid = vsum > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        structure = np.where(valid, 2 * cov / np.where(valid, vsum, 1.0), 0.0)
        lum = np.where(msum > 0, 2 * mp * mg / np.where(msum > 0, msum, 1.0), 1.0)
    return structure * lum, valid


def q_avg(pred: np.ndarray, gt: np.ndarray, window: int = 32, step: int = 1,
          return_skipped: bool = False):
    q, valid = q_index_maps(pred, gt, window, step)
    if not valid.any():
        raise UndefinedMetric("Q undefined: every window is constant in both images")
    value = float(q[valid].mean())
    skipped = int((~valid).sum())
    return (value, skipped) if return_skipped else value


@dataclass
class MetricReport:
    sam_deg: list = field(default_factory=list)
    ergas: list = field(default_factory=list)
    q_avg: list = field(default_factory=list)
    skipped_pixels: int = 0
    skipped_windows: int = 0
    note: str = "q_avg is a per-band Q-index average, not Q4/Q8"

    def add(self, pred: np.ndarray, gt: np.ndarray, ratio: int = 4, window: int = 32) -> None:
        s, sk = sam(pred, gt, return_skipped=True)
        q, qk = q_avg(pred, gt, min(window, *gt.shape[:2]), return_skipped=True)
        self.sam_deg.append(s)
        self.ergas.append(ergas(pred, gt, ratio))
        self.q_avg.append(q)
        self.skipped_pixels += sk
        self.skipped_windows += qk

    def summary(self) -> dict:
        out = {"n_samples": len(self.sam_deg)}
        for name in ("sam_deg", "ergas", "q_avg"):
            vals = np.asarray(getattr(self, name), dtype=np.float64)
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "per_sample": asdict(self)}
