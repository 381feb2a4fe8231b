"""L1/Adam training with cached cluster indices, and synthetic pansharpening data."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .network import CanNet
from .numerics import SeededRng, load_ctn, save_ctn

log = logging.getLogger(__name__)

RATIO = 4
BLUR_SIGMA = 1.0


class TrainingDiverged(RuntimeError):
    pass


def l1_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred.astype(np.float64) - gt)))


def l1_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return (np.sign(pred - gt) / pred.size).astype(pred.dtype)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """In-place bias-corrected Adam update of every array in ``params``."""
        if params.keys() != grads.keys():
            raise ValueError("params and grads name different tensors")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- synthetic data -------------------------------------------------------------

@dataclass
class SamplePair:
    pan: np.ndarray  # (H, W, 1)
    lrms: np.ndarray  # (H/4, W/4, C)
    gt: np.ndarray  # (H, W, C)


def degrade(gt: np.ndarray, ratio: int = RATIO, sigma: float = BLUR_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """Simulate (PAN, LRMS) from a high-resolution multispectral image."""
    pan = gt.mean(axis=-1, keepdims=True)
    blurred = np.stack([gaussian_filter(gt[..., b], sigma, mode="nearest")
                        for b in range(gt.shape[-1])], axis=-1)
    return pan.astype(gt.dtype), blurred[::ratio, ::ratio].astype(gt.dtype)


def _texture(rng: SeededRng, size: int, bands: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # Region fills: Voronoi cells, each with its own spectrum.
    n_regions = 3 + rng.integers(3)
    centers = rng.uniform(0, size, size=(n_regions, 2))
    d = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    region = np.argmin(d, axis=-1)
    spectra = rng.uniform(0.2, 0.8, size=(n_regions, bands))
    img = spectra[region]
    # Smooth illumination gradient.
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * yy + np.sin(theta) * xx) / size
    img = img * (0.85 + 0.3 * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9))[..., None]
    # A smooth brightness motif tiled over some regions (non-local self-similarity).
    period = 16
    cy, cx = np.mgrid[0:period, 0:period].astype(np.float64)
    motif = np.zeros((period, period))
    for _ in range(3):
        my, mx = rng.uniform(0, period, size=2)
        amp = rng.uniform(-1, 1)
        motif += amp * np.exp(-((cy - my) ** 2 + (cx - mx) ** 2) / (2 * 2.0 ** 2))
    motif /= max(np.abs(motif).max(), 1e-9)
    tiles = np.tile(motif, (size // period + 1, size // period + 1))[:size, :size]
    textured = np.isin(region, np.arange(0, n_regions, 2))
    img = img * (1 + 0.25 * np.where(textured, tiles, 0.0))[..., None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(n: int, size: int, bands: int = 4, seed: int = 0,
                           dtype=np.float32) -> list[SamplePair]:
    if size <= 0 or size % RATIO:
        raise ValueError(f"size must be a positive multiple of {RATIO}, got {size}")
    if n < 1 or bands < 1:
        raise ValueError("n and bands must be positive")
    rng = SeededRng(seed)
    out = []
    for i in range(n):
        gt = _texture(rng.spawn(i), size, bands).astype(dtype)
        pan, lrms = degrade(gt)
        out.append(SamplePair(pan, lrms, gt))
    return out


def write_dataset(path, samples: list[SamplePair], meta: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        names = {part: f"{i:04d}_{part}.ctn" for part in ("pan", "lrms", "gt")}
        for part, fname in names.items():
            save_ctn(os.path.join(path, fname), getattr(s, part))
        entries.append({"id": i, **names})
    manifest = {"format": "canconv-dataset", "version": 1, "n": len(samples),
                "ratio": RATIO, **(meta or {}), "samples": entries}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(path) -> list[SamplePair]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    return [SamplePair(*(load_ctn(os.path.join(path, e[part])) for part in ("pan", "lrms", "gt")))
            for e in manifest["samples"]]


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_epoch: int | None = None  # defaults to epochs // 2
    index_refresh_epochs: int = 10
    seed: int = 0
    k_train: int | None = None  # defaults to the model's k_train
    max_steps: int | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.index_refresh_epochs < 1:
            raise ValueError("epochs, batch_size and index_refresh_epochs must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        drop = self.epochs // 2 if self.lr_drop_epoch is None else self.lr_drop_epoch
        return self.lr if epoch < drop else self.lr_final

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    seed: int = 0
    adam: Adam = field(default_factory=Adam)
    index_cache: dict = field(default_factory=dict)  # sample id -> list of (H_l, W_l)
    refreshed_epoch: dict = field(default_factory=dict)  # sample id -> epoch of last refresh
    history: list = field(default_factory=list)  # rows (epoch, lr, train_l1)


def _stack(samples, ids, attr):
    return np.stack([getattr(samples[i], attr) for i in ids])


def train_step(model: CanNet, samples: list[SamplePair], ids, state: TrainState,
               cfg: TrainConfig, lr: float, refresh: bool) -> float:
    pan, lrms, gt = (_stack(samples, ids, a) for a in ("pan", "lrms", "gt"))
    k_train = cfg.k_train or model.config.k_train
    indices = None
    if not refresh:
        indices = [np.stack([state.index_cache[i][lv] for i in ids])
                   for lv in range(model.config.levels)]
    model.zero_grad()
    pred = model.forward(pan, lrms, indices=indices, n_clusters=k_train, training=True)
    if refresh:
        for j, i in enumerate(ids):
            state.index_cache[i] = [lv_idx[j].copy() for lv_idx in model.last_indices]
            state.refreshed_epoch[i] = state.epoch
    loss = l1_loss(pred, gt)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {state.step} (epoch {state.epoch})")
    model.backward(l1_grad(pred, gt))
    params = dict(model.named_parameters())
    grads = dict(model.named_grads())
    state.adam.step(params, grads, lr)
    state.step += 1
    return loss


def train(model: CanNet, samples: list[SamplePair], cfg: TrainConfig,
          state: TrainState | None = None, on_epoch=None) -> TrainState:
    """Mini-batch Adam on L1 loss.

    Index matrices are recomputed for every sample at epochs divisible by
    ``index_refresh_epochs`` and reused unchanged in between. Stops early at
    ``max_steps`` or once an epoch's mean loss drops below ``target_loss``.
    """
    if not samples:
        raise ValueError("no training samples")
    state = state or TrainState(seed=cfg.seed)
    n = len(samples)
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        lr = cfg.lr_at(epoch)
        order = SeededRng(cfg.seed).spawn(epoch).permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            ids = [int(i) for i in order[s:s + cfg.batch_size]]
            refresh = epoch % cfg.index_refresh_epochs == 0 or any(
                i not in state.index_cache for i in ids)
            loss = train_step(model, samples, ids, state, cfg, lr, refresh)
            total += loss * len(ids)
            count += len(ids)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
        mean = total / count
        state.history.append((epoch, lr, mean))
        state.epoch += 1
        log.info("epoch %d lr %.2e l1 %.5f", epoch, lr, mean)
        if on_epoch is not None:
            on_epoch(state)
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        if cfg.target_loss is not None and mean < cfg.target_loss:
            break
    return state


def write_loss_csv(path, history) -> None:
    with open(path, "w") as f:
        f.write("epoch,lr,train_l1\n")
        for epoch, lr, loss in history:
            f.write(f"{epoch},{lr:.8g},{loss:.8g}\n")
