"""Central finite-difference checks for the hand-written gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng
from .pwac import PARAM_NAMES, CanConvParams, canconv_backward, canconv_forward


@dataclass
class GroupError:
    name: str
    max_rel_error: float
    n_checked: int


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute mismatch, normalized by the group's largest gradient."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in (range(flat.size) if entries is None else entries):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)


def canconv_gradcheck(h: int = 8, w: int = 8, c_in: int = 4, c_out: int = 4, k: int = 3,
                      n_clusters: int = 3, seed: int = 0, step: float = 1e-5,
                      training: bool = False, eta: float = 0.0, corrupt: str | None = None,
                      index: np.ndarray | None = None) -> list[GroupError]:
    """Check every CANConv gradient group plus the input gradient.

    The loss is ``sum(y * R)`` for a fixed random ``R``; the cluster index
    matrix is held fixed. ``corrupt`` names a group whose analytic gradient is
    deliberately perturbed (negative control).
    """
    rng = SeededRng(seed)
    params = CanConvParams.init(c_in, c_out, k, eta=eta, rng=rng, dtype=np.float64)
    # Nonzero bias head so the bias path is exercised.
    params.bias_w2[...] = rng.uniform(-0.5, 0.5, size=params.bias_w2.shape)
    params.bias_b2[...] = rng.uniform(-0.5, 0.5, size=params.bias_b2.shape)
    x = rng.normal((h, w, c_in))
    if index is None:
        index = np.array([rng.integers(n_clusters) for _ in range(h * w)]).reshape(h, w)
        index[0, 0] = 0
    r = rng.normal((h, w, c_out))

    def loss():
        y, _ = canconv_forward(x, index, params, training=training)
        return float(np.sum(y * r))

    _, cache = canconv_forward(x, index, params, training=training)
    grads = canconv_backward(r, cache, params)
    analytic = dict(grads.params)
    analytic["input"] = grads.dx
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3

    report = [GroupError("input", rel_error(analytic["input"], numeric_grad(loss, x, step)), x.size)]
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        num = numeric_grad(loss, arr, step)
        report.append(GroupError(name, rel_error(analytic[name], num), arr.size))
    return report


def network_gradcheck(seed: int = 0, step: float = 1e-5, size: int = 16, base_channels: int = 4,
                      n_clusters: int = 2, entries_per_tensor: int = 20) -> list[GroupError]:
    """End-to-end check of a small float64 CANNet on a random subset of every tensor.

    Parameters are jittered away from their initial values so that zero-initialized
    layers still pass nonzero gradients downstream.
    """
    from .network import CanNet, CanNetConfig

    net = CanNet(CanNetConfig(ms_channels=4, levels=3, base_channels=base_channels,
                              k_train=n_clusters, seed=seed), dtype=np.float64)
    rng = SeededRng(seed).spawn(1)
    for _, a in net.named_parameters():
        a[...] += rng.uniform(-0.1, 0.1, size=a.shape)
    pan = rng.uniform(size=(1, size, size, 1))
    lrms = rng.uniform(size=(1, size // 4, size // 4, 4))
    r = rng.normal((1, size, size, 4))
    net.forward(pan, lrms, training=True)
    indices = net.last_indices

    def loss():
        return float(np.sum(net.forward(pan, lrms, indices=indices, training=True) * r))

    net.zero_grad()
    net.forward(pan, lrms, indices=indices, training=True)
    net.backward(r)
    grads = dict(net.named_grads())
    report = []
    for name, arr in net.named_parameters():
        picked = rng.permutation(arr.size)[:entries_per_tensor]
        num = numeric_grad(loss, arr, step, entries=picked).reshape(-1)[picked]
        report.append(GroupError(name, rel_error(grads[name].reshape(-1)[picked], num), len(picked)))
    return report
