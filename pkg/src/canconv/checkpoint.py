"""Model checkpoints: a JSON manifest plus packed ``.ctn`` tensor files.

Layout of a checkpoint directory::

    model.json    manifest: format/version, CanNetConfig echo, training
                  counters, and for every tensor its name, shape, dtype,
                  byte offset and length inside the pack file
    params.bin    concatenated .ctn records of the network parameters
    optim.bin     concatenated .ctn records of Adam moments (optional)
"""

from __future__ import annotations

import json
import os

import numpy as np

from .network import CanNet, CanNetConfig
from .numerics import ctn_bytes, ctn_from_bytes
from .training import Adam, TrainState

FORMAT = "canconv-checkpoint"
VERSION = 1


def pack_tensors(named) -> tuple[bytes, list[dict]]:
    blob = bytearray()
    entries = []
    for name, arr in named:
        rec = ctn_bytes(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "offset": len(blob), "nbytes": len(rec)})
        blob += rec
    return bytes(blob), entries


def unpack_tensors(blob: bytes, entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        arr = ctn_from_bytes(blob[e["offset"]:e["offset"] + e["nbytes"]])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"tensor {e['name']} shape {arr.shape} disagrees with manifest")
        out[e["name"]] = arr
    return out


def param_bytes(model: CanNet) -> bytes:
    return pack_tensors(model.named_parameters())[0]


def save_checkpoint(path, model: CanNet, state: TrainState | None = None,
                    extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    blob, entries = pack_tensors(model.named_parameters())
    with open(os.path.join(path, "params.bin"), "wb") as f:
        f.write(blob)
    manifest = {"format": FORMAT, "version": VERSION, "config": model.config.to_dict(),
                "params": {"file": "params.bin", "tensors": entries}}
    if state is not None:
        moments = [(f"m.{n}", a) for n, a in state.adam.m.items()]
        moments += [(f"v.{n}", a) for n, a in state.adam.v.items()]
        oblob, oentries = pack_tensors(moments)
        with open(os.path.join(path, "optim.bin"), "wb") as f:
            f.write(oblob)
        manifest["train"] = {"step": state.step, "epoch": state.epoch, "seed": state.seed,
                             "adam_t": state.adam.t, "history": [list(r) for r in state.history]}
        manifest["optim"] = {"file": "optim.bin", "tensors": oentries}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path) -> tuple[CanNet, TrainState | None, dict]:
    with open(os.path.join(path, "model.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ValueError(f"{path} is not a version-{VERSION} {FORMAT}")
    model = CanNet(CanNetConfig(**manifest["config"]))
    with open(os.path.join(path, manifest["params"]["file"]), "rb") as f:
        tensors = unpack_tensors(f.read(), manifest["params"]["tensors"])
    current = dict(model.named_parameters())
    if tensors.keys() != current.keys():
        raise ValueError("checkpoint parameters do not match the network layout")
    for name, arr in tensors.items():
        current[name][...] = arr
    state = None
    if "train" in manifest:
        t = manifest["train"]
        adam = Adam()
        adam.t = t["adam_t"]
        with open(os.path.join(path, manifest["optim"]["file"]), "rb") as f:
            moments = unpack_tensors(f.read(), manifest["optim"]["tensors"])
        for key, arr in moments.items():
            kind, name = key.split(".", 1)
            (adam.m if kind == "m" else adam.v)[name] = arr.copy()
        state = TrainState(step=t["step"], epoch=t["epoch"], seed=t["seed"], adam=adam,
                           history=[tuple(r) for r in t["history"]])
    return model, state, manifest
