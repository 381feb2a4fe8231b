"""``canconv`` command-line entry point.

Every subcommand accepts ``--config FILE.json`` whose keys are the long option
names (dashes or underscores); explicit flags override file values and unknown
keys are rejected. The resolved options are echoed as JSON next to the outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint
from .gradcheck import canconv_gradcheck, network_gradcheck
from .metrics import MetricReport
from .network import CanNet, CanNetConfig, bicubic_upsample
from .numerics import load_ctn, save_ctn
from .training import (TrainConfig, TrainingDiverged, load_dataset, make_synthetic_dataset,
                       train, write_dataset, write_loss_csv)

log = logging.getLogger("canconv")

# 32-entry palette for index-matrix images; id i is drawn with PALETTE[i % 32].
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (0, 0, 0), (100, 100, 255), (255, 100, 100),
    (100, 200, 100), (200, 100, 200), (50, 50, 150), (150, 75, 0),
    (0, 90, 40), (255, 160, 0), (120, 0, 255), (190, 190, 50),
], dtype=np.uint8)


class CliError(Exception):
    pass


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file of option values")
        return sp

    sp = cmd("gen", "write a synthetic Wald-protocol dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--bands", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)

    sp = cmd("train", "train CANNet with L1 loss and Adam")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--k-clusters", type=int, default=32)
    sp.add_argument("--eta", type=float, default=0.005)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--lr-final", type=float, default=1e-4)
    sp.add_argument("--lr-drop-epoch", type=int, default=None)
    sp.add_argument("--refresh-epochs", type=int, default=10)
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--base-channels", type=int, default=32)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--target-loss", type=float, default=None)
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    sp.add_argument("--no-figures", action="store_true")

    sp = cmd("infer", "run a checkpoint on one PAN/LRMS pair")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pan", required=True)
    sp.add_argument("--lrms", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k-clusters", type=int, default=None)

    sp = cmd("eval", "reduced-resolution metrics over a dataset")
    sp.add_argument("--model", default=None, help="checkpoint; omit to score --baseline")
    sp.add_argument("--baseline", choices=("bicubic", "gt"), default="bicubic")
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--k-clusters", type=int, default=None)

    sp = cmd("gradcheck", "finite-difference check of the hand-written gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sizes", type=_ints, default=[8, 8, 4, 4],
                    help="H,W,C_in,C_out of the CANConv check")
    sp.add_argument("--clusters", type=int, default=3)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--network", action="store_true", help="also check the whole CANNet")
    sp.add_argument("--network-tol", type=float, default=1e-3)
    sp.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    sp = cmd("sweep-k", "metrics and inference time against the cluster count")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--k-list", type=_ints, default=[1, 2, 4, 8, 16, 32])
    sp.add_argument("--report", required=True, help="CSV path; a PNG is written alongside")
    sp.add_argument("--no-figures", action="store_true")

    sp = cmd("cluster-viz", "render each level's cluster index matrix as PPM")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pan", required=True)
    sp.add_argument("--lrms", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k-clusters", type=int, default=None)
    return p


def _subparser(parser, name):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[name]


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions} - {"help", "config"}
        with open(args.config) as f:
            values = {k.replace("-", "_"): v for k, v in json.load(f).items()}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def echo_config(args: argparse.Namespace, path: str) -> None:
    # Keys match the subcommand's options, so the echo can be fed back via --config.
    resolved = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "command")}
    with open(path, "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)


def _sidecar(path: str) -> str:
    return os.path.splitext(path)[0] + ".config.json"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _as_pair(pan: np.ndarray, lrms: np.ndarray):
    if pan.ndim == 2:
        pan = pan[..., None]
    return pan.astype(np.float32), lrms.astype(np.float32)


def predict(model: CanNet, pan: np.ndarray, lrms: np.ndarray, n_clusters: int | None = None) -> np.ndarray:
    """HRMS ``(H, W, C)`` for one ``(H, W, 1)`` PAN and ``(h, w, C)`` LRMS."""
    pan, lrms = _as_pair(pan, lrms)
    return model.forward(pan[None], lrms[None], n_clusters=n_clusters)[0]


def evaluate(model: CanNet | None, samples, n_clusters=None, baseline="bicubic") -> MetricReport:
    report = MetricReport()
    for s in samples:
        if model is not None:
            pred = predict(model, s.pan, s.lrms, n_clusters)
        elif baseline == "gt":
            pred = s.gt
        else:
            pred = bicubic_upsample(s.lrms)
        report.add(pred, s.gt)
    return report


def cmd_gen(args) -> int:
    samples = make_synthetic_dataset(args.n, args.size, args.bands, args.seed)
    write_dataset(args.out, samples, {"size": args.size, "bands": args.bands, "seed": args.seed})
    echo_config(args, os.path.join(args.out, "config.json"))
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    samples = load_dataset(args.data)
    if args.resume:
        model, state, _ = checkpoint.load_checkpoint(args.resume)
    else:
        bands = samples[0].gt.shape[-1]
        model = CanNet(CanNetConfig(ms_channels=bands, levels=args.levels,
                                    base_channels=args.base_channels, k_train=args.k_clusters,
                                    eta=args.eta, seed=args.seed))
        state = None
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      lr_final=args.lr_final, lr_drop_epoch=args.lr_drop_epoch,
                      index_refresh_epochs=args.refresh_epochs, seed=args.seed,
                      k_train=args.k_clusters, max_steps=args.max_steps,
                      target_loss=args.target_loss)
    os.makedirs(args.out, exist_ok=True)
    echo_config(args, os.path.join(args.out, "config.json"))
    try:
        state = train(model, samples, cfg, state)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    checkpoint.save_checkpoint(args.out, model, state, extra={"train_config": cfg.to_dict()})
    write_loss_csv(os.path.join(args.out, "loss.csv"), state.history)
    if not args.no_figures:
        from .plotting import plot_loss_history
        plot_loss_history(state.history, os.path.join(args.out, "loss.png"))
    last = state.history[-1] if state.history else None
    print(f"trained {state.step} steps, {state.epoch} epochs"
          + (f", final train L1 {last[2]:.5f}" if last else ""))
    return 0


def cmd_infer(args) -> int:
    model, _, _ = checkpoint.load_checkpoint(args.model)
    pred = predict(model, load_ctn(args.pan), load_ctn(args.lrms), args.k_clusters)
    _ensure_parent(args.out)
    save_ctn(args.out, pred.astype(np.float32))
    echo_config(args, _sidecar(args.out))
    print(f"wrote {pred.shape} HRMS to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load_checkpoint(args.model)[0] if args.model else None
    report = evaluate(model, load_dataset(args.data), args.k_clusters, args.baseline)
    _ensure_parent(args.report)
    with open(args.report, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    echo_config(args, _sidecar(args.report))
    s = report.summary()
    print(f"SAM {s['sam_deg']['mean']:.4f}±{s['sam_deg']['std']:.4f}  "
          f"ERGAS {s['ergas']['mean']:.4f}±{s['ergas']['std']:.4f}  "
          f"Q {s['q_avg']['mean']:.4f}±{s['q_avg']['std']:.4f}  (n={s['n_samples']})")
    return 0


def cmd_gradcheck(args) -> int:
    if len(args.sizes) != 4:
        raise CliError("--sizes takes H,W,C_in,C_out")
    h, w, c_in, c_out = args.sizes
    ok = True
    for training in (False, True):
        label = "train(eta fallback)" if training else "eval"
        index = None
        if training:
            # One two-pixel cluster forces the global-centroid fallback.
            index = np.zeros((h, w), dtype=np.int64)
            index[h // 2:] = 1
            index[0, 0] = index[-1, -1] = 2
        report = canconv_gradcheck(h, w, c_in, c_out, 3, args.clusters, args.seed, args.step,
                                   training=training, eta=0.05 if training else 0.0,
                                   corrupt=args.corrupt, index=index)
        for g in report:
            flag = "ok" if g.max_rel_error < args.tol else "FAIL"
            ok &= g.max_rel_error < args.tol
            print(f"canconv[{label}] {g.name:12s} max_rel_err={g.max_rel_error:.3e} n={g.n_checked} {flag}")
    if args.network:
        for g in network_gradcheck(seed=args.seed, step=args.step):
            flag = "ok" if g.max_rel_error < args.network_tol else "FAIL"
            ok &= g.max_rel_error < args.network_tol
            print(f"cannet {g.name:40s} max_rel_err={g.max_rel_error:.3e} n={g.n_checked} {flag}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_sweep_k(args) -> int:
    model, _, _ = checkpoint.load_checkpoint(args.model)
    samples = load_dataset(args.data)
    rows = []
    for k in args.k_list:
        t0 = time.perf_counter()
        preds = [predict(model, s.pan, s.lrms, k) for s in samples]
        seconds = time.perf_counter() - t0
        rep = MetricReport()
        for pred, s in zip(preds, samples):
            rep.add(pred, s.gt)
        summ = rep.summary()
        rows.append({"k": k, "sam_deg": summ["sam_deg"]["mean"], "ergas": summ["ergas"]["mean"],
                     "q_avg": summ["q_avg"]["mean"], "seconds": seconds})
        print(f"K={k:4d} SAM {rows[-1]['sam_deg']:.4f} ERGAS {rows[-1]['ergas']:.4f} "
              f"Q {rows[-1]['q_avg']:.4f} time {seconds:.3f}s")
    _ensure_parent(args.report)
    with open(args.report, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["k", "sam_deg", "ergas", "q_avg", "seconds"])
        writer.writeheader()
        writer.writerows(rows)
    echo_config(args, _sidecar(args.report))
    if not args.no_figures:
        from .plotting import plot_k_sweep
        plot_k_sweep(rows, os.path.splitext(args.report)[0] + ".png")
    return 0


def render_index(index: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(index) % len(PALETTE)]


def palette_lookup(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`render_index` for ids below 32."""
    codes = (PALETTE.astype(np.int64) << np.array([16, 8, 0])).sum(axis=1)
    pix = (rgb.astype(np.int64) << np.array([16, 8, 0])).sum(axis=-1)
    lut = {int(c): i for i, c in enumerate(codes)}
    return np.vectorize(lut.__getitem__)(pix)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, dims, maxval = f.readline(), f.readline(), f.readline()
        if magic.strip() != b"P6" or maxval.strip() != b"255":
            raise ValueError("not an 8-bit binary PPM")
        w, h = map(int, dims.split())
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(h, w, 3)


def cmd_cluster_viz(args) -> int:
    model, _, _ = checkpoint.load_checkpoint(args.model)
    predict(model, load_ctn(args.pan), load_ctn(args.lrms), args.k_clusters)
    os.makedirs(args.out, exist_ok=True)
    for lv, idx in enumerate(model.last_indices):
        write_ppm(os.path.join(args.out, f"level_{lv}.ppm"), render_index(idx[0]))
        print(f"level {lv}: {idx.shape[1]}x{idx.shape[2]}, {len(np.unique(idx))} clusters")
    echo_config(args, os.path.join(args.out, "config.json"))
    return 0


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "sweep-k": cmd_sweep_k, "cluster-viz": cmd_cluster_viz,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, OSError, ValueError) as e:
        print(f"canconv {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
