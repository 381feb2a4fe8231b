import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from canconv import checkpoint
from canconv.cli import PALETTE, main, palette_lookup, read_ppm, render_index
from canconv.metrics import ergas, q_avg, sam
from canconv.network import CanNet, CanNetConfig, bicubic_upsample
from canconv.numerics import load_ctn, save_ctn
from canconv.training import load_dataset, make_synthetic_dataset, write_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", path, "--n", 4, "--size", 32, "--seed", 3) == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", dataset, "--out", out, "--epochs", 2, "--k-clusters", 3,
               "--base-channels", 4, "--batch-size", 2, "--no-figures") == 0
    return out


@pytest.fixture
def fresh_model(tmp_path):
    path = tmp_path / "fresh"
    checkpoint.save_checkpoint(path, CanNet(CanNetConfig(base_channels=4, k_train=3)))
    return path


def test_gen_layout_and_reproducibility(dataset, tmp_path):
    files = sorted(p.name for p in dataset.iterdir())
    assert len([f for f in files if f.endswith(".ctn")]) == 12
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["n"] == 4 and len(manifest["samples"]) == 4
    assert "config.json" in files
    assert run("gen", "--out", tmp_path / "again", "--n", 4, "--size", 32, "--seed", 3) == 0
    for f in files:
        if f.endswith(".ctn"):
            assert (dataset / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
    assert run("gen", "--out", tmp_path / "other", "--n", 4, "--size", 32, "--seed", 4) == 0
    assert (dataset / "0000_gt.ctn").read_bytes() != (tmp_path / "other" / "0000_gt.ctn").read_bytes()


def test_config_echo_reproduces_outputs(dataset, tmp_path):
    echo = dataset / "config.json"
    assert run("gen", "--config", echo, "--out", tmp_path / "echo") == 0
    for p in dataset.glob("*.ctn"):
        assert p.read_bytes() == (tmp_path / "echo" / p.name).read_bytes()


def test_config_flags_override_and_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 3, "size": 16, "seed": 1}))
    assert run("gen", "--config", cfg, "--out", tmp_path / "d", "--n", 2) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["n"] == 2
    echo = json.loads((tmp_path / "d" / "config.json").read_text())
    assert echo["n"] == 2 and echo["size"] == 16
    cfg.write_text(json.dumps({"n": 3, "bogus": 1}))
    with pytest.raises(SystemExit) as err:
        run("gen", "--config", cfg, "--out", tmp_path / "e")
    assert err.value.code != 0


def test_train_smoke_outputs(trained):
    rows = list(csv.reader((trained / "loss.csv").open()))
    assert rows[0] == ["epoch", "lr", "train_l1"] and len(rows) == 3
    manifest = json.loads((trained / "model.json").read_text())
    assert manifest["format"] == "canconv-checkpoint" and manifest["train"]["step"] == 4
    assert (trained / "config.json").exists()


def test_train_resume_continues_step_counter(trained, dataset, tmp_path):
    out = tmp_path / "resumed"
    assert run("train", "--data", dataset, "--out", out, "--epochs", 3, "--batch-size", 2,
               "--resume", trained, "--no-figures") == 0
    manifest = json.loads((out / "model.json").read_text())
    assert manifest["train"]["step"] == 6 and manifest["train"]["epoch"] == 3
    assert len((out / "loss.csv").read_text().splitlines()) == 4


def test_train_writes_loss_figure(dataset, tmp_path):
    out = tmp_path / "fig"
    assert run("train", "--data", dataset, "--out", out, "--epochs", 1, "--base-channels", 2,
               "--k-clusters", 2) == 0
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_divergence_exits_nonzero(tmp_path):
    data = make_synthetic_dataset(1, 16, seed=0)
    data[0].gt[0, 0, 0] = np.nan
    write_dataset(tmp_path / "bad", data)
    code = run("train", "--data", tmp_path / "bad", "--out", tmp_path / "o", "--epochs", 1,
               "--base-channels", 2, "--no-figures")
    assert code != 0


def test_infer_zero_tail_is_bicubic(fresh_model, dataset, tmp_path):
    out = tmp_path / "hrms.ctn"
    assert run("infer", "--model", fresh_model, "--pan", dataset / "0000_pan.ctn",
               "--lrms", dataset / "0000_lrms.ctn", "--out", out) == 0
    lrms = load_ctn(dataset / "0000_lrms.ctn")
    np.testing.assert_array_equal(load_ctn(out), bicubic_upsample(lrms))
    assert (tmp_path / "hrms.config.json").exists()


def test_infer_k_values_and_api_equivalence(trained, dataset, tmp_path):
    shapes = []
    for k in (1, 8):
        out = tmp_path / f"k{k}.ctn"
        assert run("infer", "--model", trained, "--pan", dataset / "0001_pan.ctn",
                   "--lrms", dataset / "0001_lrms.ctn", "--out", out, "--k-clusters", k) == 0
        pred = load_ctn(out)
        assert np.isfinite(pred).all()
        shapes.append(pred.shape)
    assert shapes[0] == shapes[1] == (32, 32, 4)
    model, _, _ = checkpoint.load_checkpoint(trained)
    pan = load_ctn(dataset / "0001_pan.ctn")
    lrms = load_ctn(dataset / "0001_lrms.ctn")
    direct = model.forward(pan[None], lrms[None], n_clusters=8)[0]
    np.testing.assert_array_equal(load_ctn(tmp_path / "k8.ctn"), direct)


def test_eval_gt_against_itself(dataset, tmp_path):
    report = tmp_path / "gt.json"
    assert run("eval", "--data", dataset, "--report", report, "--baseline", "gt") == 0
    summary = json.loads(report.read_text())["summary"]
    assert summary["n_samples"] == 4
    assert (summary["sam_deg"]["mean"], summary["ergas"]["mean"], summary["q_avg"]["mean"]) == (0, 0, 1)


def test_eval_matches_metric_calls(trained, dataset, tmp_path):
    report = tmp_path / "ev.json"
    assert run("eval", "--model", trained, "--data", dataset, "--report", report) == 0
    per = json.loads(report.read_text())["per_sample"]
    model, _, _ = checkpoint.load_checkpoint(trained)
    for i, s in enumerate(load_dataset(dataset)):
        pred = model.forward(s.pan[None], s.lrms[None])[0]
        assert per["sam_deg"][i] == sam(pred, s.gt)
        assert per["ergas"][i] == ergas(pred, s.gt)
        assert per["q_avg"][i] == q_avg(pred, s.gt, 32)


def test_gradcheck_passes_and_lists_groups(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    for name in ("input", "W", "trunk_w", "trunk_b", "head_cin_w", "head_s_w", "head_cout_w",
                 "bias_w1", "bias_b1", "bias_w2", "bias_b2"):
        assert f" {name} " in out
    assert out.strip().endswith("PASS")


def test_gradcheck_corrupted_gradient_fails(capsys):
    assert run("gradcheck", "--corrupt", "head_s_w") == 1
    assert "FAIL" in capsys.readouterr().out


def test_sweep_k(trained, dataset, tmp_path):
    report = tmp_path / "sweep.csv"
    assert run("sweep-k", "--model", trained, "--data", dataset, "--k-list", "1,2,4",
               "--report", report) == 0
    rows = list(csv.DictReader(report.open()))
    assert [int(r["k"]) for r in rows] == [1, 2, 4]
    assert all(float(r["seconds"]) > 0 for r in rows)
    assert (tmp_path / "sweep.png").exists()
    ev = tmp_path / "k1.json"
    assert run("eval", "--model", trained, "--data", dataset, "--report", ev, "--k-clusters", 1) == 0
    summary = json.loads(ev.read_text())["summary"]
    assert float(rows[0]["sam_deg"]) == pytest.approx(summary["sam_deg"]["mean"], rel=1e-12)
    assert float(rows[0]["ergas"]) == pytest.approx(summary["ergas"]["mean"], rel=1e-12)


def test_cluster_viz_dimensions_and_roundtrip(trained, dataset, tmp_path):
    args = ("cluster-viz", "--model", trained, "--pan", dataset / "0002_pan.ctn",
            "--lrms", dataset / "0002_lrms.ctn", "--k-clusters", 5)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    model, _, _ = checkpoint.load_checkpoint(trained)
    pan = load_ctn(dataset / "0002_pan.ctn")
    model.forward(pan[None], load_ctn(dataset / "0002_lrms.ctn")[None], n_clusters=5)
    for lv, idx in enumerate(model.last_indices):
        img = read_ppm(tmp_path / "a" / f"level_{lv}.ppm")
        assert img.shape == (32 >> lv, 32 >> lv, 3)
        np.testing.assert_array_equal(palette_lookup(img), idx[0])
        assert (tmp_path / "a" / f"level_{lv}.ppm").read_bytes() == \
            (tmp_path / "b" / f"level_{lv}.ppm").read_bytes()


def test_cluster_viz_constant_input_single_color(fresh_model, tmp_path):
    model, _, _ = checkpoint.load_checkpoint(fresh_model)
    model.head_conv.params["w"][...] = 0  # features vanish, so every window matches
    checkpoint.save_checkpoint(fresh_model, model)
    save_ctn(tmp_path / "pan.ctn", np.full((16, 16, 1), 0.5, np.float32))
    save_ctn(tmp_path / "lrms.ctn", np.full((4, 4, 4), 0.5, np.float32))
    assert run("cluster-viz", "--model", fresh_model, "--pan", tmp_path / "pan.ctn",
               "--lrms", tmp_path / "lrms.ctn", "--out", tmp_path / "viz") == 0
    for lv in range(3):
        img = read_ppm(tmp_path / "viz" / f"level_{lv}.ppm")
        assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1


def test_palette_is_fixed_and_distinct():
    assert PALETTE.shape == (32, 3)
    assert len({tuple(c) for c in PALETTE}) == 32
    ids = np.arange(32).reshape(4, 8)
    np.testing.assert_array_equal(palette_lookup(render_index(ids)), ids)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "canconv.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen", "train", "infer", "eval", "gradcheck", "sweep-k", "cluster-viz"):
        assert cmd in res.stdout
