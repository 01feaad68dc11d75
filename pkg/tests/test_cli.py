import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from stflow.cli import build_parser, dispatch

SUBCOMMANDS = [
    "gen-data", "ingest", "train", "sample", "eval", "ablate", "nfe-sweep",
    "plot-density", "prior-baseline",
]

TINY_GEN = {"n_train": 8, "n_val": 4, "n_test": 4}


def _gen(tmp_path, name="data", system="springs", seed=0, **overrides):
    cfg_path = tmp_path / f"{name}_gen.yaml"
    cfg_path.write_text(yaml.safe_dump({**TINY_GEN, **overrides}))
    out = tmp_path / name
    rc = dispatch(["gen-data", "--system", system, "--config", str(cfg_path),
                   "--out", str(out), "--seed", str(seed)])
    assert rc == 0
    return out


def test_every_subcommand_has_help(capsys):
    for sub in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([sub, "--help"])
        assert exc.value.code == 0
        assert "--" in capsys.readouterr().out


def test_unknown_flag_exits_one(capsys):
    rc = dispatch(["gen-data", "--system", "springs", "--out", "x", "--bogus"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_unknown_subcommand_exits_one():
    assert dispatch(["frobnicate"]) == 1


def test_invalid_config_key_names_offender(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"n_train": 4, "gravity_strength": 2.0}))
    rc = dispatch(["gen-data", "--system", "springs", "--config", str(cfg),
                   "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "gravity_strength" in capsys.readouterr().err


def test_gen_data_writes_dataset_and_manifest(tmp_path):
    out = _gen(tmp_path)
    assert (out / "meta.json").exists()
    assert (out / "train.g0.positions.npy").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 0
    assert manifest["config"]["n_train"] == 8


def test_gen_data_then_prior_baseline_smoke(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "baseline"
    rc = dispatch(["prior-baseline", "--data", str(data), "--out", str(out), "--runs", "2"])
    assert rc == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) >= {"ade", "fde"}
    assert metrics["ade"] > 0
    assert (out / "density.png").exists()
    assert (out / "density.csv").exists()


def test_manifest_rerun_bit_identical_dataset(tmp_path):
    first = _gen(tmp_path, name="first", seed=3)
    manifest = json.loads((first / "run_manifest.json").read_text())
    argv = list(manifest["argv"])
    argv[argv.index(str(first))] = str(tmp_path / "second")
    assert dispatch(argv) == 0
    for name in ("train.g0.positions.npy", "val.g0.positions.npy", "test.g0.positions.npy"):
        assert (first / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_manifest_rerun_identical_metrics(tmp_path):
    data = _gen(tmp_path, seed=5)
    out_a = tmp_path / "eval_a"
    rc = dispatch(["prior-baseline", "--data", str(data), "--out", str(out_a), "--runs", "2"])
    assert rc == 0
    manifest = json.loads((out_a / "run_manifest.json").read_text())
    argv = list(manifest["argv"])
    argv[argv.index(str(out_a))] = str(tmp_path / "eval_b")
    assert dispatch(argv) == 0
    assert (out_a / "metrics.json").read_text() == (tmp_path / "eval_b" / "metrics.json").read_text()


def test_ingest_md17_smoke(tmp_path):
    rng = np.random.default_rng(0)
    z = np.array([6, 6, 8, 1, 1, 1, 1, 1, 1])
    R = rng.standard_normal((9, 3))[None] + 0.01 * rng.standard_normal((600, 9, 3)).cumsum(0)
    src = tmp_path / "ethanol.npz"
    np.savez(src, R=R, z=z)
    out = tmp_path / "md17"
    rc = dispatch(["ingest", "--kind", "md17", "--path", str(src), "--molecule", "ethanol",
                   "--out", str(out)])
    assert rc == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["dataset_kind"] == "md17"


def test_ingest_md17_requires_molecule(tmp_path, capsys):
    src = tmp_path / "x.npz"
    np.savez(src, R=np.zeros((30, 2, 3)), z=np.array([1, 1]))
    rc = dispatch(["ingest", "--kind", "md17", "--path", str(src), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "molecule" in capsys.readouterr().err


def test_ingest_ethucy_smoke(tmp_path):
    rows = [f"{10 * f:.1f} 1.0 {0.1 * f:.2f} {0.05 * f:.2f}" for f in range(25)]
    rows += [f"{10 * f:.1f} 2.0 {0.1 * f + 1:.2f} {0.05 * f:.2f}" for f in range(25)]
    src = tmp_path / "scene.txt"
    src.write_text("\n".join(rows))
    out = tmp_path / "ethucy"
    rc = dispatch(["ingest", "--kind", "ethucy", "--path", str(src), "--out", str(out),
                   "--scene", "toy"])
    assert rc == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["dataset_kind"] == "ethucy"
    assert meta["extra"]["n_windows"] == 6


def test_train_sample_eval_round_trip(tmp_path):
    data = _gen(tmp_path, T=8, cond_len=3)
    run = tmp_path / "run"
    rc = dispatch([
        "train", "--data", str(data), "--out", str(run), "--epochs", "1", "--layers", "1",
        "--hidden", "16", "--batch-size", "4", "--augmentations", "0", "--seed", "0",
    ])
    assert rc == 0
    assert (run / "best.pt").exists()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 1

    sample_out = tmp_path / "samples"
    rc = dispatch(["sample", "--checkpoint", str(run / "best.pt"), "--data", str(data),
                   "--out", str(sample_out), "--nfe", "4", "--runs", "2"])
    assert rc == 0
    runs = sorted(p for p in sample_out.iterdir() if p.is_dir())
    assert [p.name for p in runs] == ["run0", "run1"]
    from stflow.core import load_dataset

    reloaded = load_dataset(runs[0])
    assert reloaded.splits["test"][0].positions.shape[1] == 8  # container round trip

    eval_out = tmp_path / "eval"
    rc = dispatch(["eval", "--checkpoint", str(run / "best.pt"), "--data", str(data),
                   "--out", str(eval_out), "--runs", "2", "--nfe", "4"])
    assert rc == 0
    metrics = json.loads((eval_out / "metrics.json").read_text())
    assert metrics["k"] == 2 and metrics["nfe"] == 4

    plot_out = tmp_path / "plots"
    rc = dispatch(["plot-density", "--pred", str(runs[0]), "--data", str(data),
                   "--out", str(plot_out)])
    assert rc == 0
    assert (plot_out / "density.png").exists()


def test_train_config_file_with_unknown_key(tmp_path, capsys):
    data = _gen(tmp_path, T=8, cond_len=3)
    cfg = tmp_path / "train.yaml"
    cfg.write_text(yaml.safe_dump({"train": {"epochs": 1, "momentum": 0.9}}))
    rc = dispatch(["train", "--data", str(data), "--out", str(tmp_path / "r"),
                   "--config", str(cfg)])
    assert rc == 1
    assert "momentum" in capsys.readouterr().err


def test_nfe_sweep_smoke(tmp_path):
    data = _gen(tmp_path, T=8, cond_len=3)
    run = tmp_path / "run"
    assert dispatch(["train", "--data", str(data), "--out", str(run), "--epochs", "1",
                     "--layers", "1", "--hidden", "16", "--batch-size", "4",
                     "--augmentations", "0"]) == 0
    out = tmp_path / "sweep"
    rc = dispatch(["nfe-sweep", "--checkpoint", str(run / "best.pt"), "--data", str(data),
                   "--out", str(out), "--nfe-list", "1,2,4", "--methods", "euler,rk4",
                   "--runs", "2", "--limit", "3"])
    assert rc == 0
    lines = (out / "nfe_sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 + 1  # header + euler{1,2,4} + rk4{4}
    assert (out / "nfe_sweep.png").exists()


def test_ablate_smoke(tmp_path):
    data = _gen(tmp_path, T=8, cond_len=3)
    suite = tmp_path / "suite.yaml"
    suite.write_text(yaml.safe_dump({
        "base": {"model": {"n_layers": 1, "hidden_dim": 16},
                 "train": {"epochs": 1, "batch_size": 4}},
        "variants": [{"name": "no_spatial", "use_spatial": False}],
    }))
    out = tmp_path / "ablation"
    rc = dispatch(["ablate", "--suite", str(suite), "--data", str(data), "--out", str(out),
                   "--runs", "1", "--nfe", "2"])
    assert rc == 0
    rows = json.loads((out / "ablation_table.json").read_text())
    assert [r["name"] for r in rows] == ["base", "no_spatial"]
    assert rows[1]["spatial_params"] == 0 < rows[0]["spatial_params"]


def test_data_root_env_resolution(tmp_path, monkeypatch):
    data = _gen(tmp_path, name="rooted")
    monkeypatch.setenv("STFLOW_DATA_ROOT", str(tmp_path))
    out = tmp_path / "rooted_eval"
    rc = dispatch(["prior-baseline", "--data", "rooted", "--out", str(out), "--runs", "1"])
    assert rc == 0


def test_commands_do_not_mutate_inputs(tmp_path):
    data = _gen(tmp_path)
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    out = tmp_path / "b2"
    assert dispatch(["prior-baseline", "--data", str(data), "--out", str(out), "--runs", "1"]) == 0
    after = {p.name: p.read_bytes() for p in data.iterdir()}
    assert before == after
