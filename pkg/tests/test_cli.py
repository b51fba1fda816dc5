import json
from pathlib import Path

import pytest

from fpbench import benchmark as B
from fpbench import cli
from fpbench.cli import ExperimentConfig
from fpbench.nets import load_weights

TINY = dict(
    image_size=8,
    num_classes=3,
    pretrain_n=24,
    probe_train_n=20,
    probe_test_n=12,
    z_values=[4],
    procedures=["I-I-PW", "I-F-FP"],
    repeats=2,
    autoencoder_epochs=2,
    probe_epochs=2,
    batch_size=16,
    lossnet_n=60,
    lossnet_epochs=1,
)


def _cfg(tmp_path, **kw):
    return ExperimentConfig(**{**TINY, "output_dir": str(tmp_path), **kw})


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.z_values == [64, 128, 256]
    assert len(cfg.procedures) == 6 and cfg.repeats == 4
    assert cfg.autoencoder_epochs == 20
    for bad in (dict(z_values=[]), dict(z_values=[0]), dict(repeats=0), dict(procedures=["X-Y-Z"]), dict(dataset="mnist")):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"zvalues": [1]})


def test_flags_override_file_and_env_overrides_seed(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "repeats": 3, "z_values": [8]}))
    args = cli._parser().parse_args(["run-experiment", "--config", str(path), "--z-values", "16,32"])
    cfg = cli.build_config(args, environ={"FPBENCH_SEED": "9"})
    assert (cfg.seed, cfg.repeats, cfg.z_values) == (9, 3, [16, 32])
    args = cli._parser().parse_args(["run-experiment", "--config", str(path), "--seed", "4"])
    assert cli.build_config(args, environ={"FPBENCH_SEED": "9"}).seed == 4


@pytest.fixture(scope="module")
def lossnet_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ln")
    cfg = ExperimentConfig(**{**TINY, "output_dir": str(d)})
    manifest = cli.cmd_train_lossnet(cfg)
    return d, manifest


def test_train_lossnet_is_deterministic(lossnet_dir, tmp_path):
    d, manifest = lossnet_dir
    assert "heldout_accuracy" in manifest.metrics
    model = load_weights(d / "lossnet.fpbw")
    assert model.input_shape == (3, 8, 8)
    cli.cmd_train_lossnet(_cfg(tmp_path))
    assert (tmp_path / "lossnet.fpbw").read_bytes() == (d / "lossnet.fpbw").read_bytes()


def test_low_accuracy_is_a_warning(tmp_path):
    m = cli.cmd_train_lossnet(_cfg(tmp_path, lossnet_accuracy_floor=1.01))
    assert m.warnings and not m.fatal


def test_run_experiment_grid_and_determinism(lossnet_dir, tmp_path):
    ln = str(lossnet_dir[0] / "lossnet.fpbw")
    a, b = tmp_path / "a", tmp_path / "b"
    ma = cli.cmd_run_experiment(_cfg(a, lossnet_path=ln))
    mb = cli.cmd_run_experiment(_cfg(b, lossnet_path=ln, jobs=2))
    assert not ma.fatal and not mb.fatal
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    records = B.read_csv(a / "results.csv")
    assert len(records) == 2 * 1 * 2
    assert all(r.seconds_per_epoch is None for r in records)
    manifest = json.loads((a / "manifest.json").read_text())
    assert all(Path(p).exists() for p in manifest["artifacts"])
    summary = (a / "summary.csv").read_text().splitlines()
    assert summary[0].endswith("formatted") and "±" in summary[1]


def test_failed_cell_is_isolated(lossnet_dir, tmp_path, monkeypatch):
    real = cli._run_cell

    def flaky(cfg, lossnet, roles, proc, z, rep, cell_dir):
        if proc == "I-F-FP" and rep == 1:
            raise RuntimeError("injected")
        return real(cfg, lossnet, roles, proc, z, rep, cell_dir)

    monkeypatch.setattr(cli, "_run_cell", flaky)
    m = cli.cmd_run_experiment(_cfg(tmp_path, lossnet_path=str(lossnet_dir[0] / "lossnet.fpbw")))
    assert m.fatal
    statuses = {(c["procedure"], c["repeat"]): c["status"] for c in m.cells}
    assert statuses[("I-F-FP", 1)] == "failed"
    assert sum(s == "ok" for s in statuses.values()) == 3
    assert len(B.read_csv(tmp_path / "results.csv")) == 3
    assert not (tmp_path / "cells" / "I-F-FP_z4_r1").exists()


def test_missing_lossnet_is_an_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.cmd_run_experiment(_cfg(tmp_path))
    assert cli.main(["run-experiment", "--output-dir", str(tmp_path), "--pretrain-n", "8"]) == 2


def test_benchmark_rows(lossnet_dir, tmp_path):
    cfg = _cfg(tmp_path, lossnet_path=str(lossnet_dir[0] / "lossnet.fpbw"), z_values=[4, 6], timing_epochs=3)
    cli.cmd_benchmark(cfg, timing=True)
    lines = (tmp_path / "benchmark.csv").read_text().splitlines()
    assert len(lines) == 2 + 2 * 2
    assert all(float(l.split(",")[6]) > 0 for l in lines[2:])


def test_convergence_curves(lossnet_dir, tmp_path):
    cfg = _cfg(
        tmp_path, lossnet_path=str(lossnet_dir[0] / "lossnet.fpbw"), convergence_z=4,
        convergence_patience=2, convergence_max_epochs=40,
    )
    m = cli.cmd_convergence(cfg)
    assert not m.fatal
    rows = (tmp_path / "convergence.csv").read_text().splitlines()[1:]
    firsts = {}
    for r in rows:
        proc, epoch, _, norm = r.split(",")
        if epoch == "1":
            firsts[proc] = float(norm)
    assert firsts == {"I-I-PW": 1.0, "I-F-FP": 1.0}
    assert (tmp_path / "convergence.svg").exists()


def test_gen_data(tmp_path):
    assert cli.main(["gen-data", "--dataset", "sprites", "--image-size", "16", "--n", "5", "--out", str(tmp_path / "d.raw")]) == 0
    meta = json.loads((tmp_path / "d.raw.json").read_text())
    assert meta["label_kind"] == "position_f32"
    assert (tmp_path / "d.raw").stat().st_size == 5 * 3 * 16 * 16 + 5 * 8


def test_inspect_weights(lossnet_dir, capsys):
    assert cli.main(["inspect-weights", str(lossnet_dir[0] / "lossnet.fpbw")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["name"] == "loss_network" and info["tap"] == 3
