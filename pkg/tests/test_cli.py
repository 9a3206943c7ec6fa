import json
from pathlib import Path

import numpy as np
import pytest

from samdyn.cli import main
from samdyn.config import (
    ConfigError,
    load_grid_spec,
    load_train_setup,
    parse_config_file,
)
from samdyn.data import load_dataset
from samdyn.experiments import phase_grid_spec

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


TINY_TRAIN = """
d = 50
n = 8
mu_norm = 3.0
m = 3
eta = 0.3
B = 4
epochs = 4
seed = 1
"""

TINY_GRID = """
d_values = 50
mu_values = 2.0
seeds = 0
n = 8
m = 3
algos = sgd
eta = 0.3
B = 8
epochs = 4
n_test = 100
"""


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "gen-data" in capsys.readouterr().out


def test_gen_data_roundtrip(tmp_path, capsys):
    out = tmp_path / "ds.npz"
    code = main([
        "gen-data", "--d", "64", "--n", "10", "--mu-norm", "2.5",
        "--p", "0.1", "--seed", "3", "--out", str(out),
    ])
    assert code == 0
    ds = load_dataset(out)
    assert ds.n == 10 and ds.params.d == 64 and ds.params.p == 0.1
    assert (tmp_path / "manifest.json").exists()


def test_train_deterministic_metrics(tmp_path):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a"),
                 "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"),
                 "--seed", "1"]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/coeffs.csv").read_bytes() == (tmp_path / "b/coeffs.csv").read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["tool"] == "samdyn"
    assert manifest["config"]["eta"] == 0.3


def test_malformed_config_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_TRAIN.replace("d = 50", "d = 50\nsigma_p = -1.0"))
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "sigma_p" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_TRAIN + "\nsigma_q = 1.0\n")
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "sigma_q" in capsys.readouterr().err


def test_batch_must_divide_n(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_TRAIN.replace("B = 4", "B = 3"))
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "divide" in capsys.readouterr().err


def test_env_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    monkeypatch.setenv("SAMDYN_EPOCHS", "2")
    monkeypatch.setenv("SAMDYN_B", "2")  # case-insensitive key match
    setup = load_train_setup(cfg)
    assert setup.train.epochs == 2
    assert setup.train.B == 2


def test_env_override_unknown_key(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    monkeypatch.setenv("SAMDYN_EPOCHZ", "2")
    with pytest.raises(ConfigError, match="EPOCHZ"):
        load_train_setup(cfg)


def test_parse_rejects_garbage(tmp_path):
    cfg = write_cfg(tmp_path, "this is not a config\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_file(cfg)


def test_grid_cli_end_to_end(tmp_path):
    cfg = write_cfg(tmp_path, TINY_GRID)
    out = tmp_path / "grid"
    assert main(["grid", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "results.csv").exists()
    assert (out / "heatmap_sgd.csv").exists()
    assert (out / "heatmap_sgd.pgm").exists()
    assert (out / "manifest.json").exists()
    checks = list((out / "checks").glob("*.csv"))
    assert len(checks) == 1
    # resume with everything done is a no-op with identical output
    before = (out / "results.csv").read_bytes()
    assert main(["grid", "--config", str(cfg), "--out", str(out), "--resume"]) == 0
    assert (out / "results.csv").read_bytes() == before


def test_check_cli(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        """
d = 400
n = 8
mu_norm = 2.0
m = 4
init = gaussian
sigma_0 = 0.0125
algo = sam
eta = 0.001
B = 4
epochs = 10
tau = 0.45
seed = 0
""",
    )
    out = tmp_path / "check"
    assert main(["check", "--config", str(cfg), "--out", str(out)]) == 0
    report = (out / "report.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in report[1:]]
    assert names == [
        "set_monotonicity", "logit_ratio", "zeta_range", "omega_range",
        "gamma_range", "good_batches", "sam_deactivation",
    ]
    assert "sam_deactivation" in capsys.readouterr().out


def test_decompose_cli(tmp_path):
    # train persists the dataset it generated, so decompose composes with
    # its checkpoints directly and the drift projects with zero residual
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
    out = tmp_path / "dec"
    assert main([
        "decompose", "--data", str(run_dir / "dataset.npz"),
        "--weights", str(run_dir / "w_final.npz"),
        "--weights0", str(run_dir / "w0.npz"), "--out", str(out),
    ]) == 0
    lines = (out / "decomposition.csv").read_text().splitlines()
    assert lines[0] == "j,r,gamma,sum_zeta,min_omega,max_zeta"
    assert len(lines) == 1 + 2 * 3
    blob = np.load(out / "rho.npz")
    assert blob["rho"].shape == (2, 3, 8)
    assert float(blob["residual"]) <= 1e-9


def test_checked_in_reduced_config_matches_preset():
    spec, _ = load_grid_spec(CONFIGS / "phase_reduced.cfg")
    preset = phase_grid_spec(reduced=True)
    assert spec.d_values == preset.d_values
    assert spec.mu_values == preset.mu_values
    assert spec.seeds == preset.seeds
    assert spec.n == preset.n and spec.m == preset.m and spec.p == preset.p
    assert spec.n_test == preset.n_test
    assert spec.train == preset.train


def test_checked_in_full_configs_parse():
    sgd, _ = load_grid_spec(CONFIGS / "phase_sgd.cfg")
    sam, _ = load_grid_spec(CONFIGS / "phase_sam.cfg")
    full = phase_grid_spec()
    assert sgd.d_values == full.d_values == sam.d_values
    assert sgd.train["sgd"] == full.train["sgd"]
    assert sam.train["sam"] == full.train["sam"]
    demo_train = load_train_setup(CONFIGS / "train_demo.cfg")
    assert demo_train.train.epochs == 100
    demo_check = load_train_setup(CONFIGS / "check_demo.cfg")
    assert demo_check.train.algo == "sam"
