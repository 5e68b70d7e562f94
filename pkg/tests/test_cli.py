import json
import math
from pathlib import Path

import pytest

from rdassoc.cli import main
from rdassoc.metrics import crb_position_velocity, crb_range_doppler
from rdassoc.saga import REFERENCE_STATE
from rdassoc.scene import NoiseModel


def test_crb_subcommand_matches_library(tmp_path, capsys):
    out = tmp_path / "crb.json"
    rc = main(["crb", "--snr", "-10", "--json", "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    noise = NoiseModel.from_snr(-10.0)
    sr2, sd2 = crb_range_doppler(noise, (0.3, 0.5))
    from rdassoc.scene import SensorArray

    rep = crb_position_velocity(REFERENCE_STATE, SensorArray.uniform(6, 4.0), sr2, sd2)
    assert payload["sigma_r2"] == pytest.approx(sr2, rel=1e-12)
    assert payload["sigma_d2"] == pytest.approx(sd2, rel=1e-12)
    assert payload["crb_p"] == pytest.approx(rep.crb_p, rel=1e-12)
    assert payload["crb_v"] == pytest.approx(rep.crb_v, rel=1e-12)
    assert payload["tau_z"] == pytest.approx(rep.tau_z, rel=1e-12)


def test_crb_text_output(capsys):
    rc = main(["crb", "--snr", "-10", "-5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "crb_p" in out and out.count("SNR") == 2


def test_simulate_then_associate_round_trip(tmp_path, capsys):
    obs_path = tmp_path / "obs.txt"
    rc = main(["simulate", "--n-targets", "5", "--seed", "3",
               "--p-miss", "0", "--out", str(obs_path)])
    assert rc == 0
    assert obs_path.exists()
    out_path = tmp_path / "chains.json"
    rc = main(["associate", "--obs", str(obs_path), "--algo", "saga",
               "--out", str(out_path)])
    assert rc == 0
    payload = json.loads(out_path.read_text())
    n_lines = sum(1 for line in obs_path.read_text().splitlines()
                  if line and not line.startswith("#"))
    assert sum(payload["n_detections_per_sensor"]) == n_lines
    assert payload["n_chains"] == len(payload["chains"]) == len(payload["states"])
    assert payload["n_chains"] == 5  # noiseless: every target recovered


def test_sweep_writes_two_csvs(tmp_path):
    rc = main(["sweep", "--param", "n_targets", "--values", "3,5",
               "--algo", "saga,nn", "--trials", "1", "--seed", "2",
               "--n-targets", "3", "--out", str(tmp_path / "out")])
    assert rc == 0
    assert (tmp_path / "out" / "results_saga.csv").exists()
    assert (tmp_path / "out" / "results_nn.csv").exists()
    assert (tmp_path / "out" / "manifest.json").exists()


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("RDASSOC_OUTDIR", str(tmp_path / "envout"))
    rc = main(["sweep", "--algo", "saga", "--trials", "1",
               "--n-targets", "2", "--seed", "1"])
    assert rc == 0
    assert (tmp_path / "envout" / "results_saga.csv").exists()


def test_unknown_sweep_param_errors(capsys):
    rc = main(["sweep", "--param", "bogus", "--values", "1,2",
               "--algo", "saga", "--trials", "1"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_unreadable_config_errors(tmp_path, capsys):
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    rc = main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o.txt")])
    assert rc == 1
    assert "cannot read config" in capsys.readouterr().err


def test_unknown_config_key_errors(tmp_path, capsys):
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"n_trgts": 3}))
    rc = main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o.txt")])
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_targets": 3, "p_miss": 0.0, "seed": 5}))
    obs_path = tmp_path / "obs.txt"
    rc = main(["simulate", "--config", str(cfg), "--n-targets", "4",
               "--out", str(obs_path)])
    assert rc == 0
    n_lines = sum(1 for line in obs_path.read_text().splitlines()
                  if line and not line.startswith("#"))
    assert n_lines == 4 * 6  # flag overrides the file's n_targets


def test_malformed_observation_file_errors(tmp_path, capsys):
    bad = tmp_path / "obs.txt"
    bad.write_text("0 1.0\n")
    rc = main(["associate", "--obs", str(bad)])
    assert rc == 1
    assert "cannot read observations" in capsys.readouterr().err


def test_unknown_flag_exits_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["crb", "--snr", "-10", "--bogus-flag"])
    assert exc.value.code == 2
