import subprocess
import sys
import time

import pytest
import yaml

from adaptive_semcom import cli

TINY_TRAIN = {
    "system": {"width": 8, "policy_hidden": 8},
    "batch_size": 8, "subset": 16,
    "stages": [{"epochs": 1, "lr": 1e-3}],
}


def write_cfg(path, **over):
    cfg = {"schema_version": 1, "seed": 3, "data_root": "synthetic", "output_dir": str(path.parent / "out"),
           "train": TINY_TRAIN, "channel": {"users": 2, "antennas": 2, "snr_grid_db": [0, 5, 10, 15, 20, 25]},
           "eval": {"images": 8, "frames_per_batch": 4}}
    cfg.update(over)
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_load_config_valid_and_env(tmp_path):
    p = write_cfg(tmp_path / "c.yaml")
    cfg = cli.load_config(p, env={})
    assert cfg.seed == 3 and cfg.train.seed == 3 and cfg.train.system.width == 8
    assert cfg.snr_grid_db == (0, 5, 10, 15, 20, 25)
    env = cli.load_config(p, env={"ADAPTIVE_SEMCOM_OUT": str(tmp_path / "o2"), "ADAPTIVE_SEMCOM_DATA": str(tmp_path)})
    assert env.output_dir == str(tmp_path / "o2") and env.data_root == str(tmp_path)
    assert cfg.tag() == f"config_hash={cfg.fingerprint} seed=3"


def test_config_errors_listed_together(tmp_path):
    p = write_cfg(tmp_path / "c.yaml", schema_version=2, colour="red", data_root=str(tmp_path / "nope"),
                  channel={"users": 2, "csi_mode": "psychic", "speed": 3})
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(p, env={})
    msg = str(err.value)
    for key in ("schema_version", "colour", "data_root", "channel.speed", "channel.csi_mode"):
        assert key in msg
    with pytest.raises(cli.ConfigError, match="train"):
        cli.load_config(write_cfg(tmp_path / "d.yaml", train={"learning_rate": 1}), env={})
    with pytest.raises(cli.ConfigError, match="not found"):
        cli.load_config(tmp_path / "missing.yaml", env={})


def test_exit_codes(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", str(tmp_path / "missing.yaml")]) == 1
    assert cli.main(["plot", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.png")]) == 3
    assert cli.main(["selftest", "--corrupt-constellation"]) == 2
    assert "64-QAM round trip" in capsys.readouterr().out


def test_selftest_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert cli.main(["selftest"]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_simulate_channel(tmp_path, capsys):
    out = tmp_path / "ch.csv"
    assert cli.main(["simulate-channel", "--trials", "20", "--length", "64", "--grid", "0,10,20",
                     "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# antennas=2 users=2") and lines[1] == "snr_db,csi,detector_mse,mean_snr_hat_db"
    rows = [line.split(",") for line in lines[2:]]
    assert len(rows) == 6
    perfect = [float(r[2]) for r in rows if r[1] == "perfect"]
    ls = [float(r[2]) for r in rows if r[1] == "ls"]
    assert perfect[0] > perfect[1] > perfect[2]
    assert all(a <= b for a, b in zip(perfect, ls))


def test_train_sweep_plot_end_to_end(tmp_path, capsys, data_root):
    p = write_cfg(tmp_path / "c.yaml")
    cfg = cli.load_config(p, env={})
    assert cli.main(["train", str(p)]) == 0
    run = tmp_path / "out" / f"{cfg.fingerprint}-s3"
    ckpt = run / "last.npz"
    assert ckpt.exists() and (run / "metrics.csv").read_text().startswith(f"# {cfg.tag()}")
    first = (run / "metrics.csv").read_text()
    assert cli.main(["train", str(p), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / f"{cfg.fingerprint}-s3" / "metrics.csv").read_text() == first

    assert cli.main(["sweep", str(p), str(ckpt), "--csi-mode", "imperfect"]) == 0
    csvs = list(run.glob("sweep_imperfect_*.csv"))
    assert len(csvs) == 1 and cfg.fingerprint in csvs[0].name and "s3" in csvs[0].name
    text = csvs[0].read_text()
    body = [line for line in text.splitlines() if not line.startswith("#")]
    assert len(body) == 7 and all(",imperfect," in line for line in body[1:])
    assert f"# config_hash={cfg.fingerprint}" in text
    assert csvs[0].with_suffix(".png").stat().st_size > 0
    assert csvs[0].with_suffix(".jsonl").stat().st_size > 0

    other = write_cfg(tmp_path / "o.yaml", seed=4)
    capsys.readouterr()
    assert cli.main(["sweep", str(other), str(ckpt)]) == 0
    assert "differs" in capsys.readouterr().err
    assert cli.main(["plot", str(csvs[0]), "--out", str(tmp_path / "p.png")]) == 0
    assert (tmp_path / "p.png").stat().st_size > 0


def test_help_documents_commands():
    out = subprocess.run([sys.executable, "-m", "adaptive_semcom.cli", "--help"], capture_output=True, text=True)
    for cmd in ("train", "sweep", "simulate-channel", "selftest", "plot"):
        assert cmd in out.stdout
    sub = subprocess.run([sys.executable, "-m", "adaptive_semcom.cli", "simulate-channel", "--help"],
                         capture_output=True, text=True)
    assert "--antennas" in sub.stdout and "--trials" in sub.stdout
