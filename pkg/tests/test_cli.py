import json
from pathlib import Path

import pytest

from moile import cli
from moile.config import ConfigError, ExperimentConfig, parse_config
from moile.trainer import RunRecord, TrainConfig

SMOKE = """\
# tiny sweep
train.steps_per_task = 1
train.warmup_steps = 0
train.batch_size = 4
bench.setup = HH
bench.seeds = 0
bench.episodes_per_task = 8
bench.eval_per_task = 4
run.variants = full,disable_incremental
"""


def test_parse_defaults_and_roundtrip():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.train.lambda1 == 1.0 and cfg.train.lambda2 == 0.5 and cfg.train.M == 4
    again = parse_config(cfg.dumps())
    assert again == cfg


def test_parse_values():
    cfg = parse_config("train.disable_Lo = true\nbench.orders = 1,3\nrun.variants = full, seq_lora\n")
    assert cfg.train.disable_Lo is True and cfg.orders == (1, 3)
    assert cfg.variants == ("full", "seq_lora")
    assert cfg.train_config("seq_lora", 2) == TrainConfig(mode="seq_lora", seed=2)
    assert cfg.train_config("disable_Ls", 0).disable_Ls


@pytest.mark.parametrize("text", [
    "train.bogus = 1",
    "nokey",
    "train.K = two",
    "train.disable_Ls = maybe",
    "bench.setup = XX",
    "bench.orders = 4",
    "run.variants = nonsense",
    "train.mode = seq_lora\ntrain.disable_Ls = true",
])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "smoke.cfg").write_text(SMOKE + f"run.output_dir = {tmp_path / 'out'}\n")
    return tmp_path


def test_gen_is_idempotent(workdir, capsys):
    assert cli.main(["gen", "--config", "smoke.cfg"]) == 0
    path = workdir / "out" / "streams" / "HH_o1_s0.jsonl"
    first = path.read_bytes()
    assert cli.main(["gen", "--config", "smoke.cfg"]) == 0
    assert path.read_bytes() == first
    assert (workdir / "out" / "config.echo.txt").exists()


def test_gen_all_setups(workdir):
    assert cli.main(["gen", "--config", "smoke.cfg", "--all", "--set", "bench.orders=1,2,3"]) == 0
    assert len(list((workdir / "out" / "streams").glob("*.jsonl"))) == 15


def test_train_requires_streams(workdir, capsys):
    assert cli.main(["train", "--config", "smoke.cfg"]) == 1
    assert "missing" in capsys.readouterr().err


def test_train_report_spectrum_embed(workdir, capsys):
    assert cli.main(["train", "--config", "smoke.cfg", "--generate"]) == 0
    rec_dir = workdir / "out" / "records"
    full = RunRecord.read(rec_dir / "HH_o1_s0_full.json")
    wo = RunRecord.read(rec_dir / "HH_o1_s0_disable_incremental.json")
    assert full.stream["digest"] == wo.stream["digest"]
    echo = (workdir / "out" / "config.echo.txt").read_text()
    assert parse_config(echo) == parse_config((workdir / "smoke.cfg").read_text())

    before = {p: p.read_bytes() for p in rec_dir.iterdir()}
    capsys.readouterr()
    assert cli.main(["report", str(rec_dir), "--out", "rep"]) == 0
    out = capsys.readouterr().out
    assert {p: p.read_bytes() for p in rec_dir.iterdir()} == before
    lines = out.splitlines()
    i = lines.index("# AA (%)")
    assert lines[i + 1] == "Method | Order1 | Avg"
    assert [ln.split(" | ")[0] for ln in lines[i + 2:i + 4]] == ["Ours - w/oIL", "Ours"]
    assert (workdir / "rep" / "first_task_trajectory.csv").exists()
    assert (workdir / "rep" / "first_task_trajectory.png").stat().st_size > 0

    ck = rec_dir / "HH_o1_s0_full.ckpt.json"
    assert cli.main(["spectrum", str(ck), "--out", "spec"]) == 0
    assert (workdir / "spec" / "spectrum.csv").read_text().startswith("adapter,index,sigma")
    stream = workdir / "out" / "streams" / "HH_o1_s0.jsonl"
    assert cli.main(["embed-dump", str(stream), "--checkpoint", str(ck), "--out", "emb.csv"]) == 0
    rows = (workdir / "emb.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 4


def test_report_prints_known_numbers(tmp_path, capsys):
    for order, acc in ((1, [[1.0], [0.5, 1.0]]), (2, [[1.0], [0.0, 0.5]])):
        RunRecord(config={}, variant="Ours", stream={"order": order, "seed": 0}, accuracy=acc).write(
            tmp_path / f"r{order}.json")
    assert cli.main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "Ours | 75.00 | 25.00 | 50.00" in out
    assert "Ours | 50.00 | 100.00 | 75.00" in out


def test_report_rejects_mixed_lengths(tmp_path, capsys):
    RunRecord(config={}, variant="Ours", stream={"order": 1, "seed": 0}, accuracy=[[1.0]]).write(tmp_path / "a.json")
    RunRecord(config={}, variant="Ours", stream={"order": 1, "seed": 1},
              accuracy=[[1.0], [1.0, 1.0]]).write(tmp_path / "b.json")
    assert cli.main(["report", str(tmp_path), "--out", str(tmp_path / "rep")]) == 1


def test_numerical_abort_exit_code(workdir, monkeypatch):
    from moile import numcore as nc
    from moile import trainer

    monkeypatch.setattr(trainer, "prediction_loss", lambda lg, t: nc.tsum(lg) * float("nan"))
    assert cli.main(["train", "--config", "smoke.cfg", "--generate", "--set", "run.variants=full"]) == 2
    rec = json.loads((workdir / "out" / "records" / "HH_o1_s0_full.json").read_text())
    assert rec["status"].startswith("nan")


def test_threads_env(monkeypatch):
    monkeypatch.setenv("MOILE_THREADS", "3")
    assert cli.workers() == 3
    monkeypatch.setenv("MOILE_THREADS", "x")
    with pytest.raises(ConfigError):
        cli.workers()
