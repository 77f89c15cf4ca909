import csv
import json
import subprocess
import sys

import pytest

from kinaema.cli import build_parser, main

TINY_MODEL = ["model.n_mem=4", "model.mem_dim=16", "model.n_read=8", "model.read_dim=8", "model.vis_dim=8",
              "model.vis_hidden=16", "model.update_layers=1", "model.gating_layers=1",
              "model.decoder_blocks=1", "model.decoder_chains=1", "model.head_hidden=8", "model.gru_hidden=8",
              "model.gru_layers=1", "model.gru_read_hidden=4", "model.ema_size=64", "model.t_trunc=6"]
TINY_TRAIN = ["train.batch_size=4", "train.total_steps=6", "train.t_min=4", "train.t_max=6",
              "train.val_every=3", "train.val_episodes=3", "train.log_every=1", "train.lr_base=1e-2"]


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "train", "--episodes", 6, "--length", 20,
               "--episodes-per-scene", 3, "--seed", 1) == 0
    assert run("gen-data", "--out", root / "eval", "--episodes", 3, "--length", 24, "--profile", "eval",
               "--seed", 2) == 0
    assert run("train", "--data", root / "train", "--out", root / "run", *TINY_MODEL, *TINY_TRAIN) == 0
    return root


class TestGenData:
    def test_repeat_is_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--episodes", 4, "--length", 10) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[1] == out[3] and out[1].startswith("manifest sha256 ")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        side = json.loads((tmp_path / "a.run.json").read_text())
        assert side["argv"][0] == "gen-data" and side["finished_unix"] >= side["started_unix"]

    def test_eval_profile_steps(self, workspace):
        from kinaema.dataset import read_dataset
        from kinaema.world import Pose, step
        manifest = json.loads((workspace / "eval" / "manifest.json").read_text())
        assert manifest["meta"]["profile"] == "eval"
        rec = read_dataset(workspace / "eval")[0]
        assert rec.profile == "eval"
        nxt = step(Pose(1.0, 1.0, 0.0), "forward", "eval")
        assert nxt.x == pytest.approx(1.25)
        assert step(Pose(1.0, 1.0, 0.0), "left", "eval").heading == pytest.approx(0.174533, abs=1e-6)

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--episodes", 2)
        assert exc.value.code == 2

    def test_bad_override_exits_2(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "x", "world.landmarks=lots") == 2
        assert "world.landmarks" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()


class TestTrainEvalFlow:
    def test_run_directory(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "best" / "checkpoint.json").exists()
        assert (run_dir / "last" / "optimizer.bin").exists()
        log = [json.loads(line) for line in (run_dir / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == list(range(6))
        assert "val" in log[2]

    def test_eval_json_is_nested_and_repeatable(self, workspace, tmp_path):
        for name in ("a.json", "b.json"):
            assert run("eval", "--checkpoint", workspace / "run" / "best", "--dataset", workspace / "eval",
                       "--lengths", "6,12", "--out", tmp_path / name) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        rep = json.loads((tmp_path / "a.json").read_text())
        for table in [rep["accuracy"], *rep["by_length"].values(), *rep["by_type"].values()]:
            assert table["1m_10deg"] <= table["1m_90deg"] <= table["2m_90deg"]
        assert rep["counts"]["length_6"] == 3 * 2 * 6

    def test_eval_to_stdout(self, workspace, capsys):
        assert run("eval", "--checkpoint", workspace / "run" / "last", "--dataset", workspace / "eval",
                   "--lengths", "5") == 0
        assert "accuracy" in json.loads(capsys.readouterr().out)

    def test_eval_length_too_long(self, workspace):
        assert run("eval", "--checkpoint", workspace / "run" / "best", "--dataset", workspace / "eval",
                   "--lengths", "40") == 2

    def test_missing_checkpoint_exits_3(self, workspace, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "none", "--dataset", workspace / "eval") == 3

    def test_sweep(self, workspace, tmp_path):
        ck = workspace / "run" / "best"
        assert run("sweep", "--checkpoint", f"a={ck}", "--checkpoint", f"b={ck}", "--dataset",
                   workspace / "eval", "--lengths", "4,8", "--out", tmp_path / "s.csv") == 0
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 3
        assert [r["accuracy"] for r in rows if r["model"] == "a"] == [r["accuracy"] for r in rows
                                                                      if r["model"] == "b"]

    def test_resume_reaches_same_weights(self, workspace, tmp_path):
        args = ["--data", workspace / "train", "--out", tmp_path / "r", *TINY_MODEL, *TINY_TRAIN]
        assert run("train", *args, "--stop-after", 3) == 0
        assert run("train", *args, "--resume") == 0
        for name in ("weights.bin", "optimizer.bin"):
            assert (tmp_path / "r" / "last" / name).read_bytes() == \
                (workspace / "run" / "last" / name).read_bytes()
        assert (tmp_path / "r" / "train_log.jsonl").read_bytes() == \
            (workspace / "run" / "train_log.jsonl").read_bytes()

    def test_dump_attn(self, workspace, tmp_path):
        assert run("dump-attn", "--checkpoint", workspace / "run" / "best", "--dataset", workspace / "eval",
                   "--episode", 1, "--length", 6, "--out", tmp_path / "attn") == 0
        assert {p.name for p in (tmp_path / "attn").iterdir()} == {"attention.json", "assignment.csv",
                                                                   "head_mass.csv"}
        assert run("dump-attn", "--checkpoint", workspace / "run" / "best", "--dataset", workspace / "eval",
                   "--episode", 9, "--out", tmp_path / "x") == 2

    def test_inspect(self, workspace, capsys):
        assert run("inspect", workspace / "train") == 0
        info = json.loads(capsys.readouterr().out)
        assert info["kind"] == "dataset" and info["episodes"] == 6 and info["scenes"] == 2
        assert run("inspect", workspace / "run" / "last") == 0
        info = json.loads(capsys.readouterr().out)
        assert info["kind"] == "checkpoint" and info["has_optimizer"] and info["step"] == 6
        assert run("inspect", workspace) == 3


class TestBenchAndGradCheck:
    def test_bench_rows(self, tmp_path):
        assert run("bench", "--models", "kinaema,ema,trunc", "--steps", "10,100,1000", "--repeats", 3,
                   "--warmup", 1, "--out", tmp_path / "b.csv", *TINY_MODEL) == 0
        with open(tmp_path / "b.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["model"], int(r["step"])) for r in rows] == [
            (m, s) for m in ("kinaema", "ema", "trunc") for s in (10, 100, 1000)]
        assert all(float(r["update_median_us"]) > 0 for r in rows)

    def test_bench_unknown_family(self):
        assert run("bench", "--models", "lstm", "--steps", "10") == 2

    def test_grad_check_passes(self, capsys):
        assert run("grad-check", "--model", "ema", "--max-entries", 8) == 0
        out = capsys.readouterr().out
        assert "memory_update" in out and "max rel. error" in out

    def test_grad_check_impossible_tolerance(self):
        assert run("grad-check", "--model", "trunc", "--max-entries", 4, "--tol", 0) == 4


def test_help_lists_every_subcommand_and_flag():
    text = build_parser().format_help()
    for name in ("gen-data", "train", "eval", "sweep", "bench", "dump-attn", "grad-check", "replicate", "inspect"):
        assert name in text
    out = subprocess.run([sys.executable, "-m", "kinaema.cli", "train", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("--data", "--val-data", "--out", "--resume", "--stop-after", "--config", "section.key=value"):
        assert flag in out
