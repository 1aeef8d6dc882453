import csv
import json
import math

import pytest

from dptrain.cli import main


def write_config(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


TRAIN_CONF = """
dataset = synthetic
n = 300
dim = 5
separation = 4.0
widths = 8,1
epochs = 2
batch_size = 32
lr = 0.08
privacy = fixed-sigma
sigma = 1.0
noise_placement = on-sum
"""


class TestAccountantCommand:
    def test_forward_query_document(self, capsys):
        code = main(["accountant", "--sigma", "1", "--q", "1", "--steps", "1",
                     "--delta", "1e-5"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["epsilon"] == pytest.approx(5.3026, rel=0.005)
        assert doc["optimal_alpha"] == 6.0
        assert doc["curve"][0][0] == 1.25

    def test_inverse_round_trip(self, capsys):
        code = main(["accountant", "--target-eps", "10", "--q", "0.01",
                     "--steps", "3000", "--delta", "1e-5"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        sigma = doc["sigma"]
        capsys.readouterr()
        assert main(["accountant", "--sigma", str(sigma), "--q", "0.01",
                     "--steps", "3000", "--delta", "1e-5"]) == 0
        forward = json.loads(capsys.readouterr().out)
        assert forward["epsilon"] <= 10.0

    def test_requires_exactly_one_mode(self, capsys):
        assert main(["accountant", "--q", "1", "--steps", "1"]) == 1
        assert main(["accountant", "--sigma", "1", "--target-eps", "2",
                     "--q", "1", "--steps", "1"]) == 1

    def test_unreachable_target_is_runtime_error(self, capsys):
        code = main(["accountant", "--target-eps", "0.01", "--q", "1", "--steps", "1"])
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_reports(self, tmp_path, capsys):
        conf = write_config(tmp_path, TRAIN_CONF)
        out = tmp_path / "out"
        assert main(["train", str(conf), "--out", str(out)]) == 0
        assert (out / "report.csv").is_file()
        assert (out / "epochs.csv").is_file()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["stop_reason"] == "epochs-exhausted"
        assert summary["config"]["sigma"] == 1.0
        with (out / "report.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 2

    def test_missing_config_exits_one_without_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["train", str(tmp_path / "absent.conf"), "--out", str(out)])
        assert code == 1
        assert not out.exists()

    def test_bad_key_exits_one_without_outputs(self, tmp_path, capsys):
        conf = write_config(tmp_path, TRAIN_CONF + "typo_key = 3\n")
        out = tmp_path / "out"
        assert main(["train", str(conf), "--out", str(out)]) == 1
        assert not out.exists()
        assert "typo_key" in capsys.readouterr().err

    def test_runtime_failure_exits_two(self, tmp_path, capsys):
        conf = write_config(
            tmp_path,
            TRAIN_CONF.replace("privacy = fixed-sigma", "privacy = target-epsilon")
            .replace("sigma = 1.0", "target_eps = 0.01"),
        )
        out = tmp_path / "out"
        assert main(["train", str(conf), "--out", str(out)]) == 2
        assert not out.exists()


class TestSweepCommand:
    def test_degenerate_sweep(self, tmp_path, capsys):
        conf = write_config(
            tmp_path,
            TRAIN_CONF.replace("privacy = fixed-sigma\nsigma = 1.0\n", "")
            + "sweep_target_eps = 5,inf\nsweep_clip_norm = 1.0\nseeds_per_cell = 1\n",
        )
        out = tmp_path / "sweep_out"
        assert main(["sweep", str(conf), "--out", str(out)]) == 0
        with (out / "sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        run_rows = [r for r in rows if r["stop_reason"] not in ("median",)]
        assert len(run_rows) == 2
        private = next(r for r in run_rows if r["target_eps"] == "5.0")
        assert float(private["achieved_eps"]) <= 5.0
        nonprivate = next(r for r in run_rows if r["target_eps"] == "inf")
        assert math.isinf(float(nonprivate["target_eps"]))
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seeds_per_cell"] == 1


class TestGenDataCommand:
    def test_generate_then_train(self, tmp_path, capsys):
        data_path = tmp_path / "blobs.csv"
        gen_conf = write_config(
            tmp_path,
            f"n = 200\ndim = 4\nseparation = 4.0\nlabel_noise = 0.0\nseed = 5\n"
            f"out = {data_path}\n",
            name="gen.conf",
        )
        assert main(["gen-data", str(gen_conf)]) == 0
        assert data_path.is_file()
        train_conf = write_config(
            tmp_path,
            f"dataset = csv\ncsv_path = {data_path}\nwidths = 8,1\nepochs = 2\n"
            "batch_size = 32\nlr = 0.08\nprivacy = off\n",
            name="train.conf",
        )
        out = tmp_path / "out"
        assert main(["train", str(train_conf), "--out", str(out)]) == 0

    def test_rejects_unknown_keys(self, tmp_path, capsys):
        conf = write_config(tmp_path, "n = 10\ndim = 2\nmystery = 1\nout = x.csv\n")
        assert main(["gen-data", str(conf)]) == 1


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_no_arguments(self, capsys):
        assert main([]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
