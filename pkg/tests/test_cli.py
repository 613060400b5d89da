"""End-to-end checks of the ``csunet`` command line."""

import json

import numpy as np
import pytest

from csunet import cli
from csunet.data import read_pnm, save_directory, synth_dataset, write_pnm
from csunet.network import forward
from csunet.tensor import Tensor, no_grad
from csunet.trainer import LAST_CKPT, METRICS_LOG, load_params, read_log

SMALL = ["--set", "train.epochs=2", "--set", "train.warmup_epochs=1", "--set", "data.train_samples=8",
         "--set", "data.val_samples=4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["-q", "train", *SMALL, "--set", "train.lr=0.002", "--out", str(out)]) == 0
    return out


class TestTrain:
    def test_artifacts(self, run_dir):
        assert (run_dir / LAST_CKPT).is_file() and (run_dir / METRICS_LOG).is_file()
        assert (run_dir / "config.ini").is_file()

    def test_override_in_snapshot(self, run_dir):
        assert "lr = 0.002" in (run_dir / "config.ini").read_text()

    def test_rerun_reproduces_log(self, run_dir, tmp_path):
        assert cli.main(["-q", "train", *SMALL, "--set", "train.lr=0.002", "--out", str(tmp_path)]) == 0
        assert (tmp_path / METRICS_LOG).read_bytes() == (run_dir / METRICS_LOG).read_bytes()

    def test_snapshot_reruns(self, run_dir, tmp_path):
        assert cli.main(["-q", "train", str(run_dir / "config.ini"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / METRICS_LOG).read_bytes() == (run_dir / METRICS_LOG).read_bytes()

    def test_invalid_config(self, tmp_path, capsys):
        assert cli.main(["train", "--set", "model.window_size=5", "--out", str(tmp_path)]) == 1
        assert "model.input_size" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", str(tmp_path / "nope.ini")]) == 1


class TestEval:
    def test_reports_and_records(self, run_dir, tmp_path, capsys):
        rec = tmp_path / "eval.jsonl"
        assert cli.main(["eval", str(run_dir / LAST_CKPT), "--records", str(rec)]) == 0
        out = capsys.readouterr().out
        assert "mean" in out and "HD95" in out
        rows = [json.loads(line) for line in rec.read_text().splitlines()]
        assert rows[-1]["class"] == "mean" and 0 < rows[-1]["dsc"] <= 1
        last = read_log(run_dir / METRICS_LOG)[-1]
        assert abs(rows[-1]["dsc"] - last["val_mean_dsc"]) <= 1e-9

    def test_perfect_predictions(self, run_dir, tmp_path):
        samples = synth_dataset(3, 3, 128, 4)
        save_directory(tmp_path / "data", samples)
        (tmp_path / "pred").mkdir()
        for s in samples:
            write_pnm(tmp_path / "pred" / f"{s.id}.pgm", s.mask.astype(np.uint8))
        rec = tmp_path / "r.jsonl"
        args = ["eval", str(run_dir / LAST_CKPT), "--data", str(tmp_path / "data"),
                "--predictions", str(tmp_path / "pred"), "--records", str(rec)]
        assert cli.main(args) == 0
        mean = json.loads(rec.read_text().splitlines()[-1])
        assert mean["dsc"] == 1.0 and mean["hd95"] == 0.0

    def test_incompatible_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"CSUC" + (7).to_bytes(2, "little") + bytes(8))
        assert cli.main(["eval", str(bad)]) == 2
        assert "version 7" in capsys.readouterr().err


class TestPredict:
    def test_matches_forward_and_round_trips(self, run_dir, tmp_path):
        s = synth_dataset(0, 1, 128, 4)[0]
        img = tmp_path / "img.ppm"
        write_pnm(img, np.rint(s.image.transpose(1, 2, 0) * 255).astype(np.uint8))
        out = tmp_path / "mask.pgm"
        assert cli.main(["predict", str(run_dir / LAST_CKPT), str(img), str(out)]) == 0
        params, cfg, _ = load_params(run_dir / LAST_CKPT)
        x = np.rint(s.image * 255).astype(np.float32) / 255
        with no_grad():
            ref = forward(Tensor(x[None]), params, cfg).data.argmax(1)[0]
        mask = read_pnm(out)
        np.testing.assert_array_equal(mask, ref)
        legend = (tmp_path / "mask.pgm.legend.txt").read_text().splitlines()
        assert legend[0] == "0 background" and len(legend) == 4
        write_pnm(tmp_path / "again.pgm", mask)
        assert read_pnm(tmp_path / "again.pgm").tobytes() == mask.tobytes()

    def test_zero_image(self, run_dir, tmp_path):
        img = tmp_path / "zero.pgm"
        write_pnm(img, np.zeros((128, 128), np.uint8))
        assert cli.main(["predict", str(run_dir / LAST_CKPT), str(img), str(tmp_path / "m.pgm")]) == 0
        assert read_pnm(tmp_path / "m.pgm").max() < 4

    def test_extent_mismatch(self, run_dir, tmp_path, capsys):
        img = tmp_path / "small.pgm"
        write_pnm(img, np.zeros((60, 80), np.uint8))
        assert cli.main(["predict", str(run_dir / LAST_CKPT), str(img), str(tmp_path / "m.pgm")]) == 2
        assert "resize" in capsys.readouterr().err


class TestParamsAndAblate:
    def test_tiny_report_is_additive(self, capsys):
        assert cli.main(["params"]) == 0
        lines = capsys.readouterr().out.splitlines()
        counts = {ln.split()[0]: int(ln.split()[1].replace(",", "")) for ln in lines[2:] if ln and not ln.startswith("total:")}
        total = counts.pop("total")
        assert sum(counts.values()) == total

    @pytest.mark.parametrize("method,expected", [(6, 24.68), (0, 27.15)])
    def test_full_size_counts(self, capsys, method, expected):
        assert cli.main(["params", "--preset", "full", "--method", str(method)]) == 0
        total = float(capsys.readouterr().out.strip().splitlines()[-1].split()[1].rstrip("M"))
        assert abs(total - expected) <= 0.03 * expected

    def test_single_id_single_row(self, capsys):
        assert cli.main(["ablate", "4"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3 and lines[2].split()[0] == "4"

    def test_bad_id(self):
        assert cli.main(["ablate", "9"]) == 1


class TestMisc:
    def test_gradcheck_op(self, capsys):
        assert cli.main(["gradcheck", "w_cmsa"]) == 0
        assert "ok" in capsys.readouterr().out

    def test_gradcheck_unknown(self):
        assert cli.main(["gradcheck", "no_such_op"]) == 1

    def test_dump_config(self, capsys):
        assert cli.main(["dump-config", "--preset", "full"]) == 0
        out = capsys.readouterr().out
        assert "[model]" in out and "epochs = 300" in out

    def test_bad_subcommand(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["frobnicate"])
        assert e.value.code == 1

    def test_thread_env(self, monkeypatch, capsys):
        monkeypatch.setenv(cli.THREADS_ENV, "1")
        assert cli.main(["dump-config"]) == 0
        monkeypatch.setenv(cli.THREADS_ENV, "zero")
        assert cli.main(["dump-config"]) == 1
