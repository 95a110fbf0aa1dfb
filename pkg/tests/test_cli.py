import subprocess
import sys

import numpy as np
import pytest

from morphfit import storage
from morphfit.cli import main


@pytest.fixture
def workspace(tmp_path):
    paths = {
        "basis": str(tmp_path / "basis.m3dm"),
        "data": str(tmp_path / "data.txt"),
        "clips": str(tmp_path / "clips.m3dv"),
        "ckpt": str(tmp_path / "model.m3dw"),
        "curve": str(tmp_path / "curve.csv"),
        "trace": str(tmp_path / "trace.csv"),
        "report": str(tmp_path / "report.txt"),
    }
    assert main([
        "gen-basis", "--n-vertices", "80", "--d-id", "6", "--d-exp", "3",
        "--seed", "3", "--out", paths["basis"],
    ]) == 0
    assert main([
        "gen-data", "--basis", paths["basis"], "--count", "24",
        "--seed", "4", "--out", paths["data"],
    ]) == 0
    return paths


class TestGeneration:
    def test_basis_round_trip(self, workspace):
        basis = storage.load_basis(workspace["basis"])
        assert basis.n_vertices == 80
        assert basis.d_id == 6 and basis.d_exp == 3

    def test_data_manifest_parses(self, workspace):
        manifest = storage.load_manifest(workspace["data"])
        assert manifest.count == 24
        assert manifest.stats.mu.shape == (12 + 9,)

    def test_gen_clips(self, workspace):
        rc = main([
            "gen-clips", "--basis", workspace["basis"], "--data", workspace["data"],
            "--count", "3", "--seed", "5", "--out", workspace["clips"],
        ])
        assert rc == 0
        clips = storage.load_clips(workspace["clips"])
        assert len(clips) == 3
        assert len(clips[0]) == 8  # default clip length

    def test_deterministic_artifacts(self, workspace, tmp_path):
        out2 = str(tmp_path / "basis2.m3dm")
        main(["gen-basis", "--n-vertices", "80", "--d-id", "6", "--d-exp", "3",
              "--seed", "3", "--out", out2])
        with open(workspace["basis"], "rb") as a, open(out2, "rb") as b:
            assert a.read() == b.read()


class TestTrainEval:
    def _train(self, workspace, loss, extra=()):
        return main([
            "train", "--basis", workspace["basis"], "--data", workspace["data"],
            "--loss", loss, "--iterations", "30", "--eval-every", "10",
            "--lr", "1e-4", "--batch-size", "4", "--hidden", "8",
            "--seed", "0", "--out-checkpoint", workspace["ckpt"],
            "--out-curve", workspace["curve"], *extra,
        ])

    def test_train_and_eval_on_data(self, workspace, capsys):
        assert self._train(workspace, "fwpdc") == 0
        curve = storage.load_curve(workspace["curve"])
        assert curve.shape[0] == 3
        assert np.all(np.isfinite(curve))
        rc = main([
            "eval", "--basis", workspace["basis"], "--checkpoint", workspace["ckpt"],
            "--data", workspace["data"], "--normalizer", "bbox",
            "--out-report", workspace["report"],
        ])
        assert rc == 0
        report = storage.load_report(workspace["report"])
        assert report.per_sample_nme.shape == (24,)
        assert report.stability is None
        out = capsys.readouterr().out
        assert "nme_mean:" in out

    def test_train_meta_writes_trace(self, workspace):
        rc = self._train(
            workspace, "meta_joint",
            extra=("--k", "2", "--out-trace", workspace["trace"]),
        )
        assert rc == 0
        trace = storage.load_trace(workspace["trace"])
        assert len(trace) == 15  # ceil(30 / 2) outer iterations
        assert all(r.outer_iteration == i for i, r in enumerate(trace))

    def test_eval_on_clips_reports_stability(self, workspace):
        assert self._train(workspace, "fwpdc") == 0
        main(["gen-clips", "--basis", workspace["basis"], "--data", workspace["data"],
              "--count", "2", "--seed", "6", "--out", workspace["clips"]])
        rc = main([
            "eval", "--basis", workspace["basis"], "--checkpoint", workspace["ckpt"],
            "--clips", workspace["clips"], "--normalizer", "bbox",
            "--out-report", workspace["report"],
        ])
        assert rc == 0
        report = storage.load_report(workspace["report"])
        assert report.stability is not None
        assert report.per_sample_nme.shape == (16,)  # 2 clips x 8 frames

    def test_train_with_svs(self, workspace):
        rc = main([
            "train", "--basis", workspace["basis"], "--data", workspace["data"],
            "--loss", "fwpdc", "--iterations", "6", "--eval-every", "3",
            "--lr", "1e-4", "--batch-size", "16", "--hidden", "8", "--svs",
            "--seed", "0", "--out-checkpoint", workspace["ckpt"],
            "--out-curve", workspace["curve"],
        ])
        assert rc == 0

    def test_train_determinism(self, workspace, tmp_path):
        self._train(workspace, "fwpdc")
        with open(workspace["ckpt"], "rb") as fh:
            first = fh.read()
        self._train(workspace, "fwpdc")
        with open(workspace["ckpt"], "rb") as fh:
            assert fh.read() == first


class TestErrors:
    def test_missing_path_exit_2(self, tmp_path):
        rc = main([
            "gen-data", "--basis", str(tmp_path / "nope.m3dm"),
            "--count", "4", "--out", str(tmp_path / "d.txt"),
        ])
        assert rc == 2

    def test_corrupt_file_exit_1(self, tmp_path):
        bad = tmp_path / "bad.m3dm"
        bad.write_bytes(b"XXXX not a container")
        rc = main([
            "gen-data", "--basis", str(bad), "--count", "4",
            "--out", str(tmp_path / "d.txt"),
        ])
        assert rc == 1

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-basis", "--bogus-flag", "1", "--out", "x"])
        assert exc.value.code == 2

    def test_unknown_loss_rejected(self, workspace):
        with pytest.raises(SystemExit) as exc:
            main([
                "train", "--basis", workspace["basis"], "--data", workspace["data"],
                "--loss", "nonsense", "--out-checkpoint", "a", "--out-curve", "b",
            ])
        assert exc.value.code == 2


class TestBench:
    def test_small_bench_runs(self, capsys):
        rc = main([
            "bench-fwpdc", "--n-vertices", "300", "--d-id", "8", "--d-exp", "2",
            "--batch", "4", "--repeats", "2", "--seed", "0",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "speedup:" in out
        assert "max_rel_deviation:" in out
        dev = float(out.split("max_rel_deviation:")[1].strip().split()[0])
        assert dev <= 1e-9


class TestEntryPoint:
    def test_console_invocation(self, tmp_path):
        out = tmp_path / "b.m3dm"
        proc = subprocess.run(
            [sys.executable, "-m", "morphfit.cli", "gen-basis",
             "--n-vertices", "70", "--out", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert out.exists()

    def test_bad_path_exit_code_subprocess(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "morphfit.cli", "eval",
             "--basis", str(tmp_path / "missing.m3dm"),
             "--checkpoint", str(tmp_path / "missing.m3dw"),
             "--data", str(tmp_path / "missing.txt"),
             "--out-report", str(tmp_path / "r.txt")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
        assert "error:" in proc.stderr
