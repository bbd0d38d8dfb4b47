"""
Tests for the command-line front end.
"""

import numpy as np
import pandas as pd
import pytest

from autodiff import GradCheckReport
from grad_suite import SuiteResult
from tubule_seg import RunManifest, build_parser, dispatch
from volume_core import AV_ALPHABET, LabelMap, Volume, read_metaimage, write_metaimage, write_probability_stack


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("TUBULE_CONFIG", "LOG_LEVEL", "LOG_FILE", "TUBULE_THREADS", "TUBULE_SEED"):
        monkeypatch.delenv(name, raising=False)


def write_line_probs(path, artery):
    """3-channel stack for a 1x1xn vessel line with zero background probability."""
    a = np.asarray(artery, dtype=np.float32).reshape(1, 1, -1)
    write_probability_stack([Volume(np.zeros_like(a)), Volume(a), Volume(1.0 - a)], path)


class TestExitCodes:
    """Tests for error-to-exit-code mapping."""

    def test_no_subcommand(self):
        """Test a bare invocation is a usage error."""
        assert dispatch([]) == 1

    def test_help_and_version(self, capsys):
        """Test --help and --version exit cleanly and show defaults."""
        assert dispatch(["--help"]) == 0
        out = capsys.readouterr().out
        assert "eval-airway" in out and "(default: 0)" in out
        assert dispatch(["--version"]) == 0

    def test_bad_flag_value(self, temp_dir):
        """Test a malformed integer list is a usage error."""
        assert dispatch(["phantom", "--dims", "a,b,c", "--ct", str(temp_dir / "c.mha"),
                         "--label", str(temp_dir / "l.mha")]) == 1

    def test_missing_input(self, temp_dir, capsys):
        """Test a missing input file is a usage error with a message."""
        code = dispatch(["fuse", "--before", str(temp_dir / "nope.mha"), "--after", str(temp_dir / "nope.mha"),
                         "--out", str(temp_dir / "out.mha")])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_wrong_volume_type(self, temp_dir):
        """Test a float volume where a label map is expected is a data error."""
        path = temp_dir / "float.mha"
        write_metaimage(Volume(np.zeros((2, 2, 2), dtype=np.float32)), path)
        assert dispatch(["fuse", "--before", str(path), "--after", str(path), "--out", str(temp_dir / "o.mha")]) == 2

    def test_companion_needs_artery_vein(self, temp_dir):
        """Test --companion is refused for airway phantoms."""
        assert dispatch(["phantom", "--ct", str(temp_dir / "c.mha"), "--label", str(temp_dir / "l.mha"),
                         "--companion", str(temp_dir / "a.mha")]) == 1

    def test_failed_gradient_check(self, mocker, capsys):
        """Test a gradient check above tolerance is a numeric failure."""
        failing = SuiteResult("relu", GradCheckReport(max_rel_err=0.5, checked=4))
        mocker.patch("grad_suite.run_gradient_suite", return_value=[failing])
        assert dispatch(["gradcheck", "--only", "relu"]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_unexpected_exception(self, mocker, capsys):
        """Test an exception outside the toolkit hierarchy exits 4 with a message."""
        mocker.patch("tubule_seg._run", side_effect=RuntimeError("disk vanished"))
        assert dispatch(["gradcheck", "--only", "relu"]) == 4
        err = capsys.readouterr().err
        assert "error: unexpected RuntimeError: disk vanished" in err

    def test_threads_must_be_positive(self, temp_dir):
        """Test zero worker threads is a usage error."""
        assert dispatch(["--threads", "0", "gradcheck", "--only", "relu"]) == 1


class TestManifest:
    """Tests for run manifests."""

    def test_text_roundtrip(self, temp_dir):
        """Test a manifest reads back with its settings, paths and timings."""
        manifest = RunManifest("fuse", ["fuse", "--out", "a b.mha"], 7,
                               settings={"graphcut.kappa": 8.0, "inference.lateral_stride": None},
                               inputs={"before": "x.mha"}, outputs={"prediction": "a b.mha"},
                               timings={"fuse": 0.5})
        path = manifest.write(temp_dir / "out")
        back = RunManifest.read(path)
        assert back.subcommand == "fuse"
        assert back.argv == ["fuse", "--out", "a b.mha"]
        assert back.seed == 7
        assert back.settings == {"graphcut.kappa": 8.0, "inference.lateral_stride": None}
        assert back.inputs == {"before": "x.mha"}
        assert back.outputs == {"prediction": "a b.mha"}
        assert back.timings["fuse"] == pytest.approx(0.5)

    def test_malformed_manifest(self, temp_dir):
        """Test lines without '=' are data errors."""
        path = temp_dir / "bad.manifest.txt"
        path.write_text("subcommand=fuse\nargv=fuse\nnot a key value line\n")
        assert dispatch(["replay", "--manifest", str(path)]) == 2

    def test_replay_of_replay(self, temp_dir):
        """Test a manifest recording a replay is refused."""
        path = temp_dir / "loop.manifest.txt"
        path.write_text(f"subcommand=replay\nargv=replay --manifest {path}\n")
        assert dispatch(["replay", "--manifest", str(path)]) == 1


class TestPipeline:
    """End-to-end runs over small synthetic inputs."""

    def test_phantom_eval_preview(self, temp_dir, capsys):
        """Test a phantom scored against itself is perfect and previews to PNG."""
        ct, label = str(temp_dir / "ct.mha"), str(temp_dir / "label.mha")
        assert dispatch(["--seed", "3", "phantom", "--dims", "24,24,24", "--noise", "0",
                         "--ct", ct, "--label", label]) == 0
        manifest = RunManifest.read(f"{ct}.manifest.txt")
        assert manifest.seed == 3
        assert manifest.settings["train.seed"] == 3
        assert "phantom" in manifest.timings

        scores = str(temp_dir / "scores.csv")
        assert dispatch(["eval-airway", "--pred", label, "--ref", label, "--case", "p3", "--out", scores]) == 0
        table = pd.read_csv(scores)
        assert list(table.columns) == ["case", "bd", "td", "tpr", "fpr", "dsc"]
        assert table.loc[0, "case"] == "p3"
        assert table.loc[0, "td"] == pytest.approx(100.0)
        assert table.loc[0, "fpr"] == pytest.approx(0.0)

        png = temp_dir / "slice.png"
        assert dispatch(["preview", "--volume", ct, "--label", label, "--out", str(png)]) == 0
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_eval_airway_several_scans(self, temp_dir, capsys):
        """Test two scans give two table rows and an aggregate summary."""
        labels = []
        for seed in (1, 2):
            ct, label = str(temp_dir / f"ct{seed}.mha"), str(temp_dir / f"label{seed}.mha")
            assert dispatch(["--seed", str(seed), "phantom", "--dims", "24,24,24", "--ct", ct, "--label", label]) == 0
            labels.append(label)
        capsys.readouterr()
        scores = str(temp_dir / "scores.csv")
        assert dispatch(["eval-airway", "--pred", *labels, "--ref", *labels, "--out", scores]) == 0
        assert "td_mean=100.000000" in capsys.readouterr().out
        assert pd.read_csv(scores)["case"].tolist() == ["label1", "label2"]
        assert dispatch(["eval-airway", "--pred", *labels, "--ref", labels[0]]) == 1

    def test_replay_reproduces_outputs(self, temp_dir):
        """Test replaying a phantom manifest rewrites identical files."""
        ct, label = temp_dir / "ct.mha", temp_dir / "label.mha"
        assert dispatch(["--seed", "5", "phantom", "--dims", "24,24,24", "--ct", str(ct), "--label", str(label)]) == 0
        first = ct.read_bytes()
        ct.unlink()
        assert dispatch(["replay", "--manifest", f"{ct}.manifest.txt"]) == 0
        assert ct.read_bytes() == first

    def test_postprocess_threshold(self, temp_dir):
        """Test airway postprocessing keeps the thresholded component."""
        data = np.full((4, 4, 4), 0.1, dtype=np.float32)
        data[1:3, 1:3, 1:3] = 0.9
        probs, out = temp_dir / "p.mha", temp_dir / "pred.mha"
        write_probability_stack([Volume(data)], probs)
        assert dispatch(["postprocess", "--probs", str(probs), "--th", "0.5", "--out", str(out)]) == 0
        pred = read_metaimage(out)
        assert isinstance(pred, LabelMap)
        np.testing.assert_array_equal(pred.mask(), data >= 0.5)

    def test_postprocess_flag_conflicts(self, temp_dir):
        """Test --target-fpr needs --ref and excludes --th."""
        probs = temp_dir / "p.mha"
        write_probability_stack([Volume(np.zeros((2, 2, 2), dtype=np.float32))], probs)
        out = str(temp_dir / "o.mha")
        assert dispatch(["postprocess", "--probs", str(probs), "--target-fpr", "1", "--out", out]) == 1
        assert dispatch(["postprocess", "--probs", str(probs), "--th", "0.5", "--target-fpr", "1",
                         "--ref", str(probs), "--out", out]) == 1

    def test_graphcut_then_fuse(self, temp_dir):
        """Test refinement without neighbor links and union fusion."""
        probs = temp_dir / "p.mha"
        write_line_probs(probs, [0.9, 0.2, 0.8])
        ct = temp_dir / "ct.mha"
        write_metaimage(Volume(np.zeros((1, 1, 3), dtype=np.int16)), ct)
        refined = temp_dir / "refined.mha"
        assert dispatch(["graphcut", "--probs", str(probs), "--ct", str(ct), "--kappa", "0",
                         "--out", str(refined)]) == 0
        assert read_metaimage(refined).data.reshape(-1).tolist() == [1, 2, 1]
        assert RunManifest.read(f"{refined}.manifest.txt").settings["graphcut.kappa"] == 0.0

        before = temp_dir / "before.mha"
        write_metaimage(LabelMap(np.array([0, 1, 2], dtype=np.uint8).reshape(1, 1, 3), alphabet=AV_ALPHABET), before)
        fused = temp_dir / "fused.mha"
        assert dispatch(["fuse", "--before", str(before), "--after", str(refined), "--mode", "union2",
                         "--out", str(fused)]) == 0
        assert read_metaimage(fused).data.reshape(-1).tolist() == [1, 2, 2]

    def test_gradcheck_subset(self, capsys):
        """Test a named gradient check runs and an unknown name is refused."""
        assert dispatch(["gradcheck", "--only", "relu", "sigmoid"]) == 0
        out = capsys.readouterr().out
        assert "relu" in out and "sigmoid" in out
        assert dispatch(["gradcheck", "--only", "no_such_case"]) == 1


class TestParser:
    """Tests for argument defaults."""

    def test_model_flags_default_to_settings(self):
        """Test unset model flags stay None so config files apply."""
        args = build_parser().parse_args(["train", "--phantoms", "2", "--out", "m.ckpt"])
        assert args.alpha is None and args.channels is None and args.epochs is None
        assert args.phantoms == 2

    def test_integer_lists(self):
        """Test patch sizes accept commas or 'x'."""
        args = build_parser().parse_args(["train", "--patch", "8x16x16", "--out", "m.ckpt"])
        assert args.patch == (8, 16, 16)
