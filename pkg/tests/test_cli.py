import re
import subprocess
import sys

import numpy as np
import pytest

from odseg import cli
from odseg.config import ExperimentConfig, registry_help
from odseg.errors import ParameterError

TINY_CONFIG = """\
# desk-scale smoke configuration
synth.size = 16
synth.n_localize = 12
synth.n_segment = 8
synth.radius_lo = 0.15
synth.radius_hi = 0.3
synth.vessels = 1
synth.distractors = 1
synth.noise_sigma = 3.0
pre.target_size = 16
pre.clahe_tiles = 2
model.levels = 2
model.base_filters = 2
model.dropout = 0.1
loc.batch_size = 4
loc.epochs = 2
loc.patience = 0
seg.batch_size = 4
seg.epochs = 2
seg.patience = 0
cv.k = 2
sweep.fractions = 50,100
run.base_seed = 3
"""


def parse_kv(output: str) -> dict:
    values = {}
    for line in output.strip().splitlines():
        if "=" in line and " " not in line.split("=", 1)[0]:
            key, _, raw = line.partition("=")
            values[key] = raw
    return values


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = tmp_path / "exp.cfg"
    config.write_text(TINY_CONFIG + f"run.out_dir = {tmp_path / 'out'}\n")
    return tmp_path, config


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestConfigParsing:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg["pre.target_size"] == 64
        assert cfg["sweep.fractions"] == tuple(range(10, 101, 10))

    def test_parse_with_comments(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("# comment\nsynth.size = 32  # trailing\n\npre.gamma = 1.5\n")
        cfg = ExperimentConfig.parse(path)
        assert cfg["synth.size"] == 32
        assert cfg["pre.gamma"] == 1.5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("synth.nope = 3\n")
        with pytest.raises(ParameterError):
            ExperimentConfig.parse(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("synth.size = 32\nsynth.size = 64\n")
        with pytest.raises(ParameterError):
            ExperimentConfig.parse(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("synth.size = many\n")
        with pytest.raises(ParameterError):
            ExperimentConfig.parse(path)

    def test_registry_help_lists_every_key(self):
        text = registry_help()
        for key in ("synth.size", "pre.clahe_clip", "run.base_seed", "sweep.fractions"):
            assert key in text

    def test_out_dir_env_fallback(self, monkeypatch):
        monkeypatch.setenv("ODSEG_OUT", "/tmp/odseg-env-root")
        cfg = ExperimentConfig()
        assert str(cfg.out_dir) == "/tmp/odseg-env-root"


class TestGen:
    def test_generates_datasets(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "gen", "-c", config)
        assert code == 0, err
        kv = parse_kv(out)
        assert kv["localize_count"] == "12"
        assert kv["segment_count"] == "8"
        assert (tmp / "out" / "data" / "localize" / "images" / "0011.pgm").exists()
        assert (tmp / "out" / "data" / "segment" / "centroids.csv").exists()
        assert (tmp / "out" / "data" / "segment" / "manifest.json").exists()

    def test_refuses_overwrite_without_force(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        code, out, err = run_cli(capsys, "gen", "-c", config)
        assert code == 2
        assert "usage-error:" in err

    def test_force_rerun_is_byte_identical(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        img = tmp / "out" / "data" / "segment" / "images" / "0000.pgm"
        csv_path = tmp / "out" / "data" / "segment" / "centroids.csv"
        before = (img.read_bytes(), csv_path.read_bytes())
        assert run_cli(capsys, "gen", "-c", config, "--force")[0] == 0
        assert (img.read_bytes(), csv_path.read_bytes()) == before

    def test_bad_spec_mentions_key(self, workdir, capsys):
        tmp, config = workdir
        bad = tmp / "bad.cfg"
        bad.write_text(TINY_CONFIG.replace("synth.radius_hi = 0.3", "synth.radius_hi = 0.6"))
        code, out, err = run_cli(capsys, "gen", "-c", bad)
        assert code == 1
        assert "parameter-error:" in err and "radius" in err


class TestTrainLocalizer:
    def test_end_to_end(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        code, out, err = run_cli(capsys, "train-localizer", "-c", config)
        assert code == 0, err
        kv = parse_kv(out)
        ckpt = tmp / "out" / "localizer.ckpt"
        assert ckpt.exists()
        history = (tmp / "out" / "localizer_history.csv").read_text().strip().splitlines()
        assert len(history) - 1 == int(kv["epochs_run"])
        assert float(kv["val_mse"]) >= 0.0

    def test_missing_dataset_is_file_error(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "train-localizer", "-c", config)
        assert code == 1
        assert "file-error:" in err


class TestTrainSegmenter:
    def test_flag_exclusivity(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "train-segmenter", "-c", config,
                                 "--pretrained", "x.ckpt", "--baseline")
        assert code == 2
        assert "usage-error:" in err
        code, out, err = run_cli(capsys, "train-segmenter", "-c", config)
        assert code == 2

    def test_missing_checkpoint_is_file_error(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "train-segmenter", "-c", config,
                                 "--pretrained", "missing.ckpt")
        assert code == 1
        assert "file-error:" in err

    def test_baseline_cv_outputs(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        code, out, err = run_cli(capsys, "train-segmenter", "-c", config, "--baseline")
        assert code == 0, err
        kv = parse_kv(out)
        assert "dice_mean" in kv and "dice_std" in kv
        assert (tmp / "out" / "seg-baseline" / "fold0.ckpt").exists()
        assert (tmp / "out" / "seg-baseline" / "fold1.ckpt").exists()

    def test_pretrained_cv_and_eval_consistency(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        assert run_cli(capsys, "train-localizer", "-c", config)[0] == 0
        ckpt = tmp / "out" / "localizer.ckpt"
        code, out, err = run_cli(capsys, "train-segmenter", "-c", config,
                                 "--pretrained", ckpt)
        assert code == 0, err
        kv = parse_kv(out)
        fold0 = tmp / "out" / "seg-pretrained" / "fold0.ckpt"
        assert fold0.exists()
        # self-evaluation reproduces the in-run fold metric bit-exactly
        code, out, err = run_cli(capsys, "eval", "-c", config,
                                 "--ckpt", fold0, "--split", "seg-val")
        assert code == 0, err
        assert parse_kv(out)["dice_mean"] == kv["fold0_dice"]


class TestEval:
    def test_localizer_val_matches_training_printout(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        code, train_out, _ = run_cli(capsys, "train-localizer", "-c", config)
        assert code == 0
        ckpt = tmp / "out" / "localizer.ckpt"
        code, out, err = run_cli(capsys, "eval", "-c", config, "--ckpt", ckpt,
                                 "--split", "val")
        assert code == 0, err
        assert parse_kv(out)["mse"] == parse_kv(train_out)["val_mse"]

    def test_kind_mismatch_is_explicit(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        assert run_cli(capsys, "train-localizer", "-c", config)[0] == 0
        ckpt = tmp / "out" / "localizer.ckpt"
        code, out, err = run_cli(capsys, "eval", "-c", config, "--ckpt", ckpt,
                                 "--split", "seg-all")
        assert code == 1
        assert "format-error:" in err and "kind mismatch" in err

    def test_missing_checkpoint(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "eval", "-c", config, "--ckpt", "nope.ckpt",
                                 "--split", "val")
        assert code == 1
        assert "file-error:" in err


class TestSweep:
    def prepare(self, workdir, capsys):
        tmp, config = workdir
        assert run_cli(capsys, "gen", "-c", config)[0] == 0
        assert run_cli(capsys, "train-localizer", "-c", config)[0] == 0
        return tmp, config, tmp / "out" / "localizer.ckpt"

    def test_outputs_and_determinism_across_jobs(self, workdir, capsys):
        tmp, config, ckpt = self.prepare(workdir, capsys)
        code, out, err = run_cli(capsys, "sweep", "-c", config, "--pretrained", ckpt)
        assert code == 0, err
        report = tmp / "out" / "sweep" / "report.csv"
        svg = tmp / "out" / "sweep" / "sweep.svg"
        lines = report.read_text().strip().splitlines()
        assert lines[0].startswith("fraction,mean_pre")
        assert len(lines) == 3  # header + 2 configured fractions
        first = (report.read_bytes(), svg.read_bytes())

        code, out, err = run_cli(capsys, "sweep", "-c", config, "--pretrained", ckpt,
                                 "--jobs", "2")
        assert code == 0, err
        assert (report.read_bytes(), svg.read_bytes()) == first

    def test_requires_checkpoint_flag(self, workdir, capsys):
        tmp, config = workdir
        code, out, err = run_cli(capsys, "sweep", "-c", config)
        assert code == 2
        assert "usage-error:" in err


def test_console_entry_point_reports_errors_on_stderr(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "odseg.cli", "eval", "--ckpt", "missing.ckpt",
         "--split", "val"],
        capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
    assert proc.stderr.startswith("file-error:")


def test_keys_command_prints_registry(capsys):
    code, out, err = run_cli(capsys, "keys")
    assert code == 0
    assert "run.base_seed" in out
