"""Tests for CLI commands."""

import pytest
from click.testing import CliRunner

from kdslu.ablation import METHOD_STACK, AblationReport, AblationRun, summarize, write_report
from kdslu.cli import main, parse_overrides
from kdslu.config import load_config
from kdslu.exceptions import ConfigValidationError
from kdslu.runs import load_run_record
from kdslu.tokenizer_vq import load_codebook


@pytest.fixture
def runner():
    """Create a CLI runner."""
    return CliRunner()


@pytest.fixture
def out_root(tmp_path):
    """The output root named in the tiny experiment file."""
    return tmp_path / "out"


class TestMainGroup:
    """Tests for main CLI group."""

    def test_version_flag(self, runner):
        """--version shows version."""
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "kdslu" in result.output

    def test_help_flag(self, runner):
        """--help lists the stages."""
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for command in ("synth", "fit-codebook", "pretrain-kd", "finetune", "ablate"):
            assert command in result.output

    def test_version_command(self, runner):
        """version command shows version."""
        result = runner.invoke(main, ["version"])
        assert result.exit_code == 0
        assert "textkd-slu v" in result.output


class TestParseOverrides:
    """Tests for parse_overrides()."""

    def test_both_forms(self):
        """Space and equals forms are accepted."""
        assert parse_overrides(["--a.b", "1", "--c.d=x"]) == [("a.b", "1"), ("c.d", "x")]

    @pytest.mark.parametrize("args", [["--bogus", "1"], ["stray"], ["--a.b"]])
    def test_rejects(self, args):
        """Undotted flags, bare arguments and missing values are rejected."""
        with pytest.raises(ConfigValidationError):
            parse_overrides(args)


class TestExitCodes:
    """Tests for error-to-exit-code mapping."""

    @pytest.mark.parametrize(
        "command",
        ["train-teacher", "pretrain-mlm", "pretrain-kd", "pretrain-am", "finetune", "evaluate", "ablate"],
    )
    def test_missing_codebook(self, runner, tiny_experiment_path, command):
        """Stages that need the codebook exit 2 and name it."""
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), command])
        assert result.exit_code == 2
        assert "'codebook'" in result.output

    def test_missing_manifest(self, runner, tiny_experiment_path):
        """fit-codebook without a corpus names the manifest."""
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), "fit-codebook"])
        assert result.exit_code == 2
        assert "'manifest'" in result.output

    def test_unknown_config_key(self, runner, tiny_experiment_path):
        """A dotted override of an unknown key is a config error."""
        result = runner.invoke(
            main, ["--config", str(tiny_experiment_path), "synth", "--training.ft.bogus", "1"]
        )
        assert result.exit_code == 3
        assert "training.ft.bogus" in result.output

    def test_unknown_flag(self, runner, tiny_experiment_path):
        """An unrecognized flag is a config error."""
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), "synth", "--bogus", "1"])
        assert result.exit_code == 3

    def test_stage_gamma_flag(self, runner, tiny_experiment_path, out_root):
        """Stage-level schedule flags such as --training.ft.gamma are accepted."""
        result = runner.invoke(
            main,
            [
                "--config", str(tiny_experiment_path), "synth",
                "--training.ft.gamma", "1.05", "--training.ft.lr", "0.005",
            ],
        )
        assert result.exit_code == 0, result.output
        run_dir = next((out_root / "runs").glob("synth-*-s0"))
        saved = load_config(run_dir / "config.yaml")
        assert saved.training.ft.schedule.gamma == 1.05
        assert saved.training.ft.schedule.lr == 0.005

    @pytest.mark.parametrize("error", [ValueError("shape mismatch"), KeyError("ce"), ZeroDivisionError()])
    def test_unexpected_error_is_failure(self, runner, tiny_experiment_path, out_root, monkeypatch, error):
        """Errors outside the package hierarchy still exit 4 and fail the run."""

        def broken(*args, **kwargs):
            raise error

        monkeypatch.setattr("kdslu.cli.generate_corpus", broken)
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), "synth"])
        assert result.exit_code == 4
        assert "Traceback" not in result.output
        run_dir = next((out_root / "runs").glob("synth-*-s0"))
        assert load_run_record(run_dir).status == "failed"

    def test_invalid_value(self, runner, tiny_experiment_path):
        """Overrides are validated like the file."""
        result = runner.invoke(
            main, ["--config", str(tiny_experiment_path), "synth", "--codebook.k", "1"]
        )
        assert result.exit_code == 3
        assert "codebook.k" in result.output


class TestDataCommands:
    """Tests for synth and fit-codebook."""

    def test_synth_writes_manifest(self, runner, tiny_experiment_path, out_root):
        """synth writes the manifest artifact and a complete run record."""
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), "synth"])
        assert result.exit_code == 0, result.output
        assert (out_root / "artifacts" / "data" / "manifest.tsv").exists()
        run_dirs = list((out_root / "runs").glob("synth-*-s0"))
        assert len(run_dirs) == 1
        record = load_run_record(run_dirs[0])
        assert record.status == "complete"
        assert record.final_metrics["train_utterances"] == 48

    def test_out_overrides_config(self, runner, tiny_experiment_path, tmp_path):
        """--out takes precedence over paths.out_root."""
        other = tmp_path / "elsewhere"
        result = runner.invoke(main, ["--config", str(tiny_experiment_path), "--out", str(other), "synth"])
        assert result.exit_code == 0, result.output
        assert (other / "artifacts" / "data" / "manifest.tsv").exists()

    def test_fit_codebook(self, runner, tiny_experiment_path, out_root):
        """fit-codebook fits k codes over the frame dimension."""
        base = ["--config", str(tiny_experiment_path)]
        assert runner.invoke(main, base + ["synth"]).exit_code == 0
        result = runner.invoke(main, base + ["fit-codebook"])
        assert result.exit_code == 0, result.output
        codebook = load_codebook(out_root / "artifacts" / "codebook.txt")
        assert codebook.k == 8
        assert codebook.dim == 4

    def test_fit_codebook_flags(self, runner, tiny_experiment_path, tmp_path):
        """--k and --out override the configured codebook."""
        base = ["--config", str(tiny_experiment_path)]
        assert runner.invoke(main, base + ["synth"]).exit_code == 0
        path = tmp_path / "small.txt"
        result = runner.invoke(main, base + ["fit-codebook", "--k", "3", "--out", str(path)])
        assert result.exit_code == 0, result.output
        assert load_codebook(path).k == 3


class TestReportCommand:
    """Tests for report."""

    def test_renders_saved_report(self, runner, tmp_path):
        """A saved report renders with its method rows."""
        runs = [AblationRun("baseline", 0, 0, "complete", 0.5, 0.5)]
        report = AblationReport(runs=runs, summaries=summarize(runs, METHOD_STACK[:1]), config_hash="h")
        path = write_report(report, tmp_path / "report.jsonl")
        result = runner.invoke(main, ["report", str(path)])
        assert result.exit_code == 0, result.output
        assert "baseline" in result.output

    def test_malformed_report(self, runner, tmp_path):
        """A malformed report is a failure."""
        path = tmp_path / "report.jsonl"
        path.write_text("{broken\n")
        result = runner.invoke(main, ["report", str(path)])
        assert result.exit_code == 4
