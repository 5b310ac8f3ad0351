"""End-to-end command-line behavior: exit codes, option precedence, run
replay, and each subcommand's outputs. Everything runs in-process through
``main(argv)`` except one console-script smoke test."""

import json
import subprocess
import sys

import numpy as np
import pytest

from microexpnet.architecture import ModelSpec, build_model, save_checkpoint
from microexpnet.cli import DEFAULTS, UsageError, _resolve_options, build_parser, main
from microexpnet.data import load_manifest
from microexpnet.distillation import TeacherLogits, load_teacher_logits
from microexpnet.experiment import predict_logits, read_results_jsonl


def run_cli(*argv):
    return main([str(a) for a in argv])


def records_without_timing(path):
    records = read_results_jsonl(path)
    for record in records:
        record.pop("timing", None)
    return json.dumps(records, sort_keys=True)


def write_teacher_csv(manifest, path, seed=0):
    rng = np.random.default_rng(seed)
    ids = manifest.ids()
    logits = rng.normal(scale=0.5, size=(len(ids), 8)).astype(np.float32)
    for row, sample_id in enumerate(ids):
        logits[row, manifest.by_id(sample_id).label] += 6.0
    TeacherLogits(ids, logits).save(path)
    return path


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, constant_manifest_path):
    """A completed `train` invocation whose outputs several tests inspect."""
    out = tmp_path_factory.mktemp("train_run")
    code = run_cli(
        "train",
        "--manifest", constant_manifest_path,
        "--mode", "subject-independent",
        "--epochs", 1,
        "--batch-size", 32,
        "--out", out,
    )
    assert code == 0
    return out


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == 0
        assert "train" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert main(["train", "--bogus"]) == 2

    def test_missing_required_option(self, capsys):
        assert main(["train"]) == 2
        assert "--manifest" in capsys.readouterr().err

    def test_runtime_failure_emits_structured_stderr(self, tmp_path, capsys):
        manifest = tmp_path / "broken.csv"
        manifest.write_text("id,image_path,label,subject_id\na,gone.pgm,0,s1\n")
        code = run_cli("train", "--manifest", manifest, "--out", tmp_path / "out")
        assert code == 1
        payload = json.loads(capsys.readouterr().err)
        assert payload["error"] == "ValidationError"
        assert "does not exist" in payload["message"]

    def test_teacher_logits_without_temperature(
        self, constant_manifest_path, tmp_path, capsys
    ):
        code = run_cli(
            "train",
            "--manifest", constant_manifest_path,
            "--teacher-logits", tmp_path / "whatever.csv",
            "--out", tmp_path / "out",
        )
        assert code == 2
        assert "--temperature" in capsys.readouterr().err

    def test_bad_temperature_grid(self, constant_manifest_path, tmp_path, capsys):
        code = run_cli(
            "sweep",
            "--manifest", constant_manifest_path,
            "--teacher-logits", tmp_path / "t.csv",
            "--temperatures", "2,x",
            "--out", tmp_path / "out",
        )
        assert code == 2


class TestOptionResolution:
    def resolve(self, argv):
        return _resolve_options(build_parser().parse_args(argv))

    def test_defaults_apply(self):
        options = self.resolve(["train"])
        assert options["size"] == "xxs"
        assert options["epochs"] == 60
        assert options["out"] == "runs/train"

    def test_flags_beat_config_beats_defaults(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"epochs": 2, "seed": 5}))
        options = self.resolve(
            ["train", "--config", str(config), "--epochs", "1"]
        )
        assert options["epochs"] == 1  # explicit flag
        assert options["seed"] == 5  # config file
        assert options["batch_size"] == 64  # default

    def test_config_unknown_keys_rejected(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"epochz": 3}))
        with pytest.raises(UsageError, match="epochz"):
            self.resolve(["train", "--config", str(config)])

    def test_config_subcommand_mismatch_rejected(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"subcommand": "sweep", "options": {}}))
        with pytest.raises(UsageError, match="recorded for 'sweep'"):
            self.resolve(["train", "--config", str(config)])

    def test_config_must_be_an_object(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text("[1, 2]")
        with pytest.raises(UsageError, match="JSON object"):
            self.resolve(["train", "--config", str(config)])

    def test_env_threads_overrides_jobs_flag(self, monkeypatch):
        monkeypatch.setenv("MICROEXP_THREADS", "3")
        options = self.resolve(["train", "--jobs", "8"])
        assert options["jobs"] == 3

    def test_env_threads_must_be_positive_int(self, monkeypatch):
        for bad in ("zero", "0", "-2"):
            monkeypatch.setenv("MICROEXP_THREADS", bad)
            with pytest.raises(UsageError, match="MICROEXP_THREADS"):
                self.resolve(["train"])

    def test_defaults_table_covers_every_subcommand(self):
        assert set(DEFAULTS) == {
            "train", "sweep", "ablate", "bench", "export-logits", "report"
        }

    def test_sweep_default_grid(self):
        assert self.resolve(["sweep"])["temperatures"] == "2,4,8,16,20,32,64"


class TestTrainCommand:
    def test_outputs_present(self, train_run):
        for name in ("run.json", "folds.csv", "results.jsonl", "summary.csv"):
            assert (train_run / name).exists(), name

    def test_run_json_is_replayable_shape(self, train_run):
        payload = json.loads((train_run / "run.json").read_text())
        assert payload["subcommand"] == "train"
        assert payload["options"]["epochs"] == 1
        assert payload["options"]["mode"] == "subject-independent"

    def test_record_contents(self, train_run):
        records = read_results_jsonl(train_run / "results.jsonl")
        assert len(records) == 1
        record = records[0]
        assert record["size_class"] == "xxs"
        assert record["mode"] == "subject_independent"
        assert len(record["fold_accuracies"]) == 10
        assert record["temperature"] is None

    def test_replay_from_run_json_is_deterministic(self, train_run, tmp_path):
        replay_out = tmp_path / "replay"
        code = run_cli(
            "train", "--config", train_run / "run.json", "--out", replay_out
        )
        assert code == 0
        assert records_without_timing(train_run / "results.jsonl") == \
            records_without_timing(replay_out / "results.jsonl")

    def test_save_model_writes_loadable_checkpoint(
        self, constant_manifest_path, tmp_path
    ):
        checkpoint = tmp_path / "model.ckpt"
        code = run_cli(
            "train",
            "--manifest", constant_manifest_path,
            "--epochs", 1,
            "--batch-size", 32,
            "--folds", 10,
            "--save-model", checkpoint,
            "--out", tmp_path / "out",
        )
        assert code == 0
        from microexpnet.architecture import load_checkpoint

        model, header = load_checkpoint(checkpoint)
        assert header["model"]["size_class"] == "xxs"
        assert header["epoch"] == 1


class TestSweepCommand:
    def test_sweep_writes_flagged_grid(self, constant_manifest_path, tmp_path, capsys):
        manifest = load_manifest(constant_manifest_path)
        teacher_path = write_teacher_csv(manifest, tmp_path / "teacher.csv")
        out = tmp_path / "sweep"
        code = run_cli(
            "sweep",
            "--manifest", constant_manifest_path,
            "--teacher-logits", teacher_path,
            "--temperatures", "2,8",
            "--epochs", 1,
            "--batch-size", 32,
            "--out", out,
        )
        assert code == 0
        records = read_results_jsonl(out / "results.jsonl")
        assert [r["temperature"] for r in records] == [2.0, 8.0]
        assert sum(r["best"] for r in records) == 1
        stdout = capsys.readouterr().out
        assert "mean acc %" in stdout
        assert "*" in stdout

    def test_sweep_requires_teacher_logits(self, constant_manifest_path, tmp_path):
        assert run_cli(
            "sweep", "--manifest", constant_manifest_path, "--out", tmp_path / "o"
        ) == 2


class TestAblateCommand:
    def test_single_mode_covers_all_variants(
        self, constant_manifest_path, tmp_path, capsys
    ):
        out = tmp_path / "ablate"
        code = run_cli(
            "ablate",
            "--manifest", constant_manifest_path,
            "--mode", "random",
            "--epochs", 1,
            "--batch-size", 32,
            "--folds", 5,
            "--out", out,
        )
        assert code == 0
        records = read_results_jsonl(out / "results.jsonl")
        assert [r["variant"] for r in records] == ["v", "p1", "p2", "p12"]
        assert "mode: random" in capsys.readouterr().out


class TestBenchCommand:
    def test_single_size_bench(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code = run_cli(
            "bench",
            "--size", "xxs",
            "--iterations", 100,
            "--warmup", 5,
            "--out", out,
        )
        assert code == 0
        reports = json.loads((out / "bench.json").read_text())
        assert len(reports) == 1
        assert reports[0]["size_class"] == "xxs"
        assert reports[0]["iterations"] == 100
        assert "mean ms" in capsys.readouterr().out

    def test_iteration_floor_maps_to_runtime_error(self, tmp_path, capsys):
        code = run_cli(
            "bench", "--size", "xxs", "--iterations", 10, "--out", tmp_path / "o"
        )
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"] == "ValidationError"


class TestExportLogitsCommand:
    def test_exported_rows_match_model_forward(
        self, constant_manifest_path, constant_image_cache, tmp_path
    ):
        model = build_model(ModelSpec("xxs", "p12"), seed=9)
        checkpoint = tmp_path / "teacher.ckpt"
        save_checkpoint(model, checkpoint, seed=9, epoch=0)
        out_file = tmp_path / "logits.csv"
        code = run_cli(
            "export-logits",
            "--checkpoint", checkpoint,
            "--manifest", constant_manifest_path,
            "--out-file", out_file,
            "--out", tmp_path / "run",
        )
        assert code == 0
        manifest = load_manifest(constant_manifest_path)
        table = load_teacher_logits(out_file, manifest)
        expected = predict_logits(model, manifest, dict(constant_image_cache))
        assert table.ids == manifest.ids()
        np.testing.assert_allclose(table.matrix(manifest.ids()), expected, atol=1e-6)
        # re-softening at T=1 reproduces the evaluation-time probabilities
        from microexpnet.distillation import softened_softmax
        from microexpnet.layers import softmax

        np.testing.assert_allclose(
            softened_softmax(table.matrix(manifest.ids()), 1.0),
            softmax(expected),
            atol=1e-6,
        )

    def test_binary_output_selected_by_extension(
        self, constant_manifest_path, tmp_path
    ):
        model = build_model(ModelSpec("xxs", "p12"), seed=9)
        checkpoint = tmp_path / "teacher.ckpt"
        save_checkpoint(model, checkpoint)
        out_file = tmp_path / "logits.bin"
        code = run_cli(
            "export-logits",
            "--checkpoint", checkpoint,
            "--manifest", constant_manifest_path,
            "--out-file", out_file,
            "--out", tmp_path / "run",
        )
        assert code == 0
        assert out_file.read_bytes()[:4] == b"MXTL"

    def test_missing_pieces_are_usage_errors(self, tmp_path):
        assert run_cli("export-logits", "--out", tmp_path / "o") == 2


class TestReportCommand:
    def test_report_renders_and_exports_csv(self, train_run, tmp_path, capsys):
        csv_out = tmp_path / "flat.csv"
        code = run_cli(
            "report",
            "--results", train_run / "results.jsonl",
            "--csv", csv_out,
            "--out", tmp_path / "report",
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "XXS/p12" in stdout
        assert "mean acc %" in stdout
        # the flat CSV equals the one the producing run wrote
        assert csv_out.read_text() == (train_run / "summary.csv").read_text()

    def test_report_missing_results_is_usage_error(self, tmp_path):
        assert run_cli("report", "--out", tmp_path / "o") == 2


class TestConsoleScript:
    def test_entry_point_responds(self):
        proc = subprocess.run(
            [sys.executable, "-m", "microexpnet.cli", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        assert "microexpnet" in proc.stdout
