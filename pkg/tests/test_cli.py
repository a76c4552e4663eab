import hashlib
from pathlib import Path

import pytest

from cardiofuse.cli import build_parser, build_run_config, main
from test_cohort import dir_digest

FAST_OVERRIDES = [
    "--set", "run.k=3",
    "--set", "encoder.frame_size=16",
    "--set", "encoder.conv_channels=2,4",
    "--set", "encoder.frame_feature_dim=8",
    "--set", "encoder.lstm_hidden=4",
    "--set", "encoder.clip_feature_dim=8",
    "--set", "encoder.attention_dim=4",
    "--set", "encoder.head_hidden=4",
    "--set", "fusion.d_model=8",
    "--set", "fusion.n_heads=1",
    "--set", "fusion.n_layers=1",
    "--set", "fusion.ff_dim=16",
    "--set", "fusion.dropout=0.0",
    "--set", "fusion.head_hidden=4",
    "--set", "train.epochs=1",
    "--set", "train.lr=0.001",
]


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestSynth:
    def test_writes_dataset_and_prints_counts(self, tmp_path, capsys):
        out = tmp_path / "data"
        code = run_cli(
            "synth", "--n", 20, "--prevalence", 0.4, "--seed", 7,
            "--frame-size", 16, "--n-lab-codes", 4, "--out", out,
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "8 positive" in printed and "12 negative" in printed
        assert (out / "manifest.csv").exists()

    def test_rerun_identical_checksum(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["synth", "--n", 12, "--prevalence", 0.5, "--seed", 3,
                "--frame-size", 16, "--n-lab-codes", 3]
        assert run_cli(*args, "--out", a) == 0
        assert run_cli(*args, "--out", b) == 0
        assert dir_digest(a) == dir_digest(b)

    def test_invalid_prevalence_exits_2(self, tmp_path, capsys):
        code = run_cli("synth", "--n", 10, "--prevalence", 1.5, "--out", tmp_path / "x")
        assert code == 2
        assert "prevalence" in capsys.readouterr().err


class TestConfigResolution:
    def parse(self, *argv):
        return build_parser().parse_args([str(a) for a in argv])

    def test_all_presets_build_without_error(self, tiny_cohort_dir):
        for preset in sorted(
            __import__("cardiofuse").PRESETS
        ):
            args = self.parse("cv", "--dataset", tiny_cohort_dir, "--preset", preset)
            run = build_run_config(args)
            assert run.preset == preset

    def test_set_overrides_apply_and_typecheck(self, tiny_cohort_dir):
        args = self.parse(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--seed", 9, "--set", "train.ehr.epochs=40", "--set", "train.lr=0.01",
            "--set", "fusion.encoder_freeze=false",
        )
        run = build_run_config(args)
        assert run.seed == 9
        assert run.train_ehr.epochs == 40
        assert run.train_ehr.lr == 0.01
        assert run.train_encoder.epochs == 20  # stage override only hit ehr
        assert run.fusion_config.encoder_freeze is False

    def test_config_file_layers_under_flags(self, tiny_cohort_dir, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text(
            "[run]\npreset = table2-row2\nseed = 5\n\n"
            "[schema]\nwindow_days = -30, 10\ncoverage_threshold = 0.2\n\n"
            "[train]\nepochs = 3\n"
        )
        args = self.parse("cv", "--dataset", tiny_cohort_dir, "--config", cfg, "--seed", 8)
        run = build_run_config(args)
        assert run.preset == "table2-row2"
        assert run.seed == 8  # flag beats file
        assert run.window_days == (-30, 10)
        assert run.coverage_threshold == 0.2
        assert run.train_encoder.epochs == 3

    def test_unknown_key_exits_2(self, tiny_cohort_dir, capsys):
        code = run_cli(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--set", "train.momentum=0.9",
        )
        assert code == 2
        assert "momentum" in capsys.readouterr().err

    def test_bad_value_type_exits_2(self, tiny_cohort_dir, capsys):
        code = run_cli(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--set", "train.epochs=many",
        )
        assert code == 2


class TestCV:
    def test_ehr_preset_runs_and_is_deterministic(self, tiny_cohort_dir, tmp_path, capsys):
        args = [
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--seed", 7, "--out", tmp_path, *FAST_OVERRIDES,
        ]
        assert run_cli(*args) == 0
        run_dirs = list(Path(tmp_path).glob("cv-table2-row1-seed7-*"))
        assert len(run_dirs) == 1
        report = run_dirs[0] / "report.csv"
        lines = report.read_text().splitlines()
        assert lines[0] == "fold,Accuracy,Sensitivity,Specificity,AUROC"
        assert len(lines) == 5  # header + 3 folds + mean
        assert (run_dirs[0] / "fold0.ckpt").exists()
        assert (run_dirs[0] / "schema-fold0.json").exists()

        digest_before = hashlib.sha256(report.read_bytes()).hexdigest()
        json_before = (run_dirs[0] / "report.json").read_bytes()
        assert run_cli(*args) == 0
        assert hashlib.sha256(report.read_bytes()).hexdigest() == digest_before
        assert (run_dirs[0] / "report.json").read_bytes() == json_before

    def test_intermediate_preset_and_importance_roundtrip(
        self, tiny_cohort_dir, tmp_path, capsys
    ):
        assert run_cli(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row6",
            "--seed", 5, "--out", tmp_path, *FAST_OVERRIDES,
        ) == 0
        run_dir = next(Path(tmp_path).glob("cv-table2-row6-seed5-*"))
        ckpt = run_dir / "fold0.ckpt"

        assert run_cli(
            "importance", "--checkpoint", ckpt, "--dataset", tiny_cohort_dir,
            "--out", tmp_path,
        ) == 0
        imp_dir = next(Path(tmp_path).glob("importance-fold0-*"))
        modality = (imp_dir / "modality_importance.csv").read_text().splitlines()
        assert len(modality) == 4
        weights = [float(line.split(",")[1]) for line in modality[1:]]
        assert sum(weights) == pytest.approx(1.0, abs=1e-6)
        entries = (imp_dir / "ehr_entry_importance.csv").read_text().splitlines()
        assert len(entries) > 4

        before = (imp_dir / "modality_importance.csv").read_bytes()
        assert run_cli(
            "importance", "--checkpoint", ckpt, "--dataset", tiny_cohort_dir,
            "--out", tmp_path,
        ) == 0
        assert (imp_dir / "modality_importance.csv").read_bytes() == before

    def test_importance_on_wrong_kind_exits_4(self, tiny_cohort_dir, tmp_path, capsys):
        assert run_cli(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--seed", 2, "--out", tmp_path, *FAST_OVERRIDES,
        ) == 0
        ckpt = next(Path(tmp_path).glob("cv-table2-row1-seed2-*")) / "fold0.ckpt"
        code = run_cli(
            "importance", "--checkpoint", ckpt, "--dataset", tiny_cohort_dir,
            "--out", tmp_path,
        )
        assert code == 4

    def test_missing_dataset_exits_2(self, tmp_path):
        code = run_cli(
            "cv", "--dataset", tmp_path / "nope", "--preset", "table2-row1",
        )
        assert code == 2

    def test_parallel_folds_match_serial(self, tiny_cohort_dir, tmp_path):
        base = [
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row4",
            "--seed", 11, *FAST_OVERRIDES,
        ]
        assert run_cli(*base, "--out", tmp_path / "serial") == 0
        assert run_cli(*base, "--out", tmp_path / "threads", "--parallel-folds", 3) == 0
        serial = next((tmp_path / "serial").glob("cv-*")) / "report.csv"
        threaded = next((tmp_path / "threads").glob("cv-*")) / "report.csv"
        assert serial.read_bytes() == threaded.read_bytes()


class TestAblate:
    def test_four_rows_in_fixed_order(self, tiny_cohort_dir, tmp_path, capsys):
        assert run_cli(
            "ablate", "--dataset", tiny_cohort_dir, "--seed", 3,
            "--out", tmp_path, *FAST_OVERRIDES,
        ) == 0
        out_dir = next(Path(tmp_path).glob("ablate-seed3-*"))
        lines = (out_dir / "ablation.csv").read_text().splitlines()
        assert lines[0].startswith("preset,demo_vitals,metrics,labs,")
        presets = [line.split(",")[0] for line in lines[1:]]
        assert presets == [
            "table3-drop-demo", "table3-drop-metrics", "table3-drop-labs", "table3-full",
        ]
        flags = [line.split(",")[1:4] for line in lines[1:]]
        assert flags == [
            ["0", "1", "1"], ["1", "0", "1"], ["1", "1", "0"], ["1", "1", "1"],
        ]
        for preset in presets:
            assert (out_dir / preset / "report.csv").exists()


class TestEnvDefault:
    def test_cardiofuse_out_env(self, tiny_cohort_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("CARDIOFUSE_OUT", str(tmp_path / "envout"))
        assert run_cli(
            "cv", "--dataset", tiny_cohort_dir, "--preset", "table2-row1",
            "--seed", 1, *FAST_OVERRIDES,
        ) == 0
        assert list((tmp_path / "envout").glob("cv-table2-row1-seed1-*"))
