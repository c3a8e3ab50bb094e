"""End-to-end tests for the command-line harness."""

import csv
import dataclasses
import json
import re
from pathlib import Path

import numpy as np
import pytest

from stripenet.cli import (
    ConfigError,
    ExperimentConfig,
    ablation_presets,
    config_from_dict,
    dump_effective_config,
    load_experiment_config,
    main,
)
from stripenet.receptive import analyze, bundled_archspec_path, load_archspec

TINY = {
    "seed": 0,
    "dataset_seed": 5,
    "n_identities": 4,
    "train_per_camera": 2,
    "eval_per_camera": 1,
    "epochs": 1,
    "batch_p": 2,
    "batch_k": 2,
    "steps_per_epoch": 1,
}


def write_config(path: Path, overrides: dict) -> Path:
    path.write_text(json.dumps(overrides))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One short training run shared by the artifact-inspection tests."""
    root = tmp_path_factory.mktemp("tinyrun")
    cfg = write_config(root / "config.json", TINY)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestExperimentConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_round_trip_through_json(self, tmp_path):
        cfg = dataclasses.replace(
            ExperimentConfig(), stripe_counts=(1, 2, 4), decay_epochs=(5,), epochs=6
        )
        dump_effective_config(cfg, tmp_path / "c.json")
        assert load_experiment_config(tmp_path / "c.json") == cfg

    def test_unknown_keys_all_enumerated(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"bogus": 1, "wat": 2})
        assert "bogus" in str(exc.value)
        assert "wat" in str(exc.value)

    def test_validation_collects_every_error(self):
        cfg = dataclasses.replace(
            ExperimentConfig(), epochs=-1, margin=-1.0, flip_prob=2.0
        )
        with pytest.raises(ConfigError) as exc:
            cfg.validate()
        message = str(exc.value)
        assert "epochs" in message
        assert "margin" in message
        assert "flip_prob" in message
        assert message.count(";") >= 2

    def test_tuple_field_type_checked(self):
        with pytest.raises(ConfigError, match="stripe_counts"):
            config_from_dict({"stripe_counts": [2, "three"]})
        with pytest.raises(ConfigError, match="decay_epochs"):
            config_from_dict({"decay_epochs": "soon"})

    def test_lists_become_tuples(self):
        cfg = config_from_dict({"stripe_counts": [2, 3], "decay_epochs": [10, 20]})
        assert cfg.stripe_counts == (2, 3)
        assert cfg.decay_epochs == (10, 20)

    def test_rp_only_requires_rp(self):
        cfg = dataclasses.replace(ExperimentConfig(), with_rp=False, rp_only=True)
        with pytest.raises(ConfigError, match="rp_only"):
            cfg.validate()


class TestAblationPresets:
    def test_standard_six_rows(self):
        presets = ablation_presets()
        assert set(presets) == {"baseline", "rp", "only-rp", "rsa", "abp", "full"}

    def test_each_preset_yields_valid_config(self):
        for name, overrides in ablation_presets().items():
            cfg = config_from_dict(overrides)
            cfg.validate()

    def test_preset_flags(self):
        presets = ablation_presets()
        baseline = config_from_dict(presets["baseline"])
        assert not (baseline.with_rp or baseline.with_rsa or baseline.with_abp)
        full = config_from_dict(presets["full"])
        assert full.with_rp and full.with_rsa and full.with_abp
        only_rp = config_from_dict(presets["only-rp"])
        assert only_rp.rp_only and only_rp.with_rp


class TestAnalyze:
    def test_writes_table_and_grid(self, tmp_path, capsys):
        assert main(["analyze", "toy_backbone", "--out", str(tmp_path)]) == 0
        arch = load_archspec(bundled_archspec_path("toy_backbone"))
        expected = analyze(arch).to_csv()
        assert (tmp_path / "receptive_field.csv").read_text() == expected
        with open(tmp_path / "partition_grid.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        stem2 = {int(r["n_s"]): r for r in rows if r["layer"] == "stem2"}
        assert sorted(stem2) == [1, 2, 3, 4, 6]  # divisors of 12 up to 8
        assert stem2[2]["stripe_height"] == "6"
        assert stem2[2]["restricted_region"] == "27"
        assert stem2[2]["tail_rf"] == "7"
        assert stem2[2]["effective"] == "yes"
        assert stem2[3]["restricted_region"] == "19"
        assert stem2[3]["effective"] == "yes"
        input_rows = [r for r in rows if r["layer"] == "input"]
        assert {int(r["n_s"]) for r in input_rows} == {1, 2, 3, 4, 6, 8}
        assert "wrote" in capsys.readouterr().out

    def test_accepts_archspec_file_path(self, tmp_path):
        src = bundled_archspec_path("toy_backbone")
        copy = tmp_path / "mine.arch"
        copy.write_text(src.read_text())
        assert main(["analyze", str(copy), "--out", str(tmp_path / "o")]) == 0

    def test_unknown_bundled_name_reports_missing_file(self, tmp_path, capsys):
        assert main(["analyze", "no_such_backbone", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("missing-file-error:")
        assert "no_such_backbone" in err


class TestTrain:
    def test_artifacts_exist(self, tiny_run):
        _, out = tiny_run
        assert (out / "effective_config.json").is_file()
        assert (out / "training_log.csv").is_file()
        assert (out / "metrics.json").is_file()
        assert (out / "checkpoint" / "manifest.json").is_file()
        assert (out / "checkpoint" / "params.bin").is_file()
        assert (out / "data" / "manifest.csv").is_file()
        assert sorted((out / "data" / "images").glob("*.ppm"))

    def test_effective_config_reparses_to_run_settings(self, tiny_run):
        _, out = tiny_run
        reloaded = load_experiment_config(out / "effective_config.json")
        expected = dataclasses.replace(
            config_from_dict(dict(TINY)), out_dir=str(out)
        )
        assert reloaded == expected

    def test_metrics_json_shape(self, tiny_run):
        _, out = tiny_run
        report = json.loads((out / "metrics.json").read_text())
        assert report["seed"] == 0
        assert set(report["cmc"]) == {"1", "5", "10"} or set(report["cmc"]) >= {"1"}
        assert 0.0 <= report["map"] <= 1.0

    def test_log_has_one_row_per_epoch(self, tiny_run):
        _, out = tiny_run
        with open(out / "training_log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == TINY["epochs"]
        assert rows[0]["epoch"] == "0"
        assert rows[-1]["toy_rank1"] != ""

    def test_rerun_is_byte_identical(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        out2 = tmp_path / "again"
        assert main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
        for rel in ("training_log.csv", "checkpoint/params.bin",
                    "data/manifest.csv", "metrics.json"):
            assert (out / rel).read_bytes() == (out2 / rel).read_bytes(), rel

    def test_seed_flag_changes_run(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        out2 = tmp_path / "seeded"
        assert main(["train", "--config", str(cfg), "--seed", "9",
                     "--out", str(out2)]) == 0
        assert (out / "checkpoint" / "params.bin").read_bytes() != (
            out2 / "checkpoint" / "params.bin"
        ).read_bytes()
        assert json.loads((out2 / "metrics.json").read_text())["seed"] == 9

    def test_invalid_config_reports_all_problems(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", {"epochs": -3, "flip_prob": 7.0})
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("config-error:")
        assert "epochs" in err and "flip_prob" in err

    def test_malformed_json_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        assert main(["train", "--config", str(cfg)]) == 1
        assert capsys.readouterr().err.startswith("config-error:")


class TestEval:
    def test_self_match_on_untrained_checkpoint(self, tmp_path, capsys):
        overrides = dict(TINY, epochs=0)
        cfg = write_config(tmp_path / "zero.json", overrides)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        eval_out = tmp_path / "eval"
        rc = main([
            "eval",
            "--checkpoint", str(out / "checkpoint"),
            "--manifest", str(out / "data" / "manifest.csv"),
            "--query-split", "train", "--gallery-split", "train",
            "--no-protocol",
            "--out", str(eval_out),
        ])
        assert rc == 0
        report = json.loads((eval_out / "metrics.json").read_text())
        assert report["cmc"]["1"] == 1.0  # every query finds itself at distance 0
        assert report["n_queries"] == report["n_gallery"]

    def test_eval_standalone_reproduces_train_metrics(self, tiny_run, tmp_path):
        _, out = tiny_run
        eval_out = tmp_path / "eval"
        rc = main([
            "eval",
            "--checkpoint", str(out / "checkpoint"),
            "--manifest", str(out / "data" / "manifest.csv"),
            "--out", str(eval_out),
        ])
        assert rc == 0
        fresh = json.loads((eval_out / "metrics.json").read_text())
        trained = json.loads((out / "metrics.json").read_text())
        assert fresh["map"] == trained["map"]
        assert fresh["cmc"] == trained["cmc"]

    def test_custom_ranks(self, tiny_run, tmp_path):
        _, out = tiny_run
        eval_out = tmp_path / "eval"
        rc = main([
            "eval",
            "--checkpoint", str(out / "checkpoint"),
            "--manifest", str(out / "data" / "manifest.csv"),
            "--ranks", "1,2",
            "--out", str(eval_out),
        ])
        assert rc == 0
        report = json.loads((eval_out / "metrics.json").read_text())
        assert set(report["cmc"]) == {"1", "2"}

    def test_missing_checkpoint_reported(self, tiny_run, tmp_path, capsys):
        _, out = tiny_run
        rc = main([
            "eval", "--checkpoint", str(tmp_path / "nowhere"),
            "--manifest", str(out / "data" / "manifest.csv"),
        ])
        assert rc == 1
        assert capsys.readouterr().err.startswith("missing-file-error:")


class TestHeatmap:
    def test_writes_per_head_grids(self, tiny_run, tmp_path):
        _, out = tiny_run
        image = sorted((out / "data" / "images").glob("*.ppm"))[0]
        hm = tmp_path / "maps"
        rc = main([
            "heatmap", "--checkpoint", str(out / "checkpoint"),
            "--image", str(image), "--out", str(hm),
        ])
        assert rc == 0
        files = sorted(p.name for p in hm.glob("heatmap_*.csv"))
        assert len(files) == 14  # two branches x two paths x (1 + K) maps
        assert "heatmap_b0_orig_s0.csv" in files
        assert "heatmap_b1_rp_s3.csv" in files

        def grid(name):
            with open(hm / name, newline="") as fh:
                return [[float(v) for v in row] for row in csv.reader(fh)]

        full = grid("heatmap_b0_orig_s0.csv")
        assert len(full) == 6 and len(full[0]) == 2
        assert len(grid("heatmap_b0_orig_s1.csv")) == 3  # halves of a 6-row map
        assert len(grid("heatmap_b1_rp_s2.csv")) == 2  # thirds of a 6-row map
        stripes = [grid(f"heatmap_b1_orig_s{s}.csv") for s in (1, 2, 3)]
        stacked = [row for g in stripes for row in g]
        assert np.allclose(stacked, grid("heatmap_b1_orig_s0.csv"), atol=1e-9)

    def test_missing_checkpoint_reported(self, tiny_run, tmp_path, capsys):
        _, out = tiny_run
        image = sorted((out / "data" / "images").glob("*.ppm"))[0]
        rc = main(["heatmap", "--checkpoint", str(tmp_path / "gone"),
                   "--image", str(image)])
        assert rc == 1
        assert capsys.readouterr().err.startswith("missing-file-error:")


class TestAbpDemo:
    def test_histogram_and_cuts(self, tmp_path, capsys):
        rc = main(["abp-demo", "--seed", "3", "--out", str(tmp_path),
                   "--channels", "32", "--height", "12", "--stripes", "3"])
        assert rc == 0
        with open(tmp_path / "histogram.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12
        cums = [int(r["cumulative_count"]) for r in rows]
        assert cums == sorted(cums)
        assert cums[-1] == 32
        out = capsys.readouterr().out
        cuts_line = next(l for l in out.splitlines() if l.startswith("cuts:"))
        cuts = [int(c) for c in cuts_line.split()[1:]]
        assert len(cuts) == 4 and cuts[0] == 0 and cuts[-1] == 12
        assert out.count("stripe ") == 3

    def test_rejects_more_stripes_than_rows(self, tmp_path, capsys):
        rc = main(["abp-demo", "--height", "4", "--stripes", "9",
                   "--out", str(tmp_path)])
        assert rc == 1
        assert re.match(r"^[a-z-]+-error: ", capsys.readouterr().err)


class TestAugmentPreview:
    def test_renders_previews_and_table(self, tmp_path):
        rc = main(["augment-preview", "--seed", "5", "--count", "6",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "original.ppm").is_file()
        previews = sorted(tmp_path.glob("preview_*.ppm"))
        assert len(previews) == 6
        with open(tmp_path / "transforms.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert set(rows[0]) == {"index", "cropped", "r_c", "r_h", "r_w", "oy", "ox"}
        for row in rows:
            if row["cropped"] == "0":
                assert float(row["r_c"]) == 1.0 and row["oy"] == "0"

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["augment-preview", "--seed", "11", "--count", "4",
                         "--out", str(out)]) == 0
        assert (a / "transforms.csv").read_bytes() == (b / "transforms.csv").read_bytes()
        assert (a / "preview_000.ppm").read_bytes() == (b / "preview_000.ppm").read_bytes()

    def test_reads_custom_image(self, tmp_path, capsys):
        from stripenet.augment import write_ppm

        img = (np.arange(48 * 16 * 3).reshape(48, 16, 3) % 256).astype(np.uint8)
        src = tmp_path / "input.ppm"
        write_ppm(src, img)
        rc = main(["augment-preview", "--image", str(src), "--count", "2",
                   "--out", str(tmp_path / "o")])
        assert rc == 0
        original = (tmp_path / "o" / "original.ppm").read_bytes()
        assert original == src.read_bytes()


class TestGradcheckCommand:
    def test_battery_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "FAIL" not in out


class TestErrorReporting:
    def test_one_line_class_prefixed_messages(self, tmp_path, capsys):
        assert main(["analyze", "missing_arch", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1  # a single line
        assert re.match(r"^[a-z][a-z-]*-error: .+\n$", err)
