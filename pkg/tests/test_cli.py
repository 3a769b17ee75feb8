import json
from pathlib import Path

import numpy as np
import pytest

from voiceface.cli import main, read_predictions_csv
from voiceface.config import load_config


def write_config(tmp: Path, **extra) -> Path:
    lines = [
        "[paths]",
        f"dataset_root = {tmp / 'dataset'}",
        f"output_dir = {tmp / 'out'}",
        "[synth]",
        "n_speakers = 60",
        "[training]",
        "iterations = 50",
        "batch_size = 16",
        "segment_lo_frames = 24",
        "segment_hi_frames = 32",
        "warmup_iterations = 12",
        "eval_every = 25",
        "n_eval_segments = 2",
        "[harness]",
        "n_runs = 5",
        "iterations = 40",
        "batch_size = 16",
        "warmup_iterations = 10",
        "eval_every = 20",
        "[reconstruction]",
        "basis_dim = 24",
        "[pipeline]",
        "seed = 11",
    ]
    for k, v in extra.items():
        lines.append(f"{k} = {v}")
    path = tmp / "pipeline.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestConfig:
    def test_defaults(self):
        cfg = load_config(env={})
        assert cfg.get_int("training", "iterations") == 5000
        assert cfg.get_float("training", "learning_rate") == 0.1
        assert cfg.get_int("harness", "n_runs") == 100

    def test_file_overrides_defaults(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, env={})
        assert cfg.get_int("training", "iterations") == 50

    def test_env_overrides_file(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, env={"VOICEFACE__TRAINING__ITERATIONS": "77"})
        assert cfg.get_int("training", "iterations") == 77

    def test_flag_overrides_env(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, overrides={"training.iterations": "99"},
                          env={"VOICEFACE__TRAINING__ITERATIONS": "77"})
        assert cfg.get_int("training", "iterations") == 99

    def test_hash_tracks_values(self, tmp_path):
        path = write_config(tmp_path)
        a = load_config(path, env={})
        b = load_config(path, overrides={"pipeline.seed": "12"}, env={})
        assert a.hash != b.hash
        assert a.hash == load_config(path, env={}).hash

    def test_alpha_validated(self, tmp_path):
        path = write_config(tmp_path)
        with pytest.raises(ValueError):
            load_config(path, overrides={"harness.alpha": "0.7"}, env={})

    def test_bool_parsing(self):
        cfg = load_config(overrides={"training.phonatory": "yes"}, env={})
        assert cfg.get_bool("training", "phonatory") is True
        cfg = load_config(env={})
        assert cfg.get_bool("training", "phonatory") is False


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp)
    for stage in ("synth", "compute-ams", "build-basis", "train", "predict",
                  "select", "fit", "evaluate", "report"):
        assert main(["--config", str(cfg_path), stage]) == 0, stage
    return tmp, cfg_path


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        tmp, _ = pipeline
        out = tmp / "out"
        for name in ("ams.csv", "basis.bin", "model.bin", "predictions_v2.csv",
                     "predictions_eval.csv", "report.csv", "selection.json",
                     "fig_am_bars.svg", "fit_summary.csv", "evaluation_summary.csv",
                     "report/summary.csv", "report/fig_error_levels.svg"):
            assert (out / name).exists(), name

    def test_run_records_share_hash(self, pipeline):
        tmp, _ = pipeline
        out = tmp / "out"
        hashes = set()
        for record in out.glob("*.run.json"):
            hashes.add(json.loads(record.read_text())["config_hash"])
        assert len(hashes) == 1

    def test_artifacts_embed_hash_and_seed(self, pipeline):
        tmp, _ = pipeline
        out = tmp / "out"
        record_hash = json.loads((out / "train.run.json").read_text())["config_hash"]
        for name in ("ams.csv", "report.csv", "fit_summary.csv"):
            head = (out / name).read_text().splitlines()[:2]
            assert head[0] == f"# config_hash={record_hash}"
            assert head[1] == "# seed=11"

    def test_some_planted_flagged(self, pipeline):
        tmp, _ = pipeline
        selection = json.loads((tmp / "out" / "selection.json").read_text())
        planted = set(json.loads((tmp / "dataset" / "manifest.json").read_text())["planted"])
        assert planted & set(selection["predictable"])

    def test_predictions_readable(self, pipeline):
        tmp, _ = pipeline
        speakers, rids, am_ids, means, ws = read_predictions_csv(
            tmp / "out" / "predictions_v2.csv"
        )
        assert len(speakers) == 6  # 60 speakers -> 6 in v2
        assert len(am_ids) == 24
        assert np.all(ws > 0)

    def test_stage_rerun_byte_identical(self, pipeline):
        tmp, cfg_path = pipeline
        out = tmp / "out"
        before = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
        assert main(["--config", str(cfg_path), "report"]) == 0
        assert main(["--config", str(cfg_path), "evaluate"]) == 0
        after = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
        assert before == after

    def test_fit_before_select_errors(self, pipeline, capsys, tmp_path):
        tmp, cfg_path = pipeline
        code = main(["--config", str(cfg_path),
                     "--set", f"paths.output_dir={tmp_path / 'fresh'}", "fit"])
        assert code == 1
        err = capsys.readouterr().err
        assert "build-basis" in err or "select" in err
        assert "run `voiceface" in err

    def test_hash_mismatch_detected(self, pipeline, capsys):
        tmp, cfg_path = pipeline
        code = main(["--config", str(cfg_path), "--seed", "999", "train"])
        assert code == 1
        assert "config hash mismatch" in capsys.readouterr().err

    def test_bad_set_flag(self, pipeline, capsys):
        _, cfg_path = pipeline
        assert main(["--config", str(cfg_path), "--set", "nonsense", "synth"]) == 1


class TestVersion:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "voiceface" in capsys.readouterr().out
