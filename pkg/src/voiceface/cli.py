"""Pipeline command line: synth | compute-ams | build-basis | train |
predict | select | fit | evaluate | report.

Each stage validates its inputs, writes versioned artifacts under the output
directory, and records a `<stage>.run.json` with the config hash, master
seed, and content hashes of everything read and written.  Stages refuse to
mix runs: a config-hash mismatch against an upstream record is an error, and
a missing upstream artifact names the stage to run first.

Artifacts are deterministic: rerunning a stage with the same seed and config
reproduces every byte.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataio, svgplot
from .config import PipelineConfig, load_config
from .estimator import (
    EstimatorDataset,
    Recording,
    TrainingConfig,
    load_model,
    predict_split,
    save_model,
    train,
)
from .features import MelNormalization
from .geometry import canonical_am_definitions, compute_all_ams, fit_normalization
from .phonatory import PhonatoryTrainer
from .reconstruction import (
    ReconstructionProblem,
    filtered_error_maps,
    fit as fit_shape,
    per_vertex_error,
    select_top_ams,
)
from .shapespace import build_basis, load_basis, save_basis, unflatten
from .stats import HarnessConfig, run_harness, run_phoneme_harness, report_to_csv
from .synthdata import SynthConfig, generate, phoneme_annotations

STAGES = ("synth", "compute-ams", "build-basis", "train", "predict", "select",
          "fit", "evaluate", "report")


class PipelineError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _paths(cfg: PipelineConfig):
    return Path(cfg.get("paths", "dataset_root")), Path(cfg.get("paths", "output_dir"))


def _write_run_record(out: Path, stage: str, cfg: PipelineConfig,
                      inputs: list[Path], outputs: list[Path], metrics=None) -> None:
    record = {
        "stage": stage,
        "config_hash": cfg.hash,
        "seed": cfg.get_int("pipeline", "seed"),
        "inputs": {str(p): _sha256(Path(p)) for p in sorted(map(str, inputs))},
        "outputs": {str(p): _sha256(Path(p)) for p in sorted(map(str, outputs))},
    }
    if metrics:
        record["metrics"] = metrics
    dataio.write_json(out / f"{stage}.run.json", record)


def _require_stage(out: Path, needed: str, cfg: PipelineConfig) -> dict:
    record_path = out / f"{needed}.run.json"
    if not record_path.exists():
        raise PipelineError(
            f"missing artifact from stage {needed!r}; run `voiceface {needed}` first"
        )
    record = dataio.read_json(record_path)
    if record["config_hash"] != cfg.hash:
        raise PipelineError(
            f"config hash mismatch with stage {needed!r} "
            f"({record['config_hash']} != {cfg.hash}); rerun it with this config"
        )
    return record


def _artifact_comments(cfg: PipelineConfig) -> list[str]:
    return [f"config_hash={cfg.hash}", f"seed={cfg.get_int('pipeline', 'seed')}"]


# ---------------------------------------------------------------------------
# dataset access

def _load_dataset_meta(root: Path):
    for name in ("landmarks.txt", "am_definitions.txt", "splits.json", "recordings.json"):
        if not (root / name).exists():
            raise PipelineError(
                f"dataset file {root / name} missing; run `voiceface synth` "
                "or point paths.dataset_root at a prepared dataset"
            )
    landmarks = dataio.read_landmarks(root / "landmarks.txt")
    am_defs = dataio.read_am_definitions(root / "am_definitions.txt")
    splits = dataio.read_json(root / "splits.json")
    recmeta = dataio.read_json(root / "recordings.json")
    return landmarks, am_defs, splits, recmeta


def _dataset_input_paths(root: Path) -> list[Path]:
    return [root / "landmarks.txt", root / "am_definitions.txt",
            root / "splits.json", root / "recordings.json"]


def _load_estimator_dataset(root: Path, out: Path, cfg: PipelineConfig):
    """Assemble the training dataset from files: raw features normalized with
    train-split statistics, AM targets standardized with the train-split
    normalization."""
    landmarks, am_defs, splits, recmeta = _load_dataset_meta(root)
    speakers_csv, am_ids, table = dataio.read_am_table(out / "ams.csv")
    row_of = {s: i for i, s in enumerate(speakers_csv)}
    split_of = {s: name for name, members in splits.items() for s in members}

    train_rows = np.stack([table[row_of[s]] for s in splits["train"]])
    am_norm = fit_normalization(train_rows, am_ids)
    targets = {s: am_norm.apply(table[row_of[s]]) for s in speakers_csv}

    raw = {}
    for rid in recmeta["recordings"]:
        raw[rid] = dataio.read_feature_cache(root / "features" / f"{rid}.vff")
    train_rids = [rid for rid, spk in recmeta["recordings"].items() if split_of[spk] == "train"]
    feature_norm = _fit_feature_norm_from(raw, train_rids)

    recordings: dict[str, list[Recording]] = {name: [] for name in splits}
    for rid in sorted(recmeta["recordings"]):
        speaker = recmeta["recordings"][rid]
        wave_path = root / "waves" / f"{rid}.vfw"
        wave = dataio.read_wave_blob(wave_path) if wave_path.exists() else None
        recordings[split_of[speaker]].append(
            Recording(speaker, rid, feature_norm.apply(raw[rid]), wave=wave)
        )
    dataset = EstimatorDataset(tuple(am_ids), targets, recordings)
    return dataset, am_norm, feature_norm, landmarks, am_defs


def _fit_feature_norm_from(raw: dict, rids: list[str]) -> MelNormalization:
    pooled = np.concatenate([raw[rid] for rid in sorted(rids)], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.maximum(std, 1e-12)
    return MelNormalization(mean, std)


def _training_config(cfg: PipelineConfig, section: str = "training") -> TrainingConfig:
    def geti(key, fallback_section="training"):
        try:
            return cfg.get_int(section, key)
        except KeyError:
            return cfg.get_int(fallback_section, key)

    eval_every = geti("eval_every") or None
    return TrainingConfig(
        iterations=geti("iterations"),
        batch_size=geti("batch_size"),
        learning_rate=cfg.get_float("training", "learning_rate"),
        momentum=cfg.get_float("training", "momentum"),
        weight_decay=cfg.get_float("training", "weight_decay"),
        max_grad_norm=cfg.get_float("training", "max_grad_norm"),
        seed=cfg.get_int("pipeline", "seed"),
        segment_frames=(cfg.get_int("training", "segment_lo_frames"),
                        cfg.get_int("training", "segment_hi_frames")),
        warmup_iterations=geti("warmup_iterations"),
        eval_every=eval_every,
        n_eval_segments=cfg.get_int("training", "n_eval_segments"),
    )


def _phonatory_from(cfg: PipelineConfig) -> PhonatoryTrainer | None:
    if not cfg.get_bool("training", "phonatory"):
        return None
    return PhonatoryTrainer(
        gamma=cfg.get_float("training", "gamma"),
        window_stride=cfg.get_int("training", "window_stride"),
        pretrain_iterations=cfg.get_int("training", "pretrain_iterations"),
    )


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    synth_cfg = SynthConfig(
        n_speakers=cfg.get_int("synth", "n_speakers"),
        n_vertices=cfg.get_int("synth", "n_vertices"),
        latent_dim=cfg.get_int("synth", "latent_dim"),
        planted_am_ids=tuple(cfg.get_list("synth", "planted")),
        signal_strength=cfg.get_float("synth", "signal_strength"),
        quality_range=(cfg.get_float("synth", "quality_low"),
                       cfg.get_float("synth", "quality_high")),
        noise_rec=cfg.get_float("synth", "noise_rec"),
        noise_frame=cfg.get_float("synth", "noise_frame"),
        n_frames=cfg.get_int("synth", "n_frames"),
        frame_hop=cfg.get_float("synth", "frame_hop"),
        wave_periods=cfg.get_int("synth", "wave_periods"),
        seed=cfg.get_int("pipeline", "seed"),
    )
    ds = generate(synth_cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meshes").mkdir(exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    (root / "waves").mkdir(exist_ok=True)

    comments = _artifact_comments(cfg)
    outputs = []

    def track(path):
        outputs.append(path)
        return path

    dataio.write_landmarks(track(root / "landmarks.txt"), ds.landmarks, comments)
    dataio.write_am_definitions(track(root / "am_definitions.txt"), ds.am_defs, comments)
    dataio.write_json(track(root / "splits.json"), ds.split_speakers)
    rec_to_speaker = {}
    for split_recs in ds.recordings.values():
        for rec in split_recs:
            rec_to_speaker[rec.recording_id] = rec.speaker
    dataio.write_json(
        track(root / "recordings.json"),
        {"frame_hop": synth_cfg.frame_hop, "recordings": rec_to_speaker},
    )
    dataio.write_json(
        track(root / "manifest.json"),
        {
            "planted": list(ds.manifest.planted),
            "signal_strength": ds.manifest.signal_strength,
            "channels": ds.manifest.channels,
        },
    )
    for speaker in ds.speakers():
        dataio.write_mesh_binary(track(root / "meshes" / f"{speaker}.vfm"), ds.meshes[speaker])
    for rid, frames in sorted(ds.raw_features_by_recording.items()):
        dataio.write_feature_cache(track(root / "features" / f"{rid}.vff"), frames)
    for rid, wave in sorted(ds.waves_by_recording.items()):
        dataio.write_wave_blob(track(root / "waves" / f"{rid}.vfw"), wave)
    if cfg.get_bool("synth", "write_phonemes"):
        annotations = phoneme_annotations(
            ds,
            labels=tuple(cfg.get_list("synth", "phoneme_labels")),
            span_frames=cfg.get_int("synth", "phoneme_span_frames"),
        )
        dataio.write_json(track(root / "phonemes.json"), {
            "annotations": {rid: [list(s) for s in spans] for rid, spans in annotations.items()}
        })

    out.mkdir(parents=True, exist_ok=True)
    _write_run_record(out, "synth", cfg, [], outputs)


def stage_compute_ams(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    landmarks, am_defs, splits, _ = _load_dataset_meta(root)
    speakers = sorted(s for members in splits.values() for s in members)
    inputs = list(_dataset_input_paths(root))
    values = np.empty((len(speakers), len(am_defs)))
    topology = f"dataset-{root.name}"
    for i, speaker in enumerate(speakers):
        mesh_path = root / "meshes" / f"{speaker}.vfm"
        if not mesh_path.exists():
            raise PipelineError(f"mesh for {speaker!r} missing; run `voiceface synth` first")
        mesh = dataio.read_mesh_binary(mesh_path, topology_id=topology)
        values[i] = compute_all_ams(mesh, landmarks, am_defs).values
        inputs.append(mesh_path)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "ams.csv"
    dataio.write_am_table(table_path, speakers, [d.id for d in am_defs], values,
                          _artifact_comments(cfg))
    _write_run_record(out, "compute-ams", cfg, inputs, [table_path])


def stage_build_basis(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _, _, splits, _ = _load_dataset_meta(root)
    train_speakers = splits["train"]
    topology = f"dataset-{root.name}"
    meshes = []
    inputs = list(_dataset_input_paths(root))
    for speaker in train_speakers:
        path = root / "meshes" / f"{speaker}.vfm"
        meshes.append(dataio.read_mesh_binary(path, topology_id=topology))
        inputs.append(path)
    d = cfg.get_int("reconstruction", "basis_dim")
    if d <= 0:
        d = min(len(meshes) - 1, 199)
    basis = build_basis(meshes, d=d)
    out.mkdir(parents=True, exist_ok=True)
    basis_path = out / "basis.bin"
    save_basis(basis, basis_path)
    _write_run_record(out, "build-basis", cfg, inputs, [basis_path],
                      metrics={"dim": basis.dim})


def stage_train(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _require_stage(out, "compute-ams", cfg)
    dataset, am_norm, feature_norm, _, _ = _load_estimator_dataset(root, out, cfg)
    result = train(dataset, _training_config(cfg), phonatory=_phonatory_from(cfg),
                   feature_norm=feature_norm, am_norm=am_norm)
    model_path = out / "model.bin"
    save_model(result.model, model_path)
    _write_run_record(
        out, "train", cfg,
        [out / "ams.csv"], [model_path],
        metrics={
            "best_v1_error": result.best_v1_error,
            "selected_iteration": result.selected_iteration,
            "final_loss": float(result.loss_trace[-1]),
        },
    )


def _write_predictions_csv(path, recordings, means, calibrated, am_ids, comments):
    with open(path, "w") as fh:
        fh.write("".join(f"# {c}\n" for c in comments))
        cols = ["speaker", "recording"]
        cols += [f"mean:{a}" for a in am_ids] + [f"w:{a}" for a in am_ids]
        fh.write(",".join(cols) + "\n")
        for rec, m_row, w_row in zip(recordings, means, calibrated):
            row = [rec.speaker, rec.recording_id]
            row += [f"{v:.12g}" for v in m_row] + [f"{v:.12g}" for v in w_row]
            fh.write(",".join(row) + "\n")


def read_predictions_csv(path):
    speakers, rids, rows = [], [], []
    header = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            parts = line.split(",")
            speakers.append(parts[0])
            rids.append(parts[1])
            rows.append([float(p) for p in parts[2:]])
    if header is None:
        raise ValueError(f"{path}: empty predictions file")
    k = (len(header) - 2) // 2
    am_ids = tuple(h.split(":", 1)[1] for h in header[2 : 2 + k])
    table = np.array(rows)
    return speakers, rids, am_ids, table[:, :k], table[:, k:]


def stage_predict(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _require_stage(out, "train", cfg)
    model = load_model(out / "model.bin")
    dataset, _, _, _, _ = _load_estimator_dataset(root, out, cfg)
    n_segments = cfg.get_int("training", "n_eval_segments")
    outputs = []
    for split in ("v2", "eval"):
        recs = dataset.split(split)
        if not recs:
            continue
        means, calibrated = predict_split(model, recs, n_segments)
        path = out / f"predictions_{split}.csv"
        _write_predictions_csv(path, recs, means, calibrated, model.am_ids,
                               _artifact_comments(cfg))
        outputs.append(path)
    _write_run_record(out, "predict", cfg, [out / "model.bin"], outputs)


def stage_select(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _require_stage(out, "compute-ams", cfg)
    dataset, _, _, _, _ = _load_estimator_dataset(root, out, cfg)
    harness = HarnessConfig(
        n_runs=cfg.get_int("harness", "n_runs"),
        alpha=cfg.get_float("harness", "alpha"),
        filter_levels=tuple(cfg.get_float_list("harness", "filter_levels")),
        master_seed=cfg.get_int("pipeline", "seed"),
        gamma=cfg.get_float("training", "gamma") if cfg.get_bool("training", "phonatory") else 0.0,
        window_stride=cfg.get_int("training", "window_stride"),
        n_eval_segments=cfg.get_int("training", "n_eval_segments"),
    )
    report = run_harness(dataset, _training_config(cfg, section="harness"), harness,
                         n_jobs=max(1, cfg.get_int("pipeline", "jobs")))

    comments = _artifact_comments(cfg)
    report_path = out / "report.csv"
    report_path.write_text(report_to_csv(report, comments))
    weights, chosen = select_top_ams(report, cfg.get_int("reconstruction", "top_ams"))
    selection_path = out / "selection.json"
    dataio.write_json(selection_path, {
        "chosen": chosen,
        "weights": {am: w for am, w in zip(report.am_ids, weights.tolist())},
        "predictable": report.predictable_ams(1.0),
    })
    svg_path = out / "fig_am_bars.svg"
    svg_path.write_text(
        svgplot.bar_chart(report.one_minus_ci(1.0), "1 - CI_u per measurement (100% level)",
                          ylabel="1 - CI_u", comments=comments)
    )
    outputs = [report_path, selection_path, svg_path]

    phonemes_path = root / "phonemes.json"
    if phonemes_path.exists():
        annotations = {
            rid: [tuple(span) for span in spans]
            for rid, spans in dataio.read_json(phonemes_path)["annotations"].items()
        }
        n_ph = cfg.get_int("harness", "phoneme_runs") if _has(cfg, "harness", "phoneme_runs") else 0
        if n_ph > 0:
            scores = run_phoneme_harness(dataset, annotations,
                                         _training_config(cfg, section="harness"),
                                         replace(harness, n_runs=n_ph))
            ordered = dict(sorted(scores.items(), key=lambda kv: -kv[1]))
            ph_csv = out / "phoneme_scores.csv"
            with open(ph_csv, "w") as fh:
                fh.write("".join(f"# {c}\n" for c in comments))
                fh.write("phoneme,mean_one_minus_ci\n")
                for label, score in ordered.items():
                    fh.write(f"{label},{score:.10g}\n")
            ph_svg = out / "fig_phonemes.svg"
            ph_svg.write_text(svgplot.bar_chart(ordered, "Mean 1 - CI_u per phoneme",
                                                ylabel="1 - CI_u", comments=comments))
            outputs += [ph_csv, ph_svg]

    _write_run_record(out, "select", cfg, [out / "ams.csv"], outputs)


def _has(cfg: PipelineConfig, section, key) -> bool:
    try:
        cfg.get(section, key)
        return True
    except KeyError:
        return False


def stage_fit(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _require_stage(out, "build-basis", cfg)
    _require_stage(out, "predict", cfg)
    _require_stage(out, "select", cfg)
    model = load_model(out / "model.bin")
    landmarks, am_defs, splits, _ = _load_dataset_meta(root)
    topology = f"dataset-{root.name}"
    basis = load_basis(out / "basis.bin", topology_id=topology)
    selection = dataio.read_json(out / "selection.json")
    weights = np.array([selection["weights"][d.id] for d in am_defs])

    speakers, rids, am_ids, means, calibrated = read_predictions_csv(out / "predictions_eval.csv")
    if tuple(am_ids) != tuple(d.id for d in am_defs):
        raise PipelineError("predictions and AM definitions disagree on measurement ids")

    # one row per eval speaker (synthetic eval recordings are one per speaker;
    # multiple rows per speaker are averaged)
    by_speaker: dict[str, list[int]] = {}
    for i, s in enumerate(speakers):
        by_speaker.setdefault(s, []).append(i)

    lam = cfg.get_float("reconstruction", "lambda")
    max_iter = cfg.get_int("reconstruction", "max_iterations")
    (out / "fits").mkdir(parents=True, exist_ok=True)
    selected_idx = np.flatnonzero(weights > 0)
    outputs = []
    summary_rows = []
    for speaker in sorted(by_speaker):
        rows = by_speaker[speaker]
        mean_pred = means[rows].mean(axis=0)
        w_pred = calibrated[rows].mean(axis=0)
        targets = model.am_norm.invert(mean_pred)
        problem = ReconstructionProblem(basis, landmarks, am_defs, targets, weights,
                                        lam=lam, max_iterations=max_iter)
        result = fit_shape(problem)
        mesh_path = out / "fits" / f"{speaker}.vfm"
        dataio.write_mesh_binary(mesh_path, result.mesh)
        outputs.append(mesh_path)
        uncertainty = float(w_pred[selected_idx].mean()) if selected_idx.size else float("nan")
        summary_rows.append(
            f"{speaker},{int(result.converged)},{result.n_iterations},"
            f"{result.objective_trace[-1]:.10g},{uncertainty:.10g}"
        )
    summary_path = out / "fit_summary.csv"
    with open(summary_path, "w") as fh:
        fh.write("".join(f"# {c}\n" for c in _artifact_comments(cfg)))
        fh.write("speaker,converged,iterations,objective,uncertainty\n")
        fh.write("\n".join(summary_rows) + "\n")
    outputs.append(summary_path)
    _write_run_record(out, "fit", cfg,
                      [out / "basis.bin", out / "predictions_eval.csv", out / "selection.json"],
                      outputs)


def stage_evaluate(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    _require_stage(out, "fit", cfg)
    _, _, splits, _ = _load_dataset_meta(root)
    topology = f"dataset-{root.name}"
    levels = tuple(cfg.get_float_list("harness", "filter_levels"))

    rows = []
    with open(out / "fit_summary.csv") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("speaker,"):
                continue
            parts = line.split(",")
            rows.append((parts[0], float(parts[4])))

    fields = []
    uncertainties = []
    speakers = []
    for speaker, uncertainty in rows:
        fitted = dataio.read_mesh_binary(out / "fits" / f"{speaker}.vfm", topology_id=topology)
        truth_path = root / "meshes" / f"{speaker}.vfm"
        if not truth_path.exists():
            raise PipelineError(f"ground-truth mesh for {speaker!r} missing; run `voiceface synth`")
        truth = dataio.read_mesh_binary(truth_path, topology_id=topology)
        fields.append(per_vertex_error(fitted, truth))
        uncertainties.append(uncertainty)
        speakers.append(speaker)
    fields = np.stack(fields)
    maps = filtered_error_maps(fields, np.array(uncertainties), levels, order_keys=speakers)

    comments = _artifact_comments(cfg)
    outputs = []
    summary = {}
    for level in levels:
        tag = f"{int(round(level * 100))}"
        path = out / f"error_map_{tag}.csv"
        dataio.write_error_field_csv(path, maps[level], comments)
        outputs.append(path)
        summary[level] = float(maps[level].mean())
    mean_mesh = unflatten(load_basis(out / "basis.bin", topology_id=topology).mean_shape, topology)
    annotated = out / "error_map_mean_face.txt"
    dataio.write_annotated_mesh(annotated, mean_mesh, maps[levels[0]], comments)
    outputs.append(annotated)
    summary_path = out / "evaluation_summary.csv"
    with open(summary_path, "w") as fh:
        fh.write("".join(f"# {c}\n" for c in comments))
        fh.write("level,mean_error_mm\n")
        for level in levels:
            fh.write(f"{level:g},{summary[level]:.10g}\n")
    outputs.append(summary_path)
    _write_run_record(out, "evaluate", cfg, [out / "fit_summary.csv"], outputs,
                      metrics={f"mean_error_{int(round(l * 100))}": summary[l] for l in levels})


def stage_report(cfg: PipelineConfig) -> None:
    root, out = _paths(cfg)
    select_rec = _require_stage(out, "select", cfg)
    evaluate_rec = _require_stage(out, "evaluate", cfg)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    comments = _artifact_comments(cfg)

    outputs = []
    summary_path = report_dir / "summary.csv"
    lines = [f"# {c}" for c in comments]
    lines.append("section,key,value")
    for line in (out / "report.csv").read_text().splitlines():
        if line.startswith("#") or line.startswith("am_id"):
            continue
        am_id, level, mean_ratio, std, ci_u, decision = line.split(",")
        lines.append(f"am,{am_id}@{level},{decision}")
    for line in (out / "evaluation_summary.csv").read_text().splitlines():
        if line.startswith("#") or line.startswith("level"):
            continue
        level, err = line.split(",")
        lines.append(f"reconstruction,mean_error@{level},{err}")
    summary_path.write_text("\n".join(lines) + "\n")
    outputs.append(summary_path)

    for name in ("fig_am_bars.svg", "fig_phonemes.svg"):
        src = out / name
        if src.exists():
            dst = report_dir / name
            dst.write_bytes(src.read_bytes())
            outputs.append(dst)

    level_errors = {}
    for line in (out / "evaluation_summary.csv").read_text().splitlines():
        if line.startswith("#") or line.startswith("level"):
            continue
        level, err = line.split(",")
        level_errors[f"{float(level):g}"] = float(err)
    err_svg = report_dir / "fig_error_levels.svg"
    err_svg.write_text(svgplot.bar_chart(level_errors,
                                         "Mean per-vertex error by confidence level",
                                         ylabel="mm", comments=comments))
    outputs.append(err_svg)
    _write_run_record(out, "report", cfg,
                      [out / "report.csv", out / "evaluation_summary.csv"], outputs)


_STAGE_FUNCS = {
    "synth": stage_synth,
    "compute-ams": stage_compute_ams,
    "build-basis": stage_build_basis,
    "train": stage_train,
    "predict": stage_predict,
    "select": stage_select,
    "fit": stage_fit,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voiceface",
        description="voice -> anthropometric measurements -> 3D face pipeline",
    )
    parser.add_argument("--version", action="version", version=f"voiceface {__version__}")
    parser.add_argument("--config", help="INI config file; flags override file values")
    parser.add_argument("--seed", type=int, help="master seed (pipeline.seed)")
    parser.add_argument("--jobs", type=int, help="worker count hint (pipeline.jobs)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value; repeatable")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage)
        if stage in ("train", "select"):
            sp.add_argument("--phonatory", action="store_true", default=None,
                            help="enable the diffusion training constraint")
            sp.add_argument("--gamma", type=float, help="phonatory loss weight")
        if stage == "synth":
            sp.add_argument("--n-speakers", type=int)
        if stage in ("synth", "train", "predict"):
            sp.add_argument("--sample-rate", type=int,
                            help="audio sample rate for WAV ingestion (features.sample_rate)")
        if stage == "select":
            sp.add_argument("--n-runs", type=int, help="repeated experiments N")
    return parser


def _overrides_from(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise PipelineError(f"bad --set {item!r}; expected SECTION.KEY=VALUE")
        dotted, value = item.split("=", 1)
        overrides[dotted] = value
    if args.seed is not None:
        overrides["pipeline.seed"] = str(args.seed)
    if args.jobs is not None:
        overrides["pipeline.jobs"] = str(args.jobs)
    if getattr(args, "phonatory", None):
        overrides["training.phonatory"] = "true"
    if getattr(args, "gamma", None) is not None:
        overrides["training.gamma"] = str(args.gamma)
    if getattr(args, "n_speakers", None) is not None:
        overrides["synth.n_speakers"] = str(args.n_speakers)
    if getattr(args, "sample_rate", None) is not None:
        overrides["features.sample_rate"] = str(args.sample_rate)
    if getattr(args, "n_runs", None) is not None:
        overrides["harness.n_runs"] = str(args.n_runs)
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=_overrides_from(args))
        _STAGE_FUNCS[args.stage](cfg)
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"voiceface {args.stage}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
