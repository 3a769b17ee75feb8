import numpy as np
import pytest

from voiceface.geometry import compute_all_ams
from voiceface.shapespace import build_basis
from voiceface.synthdata import (
    SynthConfig,
    generate,
    ground_truth_manifest,
    phoneme_annotations,
)


def channel_means(recordings, channel):
    return np.array([r.features[:, channel].mean() for r in recordings])


class TestConfig:
    def test_rho_range(self):
        with pytest.raises(ValueError):
            SynthConfig(signal_strength=1.2)

    def test_min_speakers(self):
        with pytest.raises(ValueError):
            SynthConfig(n_speakers=19)

    def test_unknown_planted_am(self):
        with pytest.raises(ValueError, match="not in the definition list"):
            generate(SynthConfig(n_speakers=24, planted_am_ids=("bogus_am",)))


class TestGenerate:
    def test_deterministic(self):
        a = generate(SynthConfig(n_speakers=24, seed=9))
        b = generate(SynthConfig(n_speakers=24, seed=9))
        for s in a.speakers():
            np.testing.assert_array_equal(a.meshes[s].vertices, b.meshes[s].vertices)
            np.testing.assert_array_equal(a.targets[s], b.targets[s])
        for split in a.recordings:
            for ra, rb in zip(a.recordings[split], b.recordings[split]):
                np.testing.assert_array_equal(ra.features, rb.features)
                np.testing.assert_array_equal(ra.wave, rb.wave)

    def test_splits_speaker_disjoint_7111(self):
        ds = generate(SynthConfig(n_speakers=400, seed=1))
        sizes = {k: len(v) for k, v in ds.split_speakers.items()}
        assert sizes == {"train": 280, "v1": 40, "v2": 40, "eval": 40}
        all_speakers = [s for v in ds.split_speakers.values() for s in v]
        assert len(all_speakers) == len(set(all_speakers)) == 400

    def test_meshes_valid_and_measurable(self):
        ds = generate(SynthConfig(n_speakers=24, seed=2))
        t = ds.template.n_vertices
        for s in ds.speakers():
            mesh = ds.meshes[s]
            assert mesh.n_vertices == t
            assert np.all(np.isfinite(mesh.vertices))
            vec = compute_all_ams(mesh, ds.landmarks, ds.am_defs)
            assert np.all(np.isfinite(vec.values))

    def test_exact_affine_at_rho_one(self):
        ds = generate(SynthConfig(n_speakers=60, signal_strength=1.0, seed=4))
        recs = [r for split in ("train", "v1", "v2", "eval") for r in ds.recordings[split]]
        targets = np.stack([ds.targets[r.speaker] for r in recs])
        for am_id, ch in ds.manifest.channels.items():
            k = ds.am_ids.index(am_id)
            corr = np.corrcoef(channel_means(recs, ch), targets[:, k])[0, 1]
            assert abs(corr - 1.0) < 1e-6

    def test_independent_at_rho_zero(self):
        ds = generate(SynthConfig(n_speakers=400, signal_strength=0.0, seed=5))
        recs = [r for split in ("train", "v1", "v2", "eval") for r in ds.recordings[split]]
        targets = np.stack([ds.targets[r.speaker] for r in recs])
        bound = 3.0 / np.sqrt(400)
        for am_id, ch in ds.manifest.channels.items():
            k = ds.am_ids.index(am_id)
            corr = np.corrcoef(channel_means(recs, ch), targets[:, k])[0, 1]
            assert abs(corr) < bound, (am_id, corr)

    def test_unplanted_ams_independent_of_channels(self):
        ds = generate(SynthConfig(n_speakers=400, seed=6))
        recs = ds.recordings["train"]
        targets = np.stack([ds.targets[r.speaker] for r in recs])
        planted = set(ds.manifest.planted)
        bound = 4.5 / np.sqrt(len(recs))  # wide null envelope over many tests
        for ch in list(ds.manifest.channels.values()):
            cm = channel_means(recs, ch)
            for k, am_id in enumerate(ds.am_ids):
                if am_id in planted:
                    continue
                corr = np.corrcoef(cm, targets[:, k])[0, 1]
                assert abs(corr) < bound, (am_id, ch, corr)

    def test_ols_probe_r2(self):
        ds = generate(SynthConfig(n_speakers=200, signal_strength=0.8, seed=7))
        recs = ds.recordings["train"]
        targets = np.stack([ds.targets[r.speaker] for r in recs])
        for am_id, ch in ds.manifest.channels.items():
            k = ds.am_ids.index(am_id)
            x = channel_means(recs, ch)
            a = np.stack([x, np.ones_like(x)], axis=1)
            coef, *_ = np.linalg.lstsq(a, targets[:, k], rcond=None)
            resid = targets[:, k] - a @ coef
            r2 = 1.0 - resid.var() / targets[:, k].var()
            assert r2 >= 0.5, (am_id, r2)

    def test_basis_spans_true_fields(self):
        ds = generate(SynthConfig(n_speakers=40, seed=8, mesh_noise=0.0))
        train = [ds.meshes[s] for s in ds.split_speakers["train"]]
        basis = build_basis(train, d=ds.config.latent_dim)
        q_true, _ = np.linalg.qr(ds.fields.T)
        sv = np.linalg.svd(q_true.T @ basis.projection, compute_uv=False)
        angles = np.arccos(np.clip(sv, -1.0, 1.0))
        assert angles.max() < 1e-3

    def test_normalized_targets(self):
        ds = generate(SynthConfig(n_speakers=60, seed=10))
        train_targets = np.stack([ds.targets[s] for s in ds.split_speakers["train"]])
        assert np.all(np.abs(train_targets.mean(axis=0)) < 1e-10)
        np.testing.assert_allclose(train_targets.std(axis=0), 1.0, atol=1e-10)

    def test_estimator_dataset_roundtrip(self):
        ds = generate(SynthConfig(n_speakers=24, seed=11))
        est = ds.estimator_dataset()
        assert est.am_ids == ds.am_ids
        assert len(est.split("train")) == len(ds.split_speakers["train"]) * 2
        assert len(est.split("v2")) == len(ds.split_speakers["v2"])
        for rec in est.split("train"):
            assert rec.wave is not None and rec.wave.shape[0] >= 256


class TestManifest:
    def test_lists_planted_exactly(self):
        cfg = SynthConfig(n_speakers=24, planted_am_ids=("nose_width", "mouth_width"))
        manifest = ground_truth_manifest(generate(cfg))
        assert manifest.planted == ("nose_width", "mouth_width")
        assert manifest.is_planted("nose_width")
        assert not manifest.is_planted("jaw_width")

    def test_empty_plant_list(self):
        manifest = ground_truth_manifest(generate(SynthConfig(n_speakers=24, planted_am_ids=())))
        assert manifest.planted == ()
        assert manifest.channels == {}

    def test_subset_of_definition_list(self):
        ds = generate(SynthConfig(n_speakers=24))
        assert set(ds.manifest.planted) <= set(ds.am_ids)


class TestAnnotations:
    def test_deterministic_spans(self):
        ds = generate(SynthConfig(n_speakers=24, seed=12))
        ann = phoneme_annotations(ds, labels=("aa", "iy"), span_frames=20)
        rec = ds.recordings["train"][0]
        spans = ann[rec.recording_id]
        assert spans[0] == (0, 20, "aa")
        assert spans[1] == (20, 40, "iy")
        assert all(end <= rec.features.shape[0] for _, end, _ in spans)
