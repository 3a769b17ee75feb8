"""Synthetic paired datasets (meshes + voice-like features + measurements)
with planted, controllable voice<->AM correlations.

Faces come from a known low-rank generative model: a fixed template plus a
linear combination of smooth deformation fields, one independent standard
normal latent per field.  The fields are built from the analytic AM
gradients and mixed so that, to first order, latent j moves measurement j
and nothing else; measurements are then computed exactly on the deformed
mesh with the geometry module.  Because every measurement rides its own
latent, unplanted measurements are independent of everything written into
the features.

Features mimic normalized log-mel arrays (F x 64).  For each planted AM the
designated channel carries rho * z + (1 - rho) * q * noise, where z is the
standardized measurement, so rho = 1 is an exact affine encoding and rho = 0
is pure noise.  The per-recording quality factor q also scales the noise and
is written (as ln q) into a reserved channel, giving the variance heads an
honest uncertainty signal.  Waveforms are 256-periodic speaker templates
whose harmonic amplitudes are the planted latents, so the phonatory
constraint rewards encoding exactly the identity-bearing information.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .estimator import EstimatorDataset, Recording
from .features import MelNormalization
from .geometry import (
    AMNormalization,
    LandmarkMap,
    Mesh,
    canonical_am_definitions,
    compute_all_ams,
    compute_am_gradient,
    fit_normalization,
)

N_MELS = 64
QUALITY_CHANNEL = 60
PLANT_CHANNEL_BASE = 8
PLANT_CHANNEL_STEP = 2
WAVE_PERIOD = 256

# landmark layout of the synthetic face template (mm; x right, y up, z forward)
_MIDLINE_POSITIONS = {
    "g": (0.0, 62.0, 80.0),
    "se": (0.0, 50.0, 86.0),
    "n": (0.0, 40.0, 95.0),
    "prn": (0.0, 20.0, 110.0),
    "sn": (0.0, 8.0, 95.0),
    "ls": (0.0, -8.0, 95.0),
    "sto": (0.0, -16.0, 93.0),
    "li": (0.0, -24.0, 92.0),
    "sl": (0.0, -34.0, 90.0),
    "pg": (0.0, -45.0, 88.0),
    "gn": (0.0, -60.0, 80.0),
    "tr": (0.0, 85.0, 70.0),
    "v": (0.0, 95.0, 10.0),
    "op": (0.0, 55.0, -70.0),
}
_BILATERAL_POSITIONS = {  # right side listed; left mirrors x
    "al": (16.0, 15.0, 90.0),
    "sbal": (10.0, 9.0, 92.0),
    "ch": (26.0, -15.0, 85.0),
    "zy": (65.0, 15.0, 40.0),
    "go": (50.0, -40.0, 30.0),
    "eu": (72.0, 60.0, 10.0),
    "ft": (52.0, 70.0, 45.0),
    "en": (17.0, 42.0, 85.0),
    "ex": (44.0, 42.0, 70.0),
    "or": (30.0, 34.0, 75.0),
    "sci": (30.0, 52.0, 76.0),
    "mf": (11.0, 47.0, 86.0),
    "t": (62.0, 5.0, -5.0),
    "sa": (60.0, 28.0, -12.0),
    "sba": (62.0, -12.0, -10.0),
    "pra": (58.0, 8.0, 6.0),
    "pa": (66.0, 6.0, -28.0),
    "obs": (58.0, 20.0, -8.0),
    "obi": (60.0, -8.0, -2.0),
}
_LANDMARK_POSITIONS = dict(_MIDLINE_POSITIONS)
for _name, (_x, _y, _z) in _BILATERAL_POSITIONS.items():
    _LANDMARK_POSITIONS[f"{_name}_r"] = (_x, _y, _z)
    _LANDMARK_POSITIONS[f"{_name}_l"] = (-_x, _y, _z)

# per-kind latent scale: one unit of latent moves the measurement this much
_AM_SCALE = {"distance": 2.0, "proportion": 0.02, "angle": 1.5}

_FIELD_SIGMA_MM = 6.0  # spatial falloff of the deformation bumps


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 400
    n_vertices: int = 500
    latent_dim: int = 24
    planted_am_ids: tuple[str, ...] = ("nose_width", "mouth_width", "nose_height", "jaw_width")
    signal_strength: float = 0.9      # rho; scalar applied to every planted AM
    quality_range: tuple[float, float] = (0.5, 2.0)
    noise_rec: float = 1.0            # per-recording noise on planted channels
    noise_frame: float = 1.0          # per-frame noise on planted channels
    mesh_noise: float = 0.0           # iid vertex jitter; 0 keeps faces exactly low-rank
    n_frames: int = 60
    frame_hop: float = 0.25           # seconds; 6-8 s training segments = 24-32 frames
    recordings_per_train_speaker: int = 2
    wave_periods: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength (rho) must lie in [0, 1]")
        if self.n_speakers < 20:
            raise ValueError("need at least 20 speakers for non-degenerate 7/1/1/1 splits")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


@dataclass(frozen=True)
class PlantManifest:
    """Exact record of which AMs were planted, for harness scoring."""

    planted: tuple[str, ...]
    signal_strength: dict[str, float]
    channels: dict[str, int]

    def is_planted(self, am_id: str) -> bool:
        return am_id in self.planted


@dataclass
class SynthDataset:
    config: SynthConfig
    am_ids: tuple[str, ...]
    am_defs: list
    landmarks: LandmarkMap
    template: Mesh
    fields: np.ndarray                      # (latent_dim, 3T) deformation fields
    latents: dict[str, np.ndarray]          # speaker -> (latent_dim,)
    meshes: dict[str, Mesh]
    raw_ams: dict[str, np.ndarray]          # measurement units
    am_norm: AMNormalization
    feature_norm: MelNormalization
    targets: dict[str, np.ndarray]          # normalized
    split_speakers: dict[str, list[str]]
    recordings: dict[str, list[Recording]]  # normalized features
    raw_features_by_recording: dict[str, np.ndarray] = field(default_factory=dict)
    waves_by_recording: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: PlantManifest = field(default=None)

    def estimator_dataset(self) -> EstimatorDataset:
        return EstimatorDataset(self.am_ids, self.targets, self.recordings)

    def speakers(self) -> list[str]:
        return sorted(self.meshes)


def _rng(seed: int, *tags) -> np.random.Generator:
    """Counter-based stream: stable across runs and generation order."""
    words = tuple(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence((seed, 77) + words))


def _build_template(config: SynthConfig):
    """Landmarks on the first vertices, the rest on a head-like ellipsoid."""
    names = sorted(_LANDMARK_POSITIONS)
    t = config.n_vertices
    if t < len(names) + 8:
        raise ValueError(f"n_vertices must be at least {len(names) + 8}")
    rng = _rng(config.seed, "template")
    vertices = np.empty((t, 3))
    for i, name in enumerate(names):
        vertices[i] = _LANDMARK_POSITIONS[name]
    n_rest = t - len(names)
    theta = rng.uniform(0.0, np.pi, size=n_rest)          # polar from +y
    phi = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size=n_rest)  # frontal hemisphere
    a, b, c = 75.0, 95.0, 85.0
    vertices[len(names):, 0] = a * np.sin(theta) * np.sin(phi)
    vertices[len(names):, 1] = b * np.cos(theta)
    vertices[len(names):, 2] = c * np.sin(theta) * np.cos(phi)
    landmarks = LandmarkMap({name: i for i, name in enumerate(names)})
    return Mesh(vertices, topology_id=f"synth-T{t}"), landmarks


def _gradient_vector(mesh, landmarks, definition, n_vertices) -> np.ndarray:
    g = np.zeros(3 * n_vertices)
    for idx, vec in compute_am_gradient(mesh, landmarks, definition).items():
        g[3 * idx : 3 * idx + 3] = vec
    return g


def _build_fields(config: SynthConfig, template: Mesh, landmarks: LandmarkMap, am_defs):
    """Smooth deformation fields with an exactly diagonal first-order response:
    field k moves measurement k by its per-kind scale and no other measurement.

    Fields live in the span of Gaussian-bump atoms (one per landmark per
    axis); the minimum-norm atom combination satisfying the 24 response
    constraints keeps deformations small, so the nonlinear cross-talk of the
    actual measurements stays negligible."""
    t = template.n_vertices
    k = len(am_defs)
    if config.latent_dim < k:
        raise ValueError(f"latent_dim ({config.latent_dim}) must be >= number of AMs ({k})")
    grads = np.stack([_gradient_vector(template, landmarks, d, t) for d in am_defs])  # (K, 3T)
    verts = template.vertices

    # smooth atoms: bump at each landmark along each axis
    lm_indices = sorted(set(landmarks.entries.values()))
    atoms = np.zeros((3 * len(lm_indices), 3 * t))
    for a, idx in enumerate(lm_indices):
        w = np.exp(-np.sum((verts - verts[idx]) ** 2, axis=1) / (2.0 * _FIELD_SIGMA_MM**2))
        for axis in range(3):
            disp = np.zeros((t, 3))
            disp[:, axis] = w
            atoms[3 * a + axis] = disp.reshape(-1)

    scales = np.array([_AM_SCALE[d.kind] for d in am_defs])
    response = grads @ atoms.T                      # (K, n_atoms)
    gram = response @ response.T                    # (K, K)
    coeff = response.T @ np.linalg.solve(gram, np.diag(scales))
    fields = (atoms.T @ coeff).T                    # (K, 3T); grads @ fields.T = diag(scales)

    if config.latent_dim > k:
        rng = _rng(config.seed, "nuisance")
        extra = np.zeros((config.latent_dim - k, 3 * t))
        for j in range(extra.shape[0]):
            centers = verts[rng.integers(0, t, size=3)]
            for center in centers:
                w = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2.0 * _FIELD_SIGMA_MM**2))
                extra[j] += (w[:, None] * rng.normal(size=3)[None, :]).reshape(-1)
            # project out first-order measurement response
            extra[j] -= fields.T @ (grads @ extra[j] / scales)
            extra[j] *= 2.0 / np.linalg.norm(extra[j])
        fields = np.vstack([fields, extra])
    return fields


def _split_speakers(config: SynthConfig, speakers: list[str]) -> dict[str, list[str]]:
    rng = _rng(config.seed, "splits")
    order = list(speakers)
    rng.shuffle(order)
    n = len(order)
    n_holdout = n // 10
    v1 = order[:n_holdout]
    v2 = order[n_holdout : 2 * n_holdout]
    ev = order[2 * n_holdout : 3 * n_holdout]
    tr = order[3 * n_holdout :]
    return {"train": sorted(tr), "v1": sorted(v1), "v2": sorted(v2), "eval": sorted(ev)}


def _speaker_wave_template(latent: np.ndarray, planted_latent_idx: list[int]) -> np.ndarray:
    """256-sample periodic template whose harmonics carry the planted latents."""
    t = np.arange(WAVE_PERIOD) / WAVE_PERIOD
    wave = np.sin(2.0 * np.pi * t)
    use = planted_latent_idx if planted_latent_idx else list(range(min(4, latent.shape[0])))
    for h, idx in enumerate(use[:8]):
        wave = wave + 0.6 * latent[idx] * np.sin(2.0 * np.pi * (h + 2) * t)
    return wave


def generate(config: SynthConfig) -> SynthDataset:
    """Deterministic given config.seed; per-speaker streams are counter-based,
    so generation order never matters."""
    am_defs = canonical_am_definitions()
    am_ids = tuple(d.id for d in am_defs)
    for am_id in config.planted_am_ids:
        if am_id not in am_ids:
            raise ValueError(f"planted AM {am_id!r} is not in the definition list")

    template, landmarks = _build_template(config)
    fields = _build_fields(config, template, landmarks, am_defs)
    t = template.n_vertices
    flat_template = template.vertices.reshape(-1)

    planted_idx = {am_id: am_ids.index(am_id) for am_id in config.planted_am_ids}
    channels = {
        am_id: PLANT_CHANNEL_BASE + PLANT_CHANNEL_STEP * i
        for i, am_id in enumerate(config.planted_am_ids)
    }
    template_ams = compute_all_ams(template, landmarks, am_defs).values
    scales = np.array([_AM_SCALE[d.kind] for d in am_defs])

    speakers = [f"spk{i:04d}" for i in range(config.n_speakers)]
    split_speakers = _split_speakers(config, speakers)
    split_of = {s: name for name, members in split_speakers.items() for s in members}

    latents: dict[str, np.ndarray] = {}
    meshes: dict[str, Mesh] = {}
    raw_ams: dict[str, np.ndarray] = {}
    raw_features: dict[str, list[np.ndarray]] = {}
    waves: dict[str, list[np.ndarray]] = {}
    qualities: dict[str, list[float]] = {}

    rho = config.signal_strength
    planted_latents = [planted_idx[a] for a in config.planted_am_ids]

    for i, speaker in enumerate(speakers):
        rng = _rng(config.seed, "speaker", i)
        u = rng.standard_normal(config.latent_dim)
        flat = flat_template + u @ fields
        if config.mesh_noise > 0.0:
            flat = flat + config.mesh_noise * rng.standard_normal(flat.shape)
        mesh = Mesh(flat.reshape(t, 3), topology_id=template.topology_id)
        measured = compute_all_ams(mesh, landmarks, am_defs).values
        z = (measured - template_ams) / scales  # standardized measurements

        n_recs = config.recordings_per_train_speaker if split_of[speaker] == "train" else 1
        feats_list, wave_list, q_list = [], [], []
        log_lo, log_hi = np.log(config.quality_range[0]), np.log(config.quality_range[1])
        wave_template = _speaker_wave_template(u, planted_latents)
        for r in range(n_recs):
            q = float(np.exp(rng.uniform(log_lo, log_hi)))
            feats = rng.standard_normal((config.n_frames, N_MELS))
            for am_id, ch in channels.items():
                k = planted_idx[am_id]
                rec_noise = config.noise_rec * rng.standard_normal()
                frame_noise = config.noise_frame * rng.standard_normal(config.n_frames)
                feats[:, ch] = rho * z[k] + (1.0 - rho) * q * (rec_noise + frame_noise)
            feats[:, QUALITY_CHANNEL] = np.log(q) + 0.05 * rng.standard_normal(config.n_frames)
            wave = np.tile(wave_template, config.wave_periods)
            wave = wave + 0.05 * rng.standard_normal(wave.shape)
            wave = (wave - wave.mean()) / wave.std()
            feats_list.append(feats)
            wave_list.append(wave)
            q_list.append(q)

        latents[speaker] = u
        meshes[speaker] = mesh
        raw_ams[speaker] = measured
        raw_features[speaker] = feats_list
        waves[speaker] = wave_list
        qualities[speaker] = q_list

    train_speakers = split_speakers["train"]
    am_norm = fit_normalization(np.stack([raw_ams[s] for s in train_speakers]), am_ids)
    targets = {s: am_norm.apply(raw_ams[s]) for s in speakers}
    feature_norm = _fit_feature_norm(raw_features, train_speakers)

    recordings = {
        name: [
            Recording(
                s,
                f"{s}_r{r}",
                feature_norm.apply(raw_features[s][r]),
                wave=waves[s][r],
            )
            for s in members
            for r in range(len(raw_features[s]))
        ]
        for name, members in split_speakers.items()
    }
    raw_by_rid = {
        f"{s}_r{r}": raw_features[s][r] for s in speakers for r in range(len(raw_features[s]))
    }
    waves_by_rid = {
        f"{s}_r{r}": waves[s][r] for s in speakers for r in range(len(waves[s]))
    }

    manifest = PlantManifest(
        planted=tuple(config.planted_am_ids),
        signal_strength={a: rho for a in config.planted_am_ids},
        channels=dict(channels),
    )
    return SynthDataset(
        config=config,
        am_ids=am_ids,
        am_defs=am_defs,
        landmarks=landmarks,
        template=template,
        fields=fields,
        latents=latents,
        meshes=meshes,
        raw_ams=raw_ams,
        am_norm=am_norm,
        feature_norm=feature_norm,
        targets=targets,
        split_speakers=split_speakers,
        recordings=recordings,
        raw_features_by_recording=raw_by_rid,
        waves_by_recording=waves_by_rid,
        manifest=manifest,
    )


def _fit_feature_norm(raw_features, train_speakers) -> MelNormalization:
    pooled_mean = np.zeros(N_MELS)
    pooled_sq = np.zeros(N_MELS)
    count = 0
    for s in train_speakers:
        for feats in raw_features[s]:
            pooled_mean += feats.sum(axis=0)
            pooled_sq += (feats**2).sum(axis=0)
            count += feats.shape[0]
    mean = pooled_mean / count
    var = pooled_sq / count - mean**2
    return MelNormalization(mean, np.sqrt(np.maximum(var, 1e-12)))


def ground_truth_manifest(dataset: SynthDataset) -> PlantManifest:
    return dataset.manifest


def phoneme_annotations(dataset: SynthDataset, labels=("aa", "iy", "b"), span_frames: int = 20):
    """Deterministic per-recording phoneme spans (annotations are inputs in
    the real pipeline; this stands in for them)."""
    out = {}
    for recs in dataset.recordings.values():
        for rec in recs:
            f = rec.features.shape[0]
            spans = []
            start = 0
            i = 0
            while start + span_frames <= f:
                spans.append((start, start + span_frames, labels[i % len(labels)]))
                start += span_frames
                i += 1
            out[rec.recording_id] = spans
    return out
