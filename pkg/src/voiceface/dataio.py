"""File formats: meshes (OBJ subset and binary), landmark maps, AM definition
lists, AM tables, feature caches, wave blobs, split manifests.

Text formats are line-oriented UTF-8 with '#' comments; writers accept
comment lines so artifacts can embed their config hash and seed.  Binary
formats are magic-tagged little-endian float64 blobs.  All writers are
deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .geometry import AMDefinition, LandmarkMap, Mesh, format_am_definitions, parse_am_definitions

_MESH_MAGIC = b"VFMESH01"
_FEAT_MAGIC = b"VFFEAT01"
_WAVE_MAGIC = b"VFWAVE01"


def _comment_block(comments) -> str:
    return "".join(f"# {c}\n" for c in comments or [])


# ---------------------------------------------------------------------------
# meshes

def write_mesh_obj(path, mesh: Mesh, comments=None) -> None:
    """Minimal OBJ subset: one 'v x y z' line per vertex, fixed order."""
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")


def read_mesh_obj(path, topology_id: str = "default") -> Mesh:
    vertices = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "v" or len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'v x y z', got {raw!r}")
            vertices.append([float(p) for p in parts[1:]])
    if not vertices:
        raise ValueError(f"{path}: no vertices")
    return Mesh(np.array(vertices), topology_id=topology_id)


def write_mesh_binary(path, mesh: Mesh) -> None:
    with open(path, "wb") as fh:
        fh.write(_MESH_MAGIC)
        fh.write(struct.pack("<I", mesh.n_vertices))
        fh.write(mesh.vertices.astype("<f8").tobytes())


def read_mesh_binary(path, topology_id: str = "default") -> Mesh:
    with open(path, "rb") as fh:
        if fh.read(len(_MESH_MAGIC)) != _MESH_MAGIC:
            raise ValueError(f"{path}: not a binary mesh file")
        (t,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(t * 3 * 8), dtype="<f8")
    if data.shape[0] != 3 * t:
        raise ValueError(f"{path}: truncated mesh data")
    return Mesh(data.reshape(t, 3).copy(), topology_id=topology_id)


def write_annotated_mesh(path, mesh: Mesh, scalars, comments=None) -> None:
    """Mesh with one scalar per vertex ('v x y z s' lines), for external
    visualization of error fields."""
    scalars = np.asarray(scalars, dtype=np.float64)
    if scalars.shape != (mesh.n_vertices,):
        raise ValueError("need one scalar per vertex")
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        fh.write("# columns: v x y z scalar\n")
        for (x, y, z), s in zip(mesh.vertices, scalars):
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g} {s:.9g}\n")


# ---------------------------------------------------------------------------
# landmarks and AM definitions

def write_landmarks(path, landmarks: LandmarkMap, comments=None) -> None:
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        for name in sorted(landmarks.entries):
            fh.write(f"{name} {landmarks.entries[name]}\n")


def read_landmarks(path) -> LandmarkMap:
    entries = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'name index', got {raw!r}")
            name, idx = parts
            if name in entries:
                raise ValueError(f"{path}:{lineno}: duplicate landmark {name!r}")
            entries[name] = int(idx)
    return LandmarkMap(entries)


def write_am_definitions(path, definitions: list[AMDefinition], comments=None) -> None:
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        fh.write(format_am_definitions(definitions))


def read_am_definitions(path) -> list[AMDefinition]:
    with open(path) as fh:
        return parse_am_definitions(fh.read())


# ---------------------------------------------------------------------------
# AM tables (CSV with a speaker column plus one column per AM id)

def write_am_table(path, speakers, am_ids, values: np.ndarray, comments=None) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(speakers), len(am_ids)):
        raise ValueError(f"values must be ({len(speakers)}, {len(am_ids)})")
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        fh.write("speaker," + ",".join(am_ids) + "\n")
        for speaker, row in zip(speakers, values):
            fh.write(speaker + "," + ",".join(f"{v:.12g}" for v in row) + "\n")


def read_am_table(path):
    speakers, rows = [], []
    header = None
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if header[0] != "speaker":
                    raise ValueError(f"{path}: first column must be 'speaker'")
                continue
            parts = line.split(",")
            speakers.append(parts[0])
            rows.append([float(p) for p in parts[1:]])
    if header is None:
        raise ValueError(f"{path}: empty AM table")
    return speakers, tuple(header[1:]), np.array(rows)


# ---------------------------------------------------------------------------
# feature caches and waves

def write_feature_cache(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("feature cache expects a (F, n_mels) array")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        fh.write(frames.astype("<f8").tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(_FEAT_MAGIC)) != _FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature cache")
        f, m = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(f * m * 8), dtype="<f8")
    if data.shape[0] != f * m:
        raise ValueError(f"{path}: truncated feature data")
    return data.reshape(f, m).copy()


def write_wave_blob(path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_WAVE_MAGIC)
        fh.write(struct.pack("<I", samples.shape[0]))
        fh.write(samples.astype("<f8").tobytes())


def read_wave_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(_WAVE_MAGIC)) != _WAVE_MAGIC:
            raise ValueError(f"{path}: not a wave blob")
        (n,) = struct.unpack("<I", fh.read(4))
        data = np.frombuffer(fh.read(n * 8), dtype="<f8")
    if data.shape[0] != n:
        raise ValueError(f"{path}: truncated wave data")
    return data.copy()


# ---------------------------------------------------------------------------
# JSON manifests

def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_error_field_csv(path, errors: np.ndarray, comments=None) -> None:
    errors = np.asarray(errors, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(_comment_block(comments))
        fh.write("vertex_index,error_mm\n")
        for i, e in enumerate(errors):
            fh.write(f"{i},{e:.9g}\n")


def read_error_field_csv(path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("vertex_index"):
                continue
            values.append(float(line.split(",")[1]))
    return np.array(values)
