"""Landmarked 3D facial meshes and anthropometric measurements (AMs).

An AM is a scalar computed from named landmarks of a fixed-topology mesh:
a point-to-point distance (mm), a proportion of two distances, or the angle
at the middle of three landmarks (degrees).  All measurements are intra-face,
hence invariant to rigid motion of the mesh.

Angles are degrees at the API boundary and radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

AM_KINDS = ("distance", "proportion", "angle")

# landmarks per kind: distance(a,b), proportion(a,b,c,d) = |ab|/|cd|, angle(a,b,c) at b
_ARITY = {"distance": 2, "proportion": 4, "angle": 3}

# Degeneracy thresholds: shorter edges or near-collinear arms make the
# measurement (or its gradient) numerically meaningless.
MIN_EDGE_MM = 1e-9
MAX_ABS_COS = 1.0 - 1e-12


class DegenerateMeasurementError(ValueError):
    """Raised when coincident or collinear landmarks make an AM undefined."""


@dataclass(frozen=True)
class Mesh:
    """Fixed-topology facial shape: T vertices, (x, y, z) in millimeters."""

    vertices: np.ndarray
    topology_id: str = "default"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (T, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh contains non-finite coordinates")
        object.__setattr__(self, "vertices", v)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class LandmarkMap:
    """Named landmark -> vertex index."""

    entries: dict[str, int]

    def __post_init__(self):
        clean = {}
        for name, idx in self.entries.items():
            idx = int(idx)
            if idx < 0:
                raise ValueError(f"landmark {name!r} has negative index {idx}")
            clean[str(name)] = idx
        object.__setattr__(self, "entries", clean)

    def index(self, name: str) -> int:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"unknown landmark {name!r}") from None

    def validate_for(self, mesh: Mesh) -> None:
        for name, idx in self.entries.items():
            if idx >= mesh.n_vertices:
                raise ValueError(
                    f"landmark {name!r} index {idx} out of range for T={mesh.n_vertices}"
                )

    def names(self) -> list[str]:
        return list(self.entries)


@dataclass(frozen=True)
class AMDefinition:
    """One measurement: id, kind, and the landmark names it reads."""

    id: str
    kind: str
    landmarks: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in AM_KINDS:
            raise ValueError(f"unknown AM kind {self.kind!r}")
        lm = tuple(str(x) for x in self.landmarks)
        if len(lm) != _ARITY[self.kind]:
            raise ValueError(
                f"{self.kind} AM {self.id!r} needs {_ARITY[self.kind]} landmarks, got {len(lm)}"
            )
        if self.kind == "proportion" and lm[2] == lm[3]:
            raise ValueError(f"proportion AM {self.id!r}: denominator landmarks must differ")
        if self.kind == "angle" and len(set(lm)) != 3:
            raise ValueError(f"angle AM {self.id!r}: landmarks must be pairwise distinct")
        object.__setattr__(self, "landmarks", lm)

    def validate_against(self, landmarks: LandmarkMap) -> None:
        for name in self.landmarks:
            landmarks.index(name)


@dataclass(frozen=True)
class AMVector:
    """K measurement values in the order of a fixed definition list."""

    values: np.ndarray
    am_ids: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != len(self.am_ids):
            raise ValueError(f"expected {len(self.am_ids)} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "am_ids", tuple(self.am_ids))


def _edge(mesh: Mesh, landmarks: LandmarkMap, a: str, b: str, am_id: str):
    """Difference vector and length of landmark edge a-b, degeneracy-checked."""
    pa = mesh.vertices[landmarks.index(a)]
    pb = mesh.vertices[landmarks.index(b)]
    d = pa - pb
    n = float(np.linalg.norm(d))
    if n < MIN_EDGE_MM:
        raise DegenerateMeasurementError(
            f"AM {am_id!r}: landmarks {a!r} and {b!r} coincide (edge {n:.3e} mm)"
        )
    return d, n


def _angle_cos(mesh: Mesh, landmarks: LandmarkMap, definition: AMDefinition):
    a, b, c = definition.landmarks
    u, nu = _edge(mesh, landmarks, a, b, definition.id)
    v, nv = _edge(mesh, landmarks, c, b, definition.id)
    cos = float(np.dot(u, v) / (nu * nv))
    if abs(cos) >= MAX_ABS_COS:
        raise DegenerateMeasurementError(
            f"AM {definition.id!r}: arms are collinear (|cos| = {abs(cos):.17f})"
        )
    return u, nu, v, nv, cos


def compute_am(mesh: Mesh, landmarks: LandmarkMap, definition: AMDefinition) -> float:
    """Evaluate one AM.  Distance in mm, proportion dimensionless, angle in
    degrees within [0, 180].  Degenerate geometry raises, never returns NaN."""
    definition.validate_against(landmarks)
    if definition.kind == "distance":
        a, b = definition.landmarks
        _, n = _edge(mesh, landmarks, a, b, definition.id)
        return n
    if definition.kind == "proportion":
        a, b, c, d = definition.landmarks
        _, num = _edge(mesh, landmarks, a, b, definition.id)
        _, den = _edge(mesh, landmarks, c, d, definition.id)
        return num / den
    u, nu, v, nv, cos = _angle_cos(mesh, landmarks, definition)
    return math.degrees(math.acos(cos))


def compute_am_gradient(
    mesh: Mesh, landmarks: LandmarkMap, definition: AMDefinition
) -> dict[int, np.ndarray]:
    """Analytic gradient of an AM w.r.t. vertex coordinates.

    Returns a sparse map {vertex index: d(AM)/d(x,y,z)}; only the 2-4 involved
    landmark vertices appear.  Contributions accumulate when a vertex serves
    several roles (e.g. shared between numerator and denominator).
    """
    definition.validate_against(landmarks)
    grad: dict[int, np.ndarray] = {}

    def add(name: str, g: np.ndarray) -> None:
        idx = landmarks.index(name)
        grad.setdefault(idx, np.zeros(3))
        grad[idx] += g

    if definition.kind == "distance":
        a, b = definition.landmarks
        d, n = _edge(mesh, landmarks, a, b, definition.id)
        unit = d / n
        add(a, unit)
        add(b, -unit)
    elif definition.kind == "proportion":
        a, b, c, d = definition.landmarks
        dn, num = _edge(mesh, landmarks, a, b, definition.id)
        dd, den = _edge(mesh, landmarks, c, d, definition.id)
        un, ud = dn / num, dd / den
        add(a, un / den)
        add(b, -un / den)
        add(c, -(num / den**2) * ud)
        add(d, (num / den**2) * ud)
    else:
        a, b, c = definition.landmarks
        u, nu, v, nv, cos = _angle_cos(mesh, landmarks, definition)
        # theta = arccos(u.v / |u||v|), converted to degrees
        scale = -math.degrees(1.0) / math.sqrt(1.0 - cos * cos)
        dcos_du = (v / nv - cos * u / nu) / nu
        dcos_dv = (u / nu - cos * v / nv) / nv
        ga = scale * dcos_du
        gc = scale * dcos_dv
        add(a, ga)
        add(c, gc)
        add(b, -(ga + gc))
    return grad


def compute_all_ams(
    mesh: Mesh, landmarks: LandmarkMap, definitions: list[AMDefinition]
) -> AMVector:
    """Evaluate a definition list element-wise; failures carry the AM id."""
    values = np.empty(len(definitions))
    for i, definition in enumerate(definitions):
        values[i] = compute_am(mesh, landmarks, definition)
    return AMVector(values, tuple(d.id for d in definitions))


@dataclass(frozen=True)
class AMNormalization:
    """Per-AM standardization fitted on the training set.

    Uses the population convention (divide by n): this is a dataset-level
    affine map, not an inferential estimate.
    """

    mean: np.ndarray
    std: np.ndarray
    am_ids: tuple[str, ...] = field(default=())

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def fit_normalization(train_ams: list[AMVector] | np.ndarray, am_ids=None) -> AMNormalization:
    """Fit per-AM (mean, std) on training vectors.  Zero-variance AMs raise."""
    if isinstance(train_ams, np.ndarray):
        table = np.asarray(train_ams, dtype=np.float64)
        ids = tuple(am_ids) if am_ids is not None else tuple(f"am{i}" for i in range(table.shape[1]))
    else:
        if not train_ams:
            raise ValueError("need at least 2 training AM vectors")
        ids = train_ams[0].am_ids
        table = np.stack([v.values for v in train_ams])
    if table.shape[0] < 2:
        raise ValueError("need at least 2 training AM vectors")
    mean = table.mean(axis=0)
    std = table.std(axis=0)  # population (ddof=0)
    for k, s in enumerate(std):
        # relative threshold: constant data leaves roundoff-sized std behind
        if s <= 1e-12 * max(1.0, abs(mean[k])):
            raise ValueError(f"AM {ids[k]!r} has zero variance on the training set")
    return AMNormalization(mean=mean, std=std, am_ids=ids)


def canonical_am_definitions() -> list[AMDefinition]:
    """The 24 shipped AM definitions (nose, mouth, cranium, jaw coverage).

    The upstream measurement catalogue this list approximates is not public;
    the shipped set is a documented stand-in, see data/canonical_ams.txt.
    """
    text = resources.files("voiceface").joinpath("data/canonical_ams.txt").read_text()
    return parse_am_definitions(text)


def parse_am_definitions(text: str) -> list[AMDefinition]:
    """Parse 'id kind landmark-names' lines; '#' starts a comment."""
    defs = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"line {lineno}: expected 'id kind landmarks...', got {raw!r}")
        am_id, kind, names = parts[0], parts[1], tuple(parts[2:])
        if am_id in seen:
            raise ValueError(f"line {lineno}: duplicate AM id {am_id!r}")
        seen.add(am_id)
        defs.append(AMDefinition(am_id, kind, names))
    return defs


def format_am_definitions(definitions: list[AMDefinition]) -> str:
    return "".join(f"{d.id} {d.kind} {' '.join(d.landmarks)}\n" for d in definitions)
