"""Low-dimensional eigenface shape space.

Training meshes are flattened row-major per vertex (x, y, z contiguous) into
3T vectors.  Because the flattened dimension vastly exceeds the number of
training samples, the basis is built with the Gram-matrix trick: the n x n
inner-product matrix of centered samples is eigendecomposed and its
eigenvectors lifted back to 3T-space.  The 3T x 3T covariance is never formed.

Eigenvalues follow the population convention (divide by n), matching the
normalization in :mod:`voiceface.geometry`.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Mesh

# eigenvalues below this fraction of the largest count as numerical rank loss
_RANK_RTOL = 1e-10

_BASIS_MAGIC = b"VFBASIS1"


@dataclass(frozen=True)
class ShapeBasis:
    """mean shape, orthonormal projection matrix P (3T x d), eigenvalues."""

    mean_shape: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray
    topology_id: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", np.asarray(self.mean_shape, dtype=np.float64))
        object.__setattr__(self, "projection", np.asarray(self.projection, dtype=np.float64))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))
        if self.projection.shape != (self.mean_shape.shape[0], self.eigenvalues.shape[0]):
            raise ValueError("projection shape inconsistent with mean/eigenvalues")

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3


@dataclass(frozen=True)
class ShapeCoefficients:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if not np.all(np.isfinite(b)):
            raise ValueError("non-finite shape coefficients")
        object.__setattr__(self, "beta", b)


def flatten(mesh: Mesh) -> np.ndarray:
    """Mesh (T, 3) -> 3T vector, row-major per vertex."""
    return mesh.vertices.reshape(-1).copy()


def unflatten(vector: np.ndarray, topology_id: str = "default") -> Mesh:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] % 3 != 0:
        raise ValueError(f"flattened shape length {vector.shape} is not a multiple of 3")
    return Mesh(vector.reshape(-1, 3), topology_id=topology_id)


def build_basis(meshes: list[Mesh], d: int) -> ShapeBasis:
    """PCA basis of centered flattened shapes via the Gram-matrix trick.

    Requires d <= n - 1.  If the data's numerical rank is below d, the basis
    is truncated to the rank with a warning.  Column signs are fixed so each
    column's largest-magnitude entry is positive.
    """
    n = len(meshes)
    if n < 2:
        raise ValueError("need at least 2 training meshes")
    if d > n - 1:
        raise ValueError(f"d={d} exceeds n-1={n - 1}")
    if d < 0:
        raise ValueError("d must be nonnegative")
    topology_id = meshes[0].topology_id
    t = meshes[0].n_vertices
    for m in meshes:
        if m.n_vertices != t or m.topology_id != topology_id:
            raise ValueError("meshes disagree on vertex count or topology")

    x = np.stack([flatten(m) for m in meshes])  # (n, 3T)
    mean = x.mean(axis=0)
    xc = x - mean

    gram = (xc @ xc.T) / n  # (n, n); shares nonzero eigenvalues with the covariance
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    rank = int(np.sum(evals > _RANK_RTOL * max(evals[0], 1e-30)))
    rank = min(rank, n - 1)
    if rank < d:
        warnings.warn(
            f"training shapes have numerical rank {rank} < requested d={d}; reducing",
            stacklevel=2,
        )
        d = rank

    evals = evals[:d]
    # lift Gram eigenvectors u to 3T-space: v = Xc^T u, then normalize
    p = xc.T @ evecs[:, :d]
    if d > 0:
        p /= np.linalg.norm(p, axis=0)
        # sign convention: largest-|entry| of each column made positive
        flips = np.sign(p[np.argmax(np.abs(p), axis=0), np.arange(d)])
        p *= flips
    return ShapeBasis(mean, p, evals, topology_id=topology_id)


def project(basis: ShapeBasis, flattened: np.ndarray) -> ShapeCoefficients:
    flattened = np.asarray(flattened, dtype=np.float64)
    if flattened.shape != basis.mean_shape.shape:
        raise ValueError(
            f"flattened shape length {flattened.shape} != basis length {basis.mean_shape.shape}"
        )
    return ShapeCoefficients(basis.projection.T @ (flattened - basis.mean_shape))


def reconstruct(basis: ShapeBasis, beta) -> np.ndarray:
    if isinstance(beta, ShapeCoefficients):
        beta = beta.beta
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (basis.dim,):
        raise ValueError(f"beta shape {beta.shape} != (d={basis.dim},)")
    return basis.mean_shape + basis.projection @ beta


def save_basis(basis: ShapeBasis, path) -> None:
    """Binary layout: magic, T, d, mean, eigenvalues, P column-major, all
    little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_BASIS_MAGIC)
        fh.write(struct.pack("<II", basis.n_vertices, basis.dim))
        fh.write(basis.mean_shape.astype("<f8").tobytes())
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.asfortranarray(basis.projection).astype("<f8").tobytes(order="F"))


def load_basis(path, topology_id: str = "default") -> ShapeBasis:
    with open(path, "rb") as fh:
        magic = fh.read(len(_BASIS_MAGIC))
        if magic != _BASIS_MAGIC:
            raise ValueError(f"{path}: not a shape-basis file")
        t, d = struct.unpack("<II", fh.read(8))
        mean = np.frombuffer(fh.read(3 * t * 8), dtype="<f8")
        evals = np.frombuffer(fh.read(d * 8), dtype="<f8")
        p = np.frombuffer(fh.read(3 * t * d * 8), dtype="<f8").reshape((3 * t, d), order="F")
    return ShapeBasis(mean.copy(), p.copy(), evals.copy(), topology_id=topology_id)
