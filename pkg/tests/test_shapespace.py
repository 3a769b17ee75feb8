import numpy as np
import pytest

from voiceface.geometry import Mesh
from voiceface.shapespace import (
    ShapeBasis,
    build_basis,
    flatten,
    load_basis,
    project,
    reconstruct,
    save_basis,
    unflatten,
)

from conftest import random_mesh


def dense_pca_oracle(x, d):
    """Direct covariance eigendecomposition (population convention)."""
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    return mean, evals[order], evecs[:, order]


class TestFlatten:
    def test_round_trip(self, rng):
        m = random_mesh(rng, 7)
        again = unflatten(flatten(m), m.topology_id)
        np.testing.assert_array_equal(again.vertices, m.vertices)

    def test_row_major_convention(self):
        m = Mesh([[1, 2, 3], [4, 5, 6]])
        np.testing.assert_array_equal(flatten(m), [1, 2, 3, 4, 5, 6])

    def test_bad_length(self):
        with pytest.raises(ValueError):
            unflatten(np.zeros(7))


class TestBuildBasis:
    def test_two_sample_closed_form(self, rng):
        m1, m2 = random_mesh(rng, 5), random_mesh(rng, 5, topology_id="test")
        basis = build_basis([m1, m2], d=1)
        diff = flatten(m2) - flatten(m1)
        direction = diff / np.linalg.norm(diff)
        col = basis.projection[:, 0]
        assert abs(abs(col @ direction) - 1.0) < 1e-12
        assert basis.eigenvalues[0] == pytest.approx(np.linalg.norm(diff) ** 2 / 4)

    def test_matches_dense_oracle(self, rng):
        # n=5, T=4: small enough to take the covariance route directly
        meshes = [random_mesh(rng, 4) for _ in range(5)]
        basis = build_basis(meshes, d=4)
        x = np.stack([flatten(m) for m in meshes])
        mean, evals, evecs = dense_pca_oracle(x, 4)
        np.testing.assert_allclose(basis.mean_shape, mean)
        np.testing.assert_allclose(basis.eigenvalues, evals, atol=1e-8)
        for j in range(4):
            dot = abs(basis.projection[:, j] @ evecs[:, j])
            assert dot == pytest.approx(1.0, abs=1e-8)  # up to column sign

    def test_orthonormal_columns(self, rng):
        meshes = [random_mesh(rng, 30) for _ in range(12)]
        basis = build_basis(meshes, d=11)
        gram = basis.projection.T @ basis.projection
        assert np.max(np.abs(gram - np.eye(11))) < 1e-8

    def test_eigenvalues_sorted(self, rng):
        meshes = [random_mesh(rng, 30) for _ in range(12)]
        basis = build_basis(meshes, d=11)
        assert np.all(np.diff(basis.eigenvalues) <= 1e-12)
        assert np.all(basis.eigenvalues >= 0)

    def test_full_rank_round_trip(self, rng):
        meshes = [random_mesh(rng, 20) for _ in range(8)]
        basis = build_basis(meshes, d=7)
        for m in meshes:
            b = flatten(m)
            recon = reconstruct(basis, project(basis, b))
            np.testing.assert_allclose(recon, b, atol=1e-8)

    def test_monotone_truncation_error(self, rng):
        meshes = [random_mesh(rng, 20) for _ in range(10)]
        x = np.stack([flatten(m) for m in meshes])
        errors = []
        for d in range(0, 10):
            basis = build_basis(meshes, d=d)
            recon = np.stack([reconstruct(basis, project(basis, b)) for b in x])
            errors.append(np.linalg.norm(recon - x))
        assert all(e2 <= e1 + 1e-9 for e1, e2 in zip(errors, errors[1:]))

    def test_identical_meshes_rank_zero(self, rng):
        m = random_mesh(rng, 6)
        with pytest.warns(UserWarning, match="rank 0"):
            basis = build_basis([m, Mesh(m.vertices.copy(), m.topology_id)], d=1)
        assert basis.dim == 0

    def test_d_too_large(self, rng):
        meshes = [random_mesh(rng, 5) for _ in range(3)]
        with pytest.raises(ValueError):
            build_basis(meshes, d=3)

    def test_sign_convention_deterministic(self, rng):
        meshes = [random_mesh(rng, 15) for _ in range(6)]
        b1 = build_basis(meshes, d=5)
        b2 = build_basis(list(meshes), d=5)
        np.testing.assert_array_equal(b1.projection, b2.projection)
        for j in range(5):
            col = b1.projection[:, j]
            assert col[np.argmax(np.abs(col))] > 0


class TestProjectReconstruct:
    def test_mean_projects_to_zero(self, rng):
        basis = build_basis([random_mesh(rng, 10) for _ in range(5)], d=4)
        np.testing.assert_allclose(project(basis, basis.mean_shape).beta, 0.0, atol=1e-12)

    def test_zero_reconstructs_mean(self, rng):
        basis = build_basis([random_mesh(rng, 10) for _ in range(5)], d=4)
        np.testing.assert_array_equal(reconstruct(basis, np.zeros(4)), basis.mean_shape)

    def test_project_reconstruct_identity_on_coefficients(self, rng):
        basis = build_basis([random_mesh(rng, 10) for _ in range(6)], d=5)
        beta = rng.normal(size=5)
        again = project(basis, reconstruct(basis, beta)).beta
        np.testing.assert_allclose(again, beta, atol=1e-10)

    def test_dimension_mismatch(self, rng):
        basis = build_basis([random_mesh(rng, 10) for _ in range(5)], d=4)
        with pytest.raises(ValueError):
            project(basis, np.zeros(7))
        with pytest.raises(ValueError):
            reconstruct(basis, np.zeros(5))


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        basis = build_basis([random_mesh(rng, 10) for _ in range(6)], d=5)
        path = tmp_path / "basis.bin"
        save_basis(basis, path)
        again = load_basis(path)
        np.testing.assert_array_equal(again.mean_shape, basis.mean_shape)
        np.testing.assert_array_equal(again.projection, basis.projection)
        np.testing.assert_array_equal(again.eigenvalues, basis.eigenvalues)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTABASIS")
        with pytest.raises(ValueError):
            load_basis(path)

    def test_byte_identical_rewrite(self, rng, tmp_path):
        basis = build_basis([random_mesh(rng, 10) for _ in range(6)], d=5)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_basis(basis, p1)
        save_basis(basis, p2)
        assert p1.read_bytes() == p2.read_bytes()
