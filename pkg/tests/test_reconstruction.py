import numpy as np
import pytest

from voiceface.geometry import Mesh, compute_all_ams
from voiceface.reconstruction import (
    FitResult,
    ReconstructionProblem,
    apply_confidence_weighting,
    filtered_error_maps,
    fit,
    per_vertex_error,
    residuals_and_jacobian,
    select_top_ams,
)
from voiceface.shapespace import build_basis, reconstruct
from voiceface.stats import build_report
from voiceface.synthdata import SynthConfig, generate


@pytest.fixture(scope="module")
def synth():
    return generate(SynthConfig(n_speakers=40, seed=21))


@pytest.fixture(scope="module")
def basis(synth):
    train = [synth.meshes[s] for s in synth.split_speakers["train"]]
    return build_basis(train, d=24)


def make_problem(synth, basis, targets, weights, lam=1e-3, **kw):
    return ReconstructionProblem(
        basis, synth.landmarks, synth.am_defs, targets, weights, lam=lam, **kw
    )


class TestFit:
    def test_zero_weights_returns_mean_face(self, synth, basis):
        problem = make_problem(synth, basis, np.zeros(24), np.zeros(24), lam=1.0)
        result = fit(problem)
        np.testing.assert_array_equal(result.beta, 0.0)
        np.testing.assert_array_equal(result.mesh.vertices.reshape(-1), basis.mean_shape)
        assert result.converged

    def test_recovers_in_span_targets(self, synth, basis, rng):
        beta_true = rng.standard_normal(24) * np.sqrt(basis.eigenvalues)
        mesh_true = Mesh(reconstruct(basis, beta_true).reshape(-1, 3), basis.topology_id)
        targets = compute_all_ams(mesh_true, synth.landmarks, synth.am_defs).values
        problem = make_problem(synth, basis, targets, np.ones(24), lam=1e-8)
        result = fit(problem)
        fitted = compute_all_ams(result.mesh, synth.landmarks, synth.am_defs).values
        assert np.max(np.abs(fitted - targets)) < 1e-4
        assert result.converged

    def test_objective_trace_non_increasing(self, synth, basis, rng):
        targets = compute_all_ams(
            Mesh(reconstruct(basis, rng.standard_normal(24)).reshape(-1, 3), basis.topology_id),
            synth.landmarks,
            synth.am_defs,
        ).values
        result = fit(make_problem(synth, basis, targets, np.ones(24)))
        assert np.all(np.diff(result.objective_trace) <= 0.0)
        assert result.objective_trace[-1] <= result.objective_trace[0]

    def test_regularization_dominance(self, synth, basis, rng):
        beta_true = rng.standard_normal(24) * np.sqrt(basis.eigenvalues)
        mesh_true = Mesh(reconstruct(basis, beta_true).reshape(-1, 3), basis.topology_id)
        targets = compute_all_ams(mesh_true, synth.landmarks, synth.am_defs).values
        norms = []
        for lam in (1e-2, 1.0, 1e2):
            result = fit(make_problem(synth, basis, targets, np.ones(24), lam=lam))
            norms.append(np.linalg.norm(result.beta))
        assert norms[0] > norms[1] > norms[2]

    def test_one_hot_distance_hits_target(self, synth, basis):
        k = synth.am_ids.index("nose_width")
        template_ams = compute_all_ams(
            Mesh(basis.mean_shape.reshape(-1, 3), basis.topology_id),
            synth.landmarks,
            synth.am_defs,
        ).values
        targets = template_ams.copy()
        targets[k] += 1.5  # reachable: every AM direction is in the field span
        weights = np.zeros(24)
        weights[k] = 1.0
        result = fit(make_problem(synth, basis, targets, weights, lam=0.0))
        fitted = compute_all_ams(result.mesh, synth.landmarks, synth.am_defs).values
        assert abs(fitted[k] - targets[k]) < 1e-6

    def test_deterministic(self, synth, basis, rng):
        targets = compute_all_ams(
            Mesh(reconstruct(basis, rng.standard_normal(24)).reshape(-1, 3), basis.topology_id),
            synth.landmarks,
            synth.am_defs,
        ).values
        problem = make_problem(synth, basis, targets, np.ones(24))
        a, b = fit(problem), fit(problem)
        np.testing.assert_array_equal(a.beta, b.beta)
        np.testing.assert_array_equal(a.objective_trace, b.objective_trace)

    def test_iteration_cap(self, synth, basis, rng):
        targets = compute_all_ams(
            Mesh(reconstruct(basis, 3 * rng.standard_normal(24)).reshape(-1, 3), basis.topology_id),
            synth.landmarks,
            synth.am_defs,
        ).values
        result = fit(make_problem(synth, basis, targets, np.ones(24), max_iterations=2))
        assert result.n_iterations <= 2
        assert isinstance(result, FitResult)

    def test_validation(self, synth, basis):
        with pytest.raises(ValueError):
            make_problem(synth, basis, np.zeros(24), -np.ones(24))
        with pytest.raises(ValueError):
            make_problem(synth, basis, np.zeros(24), np.ones(24), lam=-1.0)
        with pytest.raises(ValueError):
            make_problem(synth, basis, np.zeros(5), np.ones(24))


class TestJacobian:
    def test_matches_finite_differences(self, synth, basis, rng):
        targets = compute_all_ams(
            Mesh(basis.mean_shape.reshape(-1, 3), basis.topology_id),
            synth.landmarks,
            synth.am_defs,
        ).values
        problem = make_problem(synth, basis, targets, np.ones(24), lam=0.37)
        for _ in range(5):
            gamma = 0.3 * rng.standard_normal(24)
            res, jac = residuals_and_jacobian(problem, gamma)
            step = 1e-6
            for j in rng.integers(0, 24, size=6):
                gp, gm = gamma.copy(), gamma.copy()
                gp[j] += step
                gm[j] -= step
                rp, _ = residuals_and_jacobian(problem, gp, with_jacobian=False)
                rm, _ = residuals_and_jacobian(problem, gm, with_jacobian=False)
                fd = (rp - rm) / (2 * step)
                denom = max(np.linalg.norm(fd), 1e-10)
                assert np.linalg.norm(jac[:, j] - fd) / denom < 1e-5


class TestPerVertexError:
    def test_identical_zero(self, rng):
        m = Mesh(rng.standard_normal((10, 3)))
        np.testing.assert_array_equal(per_vertex_error(m, m), np.zeros(10))

    def test_translation(self, rng):
        m = Mesh(rng.standard_normal((10, 3)))
        shifted = Mesh(m.vertices + np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(per_vertex_error(shifted, m), 1.0)

    def test_matches_bruteforce_mean(self, rng):
        a = Mesh(rng.standard_normal((25, 3)))
        b = Mesh(rng.standard_normal((25, 3)))
        errors = per_vertex_error(a, b)
        brute = np.array([
            np.sqrt(sum((a.vertices[i, c] - b.vertices[i, c]) ** 2 for c in range(3)))
            for i in range(25)
        ])
        assert errors.mean() == pytest.approx(brute.mean())

    def test_topology_mismatch(self, rng):
        with pytest.raises(ValueError):
            per_vertex_error(Mesh(rng.standard_normal((5, 3))), Mesh(rng.standard_normal((6, 3))))


class TestFilteredErrorMaps:
    def test_full_level_is_plain_mean(self, rng):
        fields = rng.uniform(0, 2, size=(8, 30))
        unc = rng.uniform(0.5, 2.0, size=8)
        maps = filtered_error_maps(fields, unc, levels=(1.0,))
        np.testing.assert_allclose(maps[1.0], fields.mean(axis=0))

    def test_equal_uncertainties_stable_prefix(self, rng):
        fields = rng.uniform(0, 2, size=(8, 30))
        unc = np.ones(8)
        maps = filtered_error_maps(fields, unc, levels=(0.5,))
        np.testing.assert_allclose(maps[0.5], fields[:4].mean(axis=0))

    def test_filtering_keeps_lowest(self, rng):
        fields = np.stack([np.full(30, float(i)) for i in range(4)])
        unc = np.array([3.0, 1.0, 2.0, 4.0])
        maps = filtered_error_maps(fields, unc, levels=(0.5,))
        np.testing.assert_allclose(maps[0.5], (fields[1] + fields[2]) / 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            filtered_error_maps(np.empty((0, 5)), np.empty(0))


class TestSelection:
    def _report(self, ci_by_am):
        am_ids = tuple(sorted(ci_by_am))
        ratios = {1.0: np.stack([np.full(4, ci_by_am[a]) for a in am_ids], axis=1)}
        return build_report(ratios, am_ids, alpha=0.05)

    def test_top_count_by_one_minus_ci(self):
        cis = {f"am{i:02d}": 0.5 + 0.02 * i for i in range(12)}
        report = self._report(cis)
        weights, chosen = select_top_ams(report, count=10)
        assert len(chosen) == 10
        assert "am10" not in chosen and "am11" not in chosen
        assert weights.sum() == 10

    def test_exactly_count_predictable(self):
        cis = {f"am{i:02d}": 0.8 for i in range(10)}
        cis.update({f"bad{i}": 1.2 for i in range(4)})
        report = self._report(cis)
        weights, chosen = select_top_ams(report, count=10)
        assert sorted(chosen) == [f"am{i:02d}" for i in range(10)]

    def test_fewer_than_count_warns(self):
        cis = {"a": 0.9, "b": 0.8, "c": 1.4}
        report = self._report(cis)
        with pytest.warns(UserWarning, match="only 2 predictable"):
            weights, chosen = select_top_ams(report, count=10)
        assert sorted(chosen) == ["a", "b"]

    def test_confidence_weighting(self):
        weights = np.array([1.0, 1.0, 0.0])
        cal = np.array([0.5, 2.0, 1.0])
        scaled = apply_confidence_weighting(weights, cal)
        assert scaled[2] == 0.0
        assert scaled[0] > scaled[1]
        assert scaled.sum() == pytest.approx(weights.sum())
