import numpy as np
import pytest

from voiceface.estimator import (
    EstimatorDataset,
    EstimatorModel,
    Recording,
    TrainingConfig,
    aggregate,
    architecture_hash,
    estimator_loss_and_grads,
    init_params,
    load_model,
    loss_plain,
    loss_uncertainty,
    predict_split,
    save_model,
    train,
)
from voiceface.features import MelNormalization
from voiceface.geometry import AMNormalization


def toy_dataset(rng, n_speakers=30, k=3, frames=40, noise=0.05):
    """Small planted dataset: am0 is written into mel channel 5."""
    am_ids = tuple(f"am{i}" for i in range(k))
    targets, splits = {}, {"train": [], "v1": [], "v2": []}
    for s in range(n_speakers):
        name = f"spk{s:03d}"
        t = rng.standard_normal(k)
        targets[name] = t
        feats = 0.5 * rng.standard_normal((frames, 64))
        feats[:, 5] = t[0] + noise * rng.standard_normal(frames)
        split = "train" if s < n_speakers - 10 else ("v1" if s < n_speakers - 5 else "v2")
        splits[split].append(Recording(name, f"{name}_r0", feats))
    return EstimatorDataset(am_ids, targets, splits)


def toy_config(**kw):
    defaults = dict(
        iterations=100,
        batch_size=16,
        segment_frames=(24, 32),
        warmup_iterations=25,
        eval_every=50,
        seed=0,
    )
    defaults.update(kw)
    return TrainingConfig(**defaults)


class TestForward:
    def test_zero_heads(self, rng):
        params = init_params(rng, 4)
        model = EstimatorModel(params, ("a", "b", "c", "d"))
        _, means, variances = model.forward(rng.standard_normal((30, 64)))
        np.testing.assert_array_equal(means, 0.0)
        np.testing.assert_array_equal(variances, 1.0)

    def test_deterministic(self, rng):
        params = init_params(rng, 2)
        params["mean_w"] += 0.01 * rng.standard_normal(params["mean_w"].shape)
        model = EstimatorModel(params, ("a", "b"))
        seg = rng.standard_normal((25, 64))
        e1, m1, v1 = model.forward(seg)
        e2, m2, v2 = model.forward(seg)
        assert np.array_equal(e1, e2) and np.array_equal(m1, m2) and np.array_equal(v1, v2)

    def test_code_dim_fixed(self, rng):
        params = init_params(rng, 2)
        model = EstimatorModel(params, ("a", "b"))
        for frames in (20, 35, 64):
            e, _, _ = model.forward(rng.standard_normal((frames, 64)))
            assert e.shape == (64,)

    def test_too_short_segment(self, rng):
        model = EstimatorModel(init_params(rng, 1), ("a",))
        with pytest.raises(ValueError, match="minimum"):
            model.forward(rng.standard_normal((19, 64)))

    def test_variances_positive(self, rng):
        params = init_params(rng, 3)
        params["var_w"] = rng.standard_normal(params["var_w"].shape)
        params["var_b"] = rng.standard_normal(3) * 5
        model = EstimatorModel(params, ("a", "b", "c"))
        _, _, variances = model.forward(rng.standard_normal((30, 64)))
        assert np.all(variances > 0)


class TestLosses:
    def test_plain_examples(self):
        assert loss_plain(2.0, 2.0) == 0.0
        assert loss_plain(3.0, 1.0) == 4.0

    def test_plain_batch_mean_linearity(self, rng):
        preds, targets = rng.standard_normal(50), rng.standard_normal(50)
        per_sample = [loss_plain(p, t) for p, t in zip(preds, targets)]
        assert np.mean(loss_plain(preds, targets)) == pytest.approx(np.mean(per_sample))

    def test_uncertainty_examples(self):
        assert loss_uncertainty(1.0, 1.0, 0.0) == pytest.approx(1.0)
        # variance identically 1 degenerates to the plain squared error
        preds, targets = np.array([1.0, -2.0, 0.3]), np.array([0.5, 1.0, 0.0])
        np.testing.assert_array_equal(
            loss_uncertainty(preds, np.ones(3), targets), loss_plain(preds, targets)
        )

    def test_optimal_variance_is_squared_error(self, rng):
        for _ in range(20):
            e = rng.uniform(0.1, 3.0)
            grid = np.linspace(1e-3, 20.0, 20000)
            losses = loss_uncertainty(e, grid, 0.0)
            assert grid[np.argmin(losses)] == pytest.approx(e**2, rel=2e-3)

    def test_lower_bound(self, rng):
        for _ in range(100):
            e = rng.uniform(0.05, 4.0)
            g = rng.uniform(1e-3, 50.0)
            assert loss_uncertainty(e, g, 0.0) >= 1.0 + np.log(e**2) - 1e-12

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            loss_uncertainty(1.0, 0.0, 0.0)


class TestGradients:
    def test_matches_finite_differences(self, rng):
        params = init_params(rng, 3)
        # random heads so every path carries gradient
        for k in ("mean_w", "mean_b", "var_w", "var_b"):
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        xs = rng.standard_normal((4, 22, 64))
        ts = rng.standard_normal((4, 3))
        _, grads = estimator_loss_and_grads(params, xs, ts)

        step = 1e-5
        checked = 0
        names = sorted(params)
        while checked < 25:
            name = names[int(rng.integers(0, len(names)))]
            flat_idx = int(rng.integers(0, params[name].size))
            if abs(grads[name].flat[flat_idx]) < 1e-8:
                continue  # skip dead coordinates; FD would only measure noise
            orig = params[name].flat[flat_idx]
            params[name].flat[flat_idx] = orig + step
            lp, _ = estimator_loss_and_grads(params, xs, ts)
            params[name].flat[flat_idx] = orig - step
            lm, _ = estimator_loss_and_grads(params, xs, ts)
            params[name].flat[flat_idx] = orig
            fd = (lp - lm) / (2 * step)
            rel = abs(grads[name].flat[flat_idx] - fd) / max(abs(fd), 1e-10)
            assert rel < 1e-4, (name, flat_idx, rel)
            checked += 1


class TestAggregation:
    def test_single_segment_identity(self):
        agg = aggregate(np.array([[1.5, -0.2]]), np.array([[2.0, 0.5]]))
        np.testing.assert_array_equal(agg.mean, [1.5, -0.2])
        np.testing.assert_array_equal(agg.variance, [2.0, 0.5])
        np.testing.assert_array_equal(agg.calibrated, [2.0, 0.5])
        assert agg.n_segments == 1

    def test_equal_variance_average(self):
        agg = aggregate(np.array([[1.0], [3.0]]), np.array([[1.0], [1.0]]))
        assert agg.mean[0] == pytest.approx(2.0)
        assert agg.variance[0] == pytest.approx(0.5)
        assert agg.calibrated[0] == pytest.approx(1.0)

    def test_worked_example(self):
        # means {1, 3}, variances {1, 3}: weights {0.75, 0.25}
        means = np.array([[1.0], [3.0]])
        variances = np.array([[1.0], [3.0]])
        agg = aggregate(means, variances)
        assert agg.mean[0] == pytest.approx(1.5)
        assert agg.variance[0] == pytest.approx(0.75)
        assert agg.calibrated[0] == pytest.approx(1.5)
        # brute-force weighted sum cross-check
        inv = 1.0 / variances[:, 0]
        w = 1.0 / inv.sum()
        brute = sum(w / variances[l, 0] * means[l, 0] for l in range(2))
        assert agg.mean[0] == pytest.approx(brute)

    def test_convex_combination_and_weights(self, rng):
        for _ in range(50):
            l = int(rng.integers(1, 8))
            means = rng.standard_normal((l, 4))
            variances = rng.uniform(0.1, 5.0, size=(l, 4))
            agg = aggregate(means, variances)
            assert np.all(agg.mean >= means.min(axis=0) - 1e-12)
            assert np.all(agg.mean <= means.max(axis=0) + 1e-12)
            weights = (1.0 / variances) * agg.variance
            np.testing.assert_allclose(weights.sum(axis=0), 1.0, atol=1e-12)

    def test_duplication_invariance(self, rng):
        means = rng.standard_normal((3, 5))
        variances = rng.uniform(0.2, 2.0, size=(3, 5))
        once = aggregate(means, variances)
        twice = aggregate(np.vstack([means, means]), np.vstack([variances, variances]))
        np.testing.assert_allclose(twice.mean, once.mean, atol=1e-12)
        np.testing.assert_allclose(twice.variance, once.variance / 2.0, atol=1e-12)
        np.testing.assert_allclose(twice.calibrated, once.calibrated, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate(np.empty((0, 2)), np.empty((0, 2)))

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            aggregate(np.array([[1.0]]), np.array([[0.0]]))


class TestTraining:
    def test_deterministic(self, rng):
        ds = toy_dataset(rng)
        cfg = toy_config(iterations=40, eval_every=20)
        r1 = train(ds, cfg)
        r2 = train(ds, cfg)
        for name in r1.model.params:
            np.testing.assert_array_equal(r1.model.params[name], r2.model.params[name])

    def test_loss_decreases_first_100_iterations(self):
        first, last = [], []
        for seed in range(5):
            ds = toy_dataset(np.random.default_rng(100 + seed))
            result = train(ds, toy_config(iterations=100, seed=seed))
            first.append(result.loss_trace[:10].mean())
            last.append(result.loss_trace[90:100].mean())
        assert np.mean(last) < np.mean(first)

    def test_planted_am_beats_chance_on_v1(self, rng):
        ds = toy_dataset(rng, n_speakers=40)
        result = train(ds, toy_config(iterations=150, eval_every=50))
        v1 = ds.split("v1")
        targets = ds.target_matrix(v1)
        means, _ = predict_split(result.model, v1)
        mse = ((means - targets) ** 2).mean(axis=0)
        chance = (targets**2).mean(axis=0)  # training mean is ~0 by construction
        assert mse[0] < 0.6 * chance[0]

    def test_empty_split_rejected(self, rng):
        ds = toy_dataset(rng)
        broken = EstimatorDataset(ds.am_ids, ds.targets, {"train": ds.split("train"), "v1": []})
        with pytest.raises(ValueError, match="v1"):
            train(broken, toy_config())

    def test_selection_records_best_iteration(self, rng):
        ds = toy_dataset(rng)
        result = train(ds, toy_config(iterations=60, eval_every=20))
        assert result.selected_iteration in (20, 40, 60)
        assert np.isfinite(result.best_v1_error)


class TestDataset:
    def test_speaker_disjointness_enforced(self, rng):
        rec = Recording("spk0", "a", rng.standard_normal((30, 64)))
        rec2 = Recording("spk0", "b", rng.standard_normal((30, 64)))
        with pytest.raises(ValueError, match="spk0"):
            EstimatorDataset(("am0",), {"spk0": np.zeros(1)}, {"train": [rec], "v1": [rec2]})

    def test_missing_target_rejected(self, rng):
        rec = Recording("spk0", "a", rng.standard_normal((30, 64)))
        with pytest.raises(ValueError, match="no targets"):
            EstimatorDataset(("am0",), {}, {"train": [rec]})


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        params = init_params(rng, 3)
        model = EstimatorModel(
            params,
            ("a", "b", "c"),
            feature_norm=MelNormalization(rng.standard_normal(64), np.ones(64)),
            am_norm=AMNormalization(np.array([1.0, 2.0, 3.0]), np.ones(3), ("a", "b", "c")),
            min_frames=20,
        )
        path = tmp_path / "model.bin"
        save_model(model, path)
        again = load_model(path)
        assert again.am_ids == model.am_ids
        for name in model.params:
            np.testing.assert_array_equal(again.params[name], model.params[name])
        np.testing.assert_array_equal(again.feature_norm.mean, model.feature_norm.mean)
        np.testing.assert_array_equal(again.am_norm.mean, model.am_norm.mean)

    def test_byte_identical_rewrite(self, rng, tmp_path):
        model = EstimatorModel(init_params(rng, 2), ("a", "b"))
        p1, p2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_arch_hash_depends_on_k(self):
        assert architecture_hash(3) != architecture_hash(4)
