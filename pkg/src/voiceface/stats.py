"""Predictability testing: chance baselines, normalized error ratios, and the
one-sided paired t-test harness over repeated training runs.

For AM k, the chance estimator is the training-set mean.  A trained model's
MSE on the held-out v2 split is divided by the chance MSE on the same
samples; the mean ratio over N independently seeded runs is tested against 1
with a one-sided t-test.  We reject "not better than chance" when the upper
confidence bound CI_u = mean + t_{1-alpha, N-1} * std / sqrt(N) falls below 1,
i.e. an AM is declared predictable iff CI_u < 1.

Ratios use the sample standard deviation (divide by N-1): this is an
inferential statistic, unlike the dataset-level population convention used
for normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import betaincinv

from .estimator import EstimatorDataset, TrainingConfig, predict_split, train
from .phonatory import PhonatoryTrainer

DEFAULT_ALPHA = 0.05
DEFAULT_N_RUNS = 100
FILTER_LEVELS = (1.0, 0.75, 0.5)


class SplitMisuseError(ValueError):
    """Raised when error ratios are computed on a split they must not use."""


def student_t_quantile(p: float, dof: int) -> float:
    """Student-t quantile via the inverse regularized incomplete beta.

    For p > 1/2 the tail identity P(T > t) = I_x(dof/2, 1/2) / 2 with
    x = dof / (dof + t^2) gives t = sqrt(dof (1 - x) / x).
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if p == 0.5:
        return 0.0
    tail = 2.0 * (1.0 - p) if p > 0.5 else 2.0 * p
    x = float(betaincinv(dof / 2.0, 0.5, tail))
    t = math.sqrt(dof * (1.0 - x) / x)
    return t if p > 0.5 else -t


@dataclass(frozen=True)
class ChanceEstimator:
    """Per-AM constant prediction: the training-split mean."""

    values: np.ndarray
    am_ids: tuple[str, ...]


def chance_baseline(train_targets: np.ndarray, am_ids) -> ChanceEstimator:
    train_targets = np.asarray(train_targets, dtype=np.float64)
    if train_targets.ndim != 2 or train_targets.shape[0] == 0:
        raise ValueError("chance baseline needs a non-empty (n, K) training target table")
    return ChanceEstimator(train_targets.mean(axis=0), tuple(am_ids))


@dataclass(frozen=True)
class ErrorPair:
    """Model and chance MSEs per AM, on the same samples."""

    eps: np.ndarray
    eps_chance: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.eps / self.eps_chance


def error_pair(predictions: np.ndarray, chance: ChanceEstimator, truth: np.ndarray,
               split: str = "v2") -> ErrorPair:
    """MSE pairs on the v2 split.  Training or model-selection splits are
    rejected outright: errors there are optimistically biased."""
    if split != "v2":
        raise SplitMisuseError(
            f"error ratios must be computed on the v2 split, not {split!r}"
        )
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth must have equal shapes")
    eps = ((predictions - truth) ** 2).mean(axis=0)
    eps_chance = ((chance.values[None, :] - truth) ** 2).mean(axis=0)
    return ErrorPair(eps, eps_chance)


def ci_upper(ratios: np.ndarray, alpha: float = DEFAULT_ALPHA) -> float:
    """Upper confidence bound mean + t_{1-alpha, N-1} * std / sqrt(N)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    n = ratios.shape[0]
    if n < 2:
        raise ValueError("need at least 2 repeated ratios")
    mu = float(ratios.mean())
    sigma = float(ratios.std(ddof=1))
    return mu + student_t_quantile(1.0 - alpha, n - 1) * sigma / math.sqrt(n)


# ---------------------------------------------------------------------------
# test report

DECISION_PREDICTABLE = "predictable"
DECISION_NOT_SHOWN = "not-shown-predictable"


@dataclass(frozen=True)
class AMDecision:
    am_id: str
    level: float
    ratios: np.ndarray
    mean: float
    std: float
    ci_upper: float
    predictable: bool

    @property
    def decision(self) -> str:
        return DECISION_PREDICTABLE if self.predictable else DECISION_NOT_SHOWN


@dataclass(frozen=True)
class TestReport:
    am_ids: tuple[str, ...]
    levels: tuple[float, ...]
    n_runs: int
    alpha: float
    entries: tuple[AMDecision, ...]

    def entry(self, am_id: str, level: float = 1.0) -> AMDecision:
        for e in self.entries:
            if e.am_id == am_id and e.level == level:
                return e
        raise KeyError(f"no entry for AM {am_id!r} at level {level}")

    def predictable_ams(self, level: float = 1.0) -> list[str]:
        return [e.am_id for e in self.entries if e.level == level and e.predictable]

    def one_minus_ci(self, level: float = 1.0) -> dict[str, float]:
        return {e.am_id: 1.0 - e.ci_upper for e in self.entries if e.level == level}

    def mean_ratio(self, level: float = 1.0) -> float:
        rows = [e.mean for e in self.entries if e.level == level]
        return float(np.mean(rows))


def build_report(ratios_by_level: dict[float, np.ndarray], am_ids, alpha: float) -> TestReport:
    """ratios_by_level: level -> (N, K) ratio table over the repeated runs."""
    am_ids = tuple(am_ids)
    levels = tuple(sorted(ratios_by_level, reverse=True))
    n_runs = next(iter(ratios_by_level.values())).shape[0]
    entries = []
    for level in levels:
        table = np.asarray(ratios_by_level[level], dtype=np.float64)
        for k, am_id in enumerate(am_ids):
            r = table[:, k]
            bound = ci_upper(r, alpha)
            entries.append(
                AMDecision(am_id, level, r.copy(), float(r.mean()),
                           float(r.std(ddof=1)), bound, bound < 1.0)
            )
    return TestReport(am_ids, levels, n_runs, alpha, tuple(entries))


def report_to_csv(report: TestReport, comments: list[str] | None = None) -> str:
    lines = [f"# {c}" for c in comments or []]
    lines.append("am_id,level,mean_ratio,std,ci_upper,decision")
    for e in report.entries:
        lines.append(
            f"{e.am_id},{e.level:g},{e.mean:.10g},{e.std:.10g},{e.ci_upper:.10g},{e.decision}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# uncertainty-filtered ratios

def filtered_indices(uncertainties: np.ndarray, level: float, order_keys=None) -> np.ndarray:
    """Indices of the lowest-uncertainty `level` fraction, stable ties.

    `order_keys` breaks exact ties reproducibly (speaker ids by default the
    sample position)."""
    n = uncertainties.shape[0]
    keep = max(1, int(round(level * n)))
    if order_keys is None:
        order = np.argsort(uncertainties, kind="stable")
    else:
        order = sorted(range(n), key=lambda i: (uncertainties[i], order_keys[i]))
        order = np.asarray(order)
    return np.sort(order[:keep])


def level_ratios(predictions, uncertainties, truth, chance: ChanceEstimator,
                 levels, order_keys=None) -> dict[float, np.ndarray]:
    """Per-level per-AM error ratios; each AM ranks samples by its own
    calibrated uncertainty."""
    predictions = np.asarray(predictions, dtype=np.float64)
    uncertainties = np.asarray(uncertainties, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    k = predictions.shape[1]
    out = {}
    for level in levels:
        ratios = np.empty(k)
        for j in range(k):
            idx = filtered_indices(uncertainties[:, j], level, order_keys)
            pair = error_pair(predictions[idx, j : j + 1],
                              ChanceEstimator(chance.values[j : j + 1], (chance.am_ids[j],)),
                              truth[idx, j : j + 1])
            ratios[j] = pair.ratio[0]
        out[level] = ratios
    return out


# ---------------------------------------------------------------------------
# repeated-experiment harness

@dataclass(frozen=True)
class HarnessConfig:
    n_runs: int = DEFAULT_N_RUNS
    alpha: float = DEFAULT_ALPHA
    filter_levels: tuple[float, ...] = FILTER_LEVELS
    master_seed: int = 0
    gamma: float = 0.0          # > 0 enables the phonatory constraint
    window_stride: int = 1
    n_eval_segments: int = 1


def derive_run_seeds(master_seed: int, n_runs: int) -> list[int]:
    """Counter-based per-run seeds; duplicates are rejected."""
    words = np.random.SeedSequence(master_seed).generate_state(n_runs, dtype=np.uint64)
    seeds = [int(w) for w in words]
    if len(set(seeds)) != n_runs:
        raise ValueError("duplicate per-run seeds derived from the master seed")
    return seeds


def _single_run(dataset: EstimatorDataset, training: TrainingConfig, harness: HarnessConfig,
                seed: int):
    cfg = replace(training, seed=seed)
    phonatory = None
    if harness.gamma > 0.0:
        phonatory = PhonatoryTrainer(gamma=harness.gamma, window_stride=harness.window_stride)
    result = train(dataset, cfg, phonatory=phonatory)
    v2 = dataset.split("v2")
    preds, uncert = predict_split(result.model, v2, harness.n_eval_segments)
    return preds, uncert


_WORKER_STATE: dict = {}


def _worker_init(dataset, training, harness):
    _WORKER_STATE["args"] = (dataset, training, harness)


def _worker_run(seed: int):
    dataset, training, harness = _WORKER_STATE["args"]
    return _single_run(dataset, training, harness, seed)


def run_harness(dataset: EstimatorDataset, training: TrainingConfig,
                harness: HarnessConfig, n_jobs: int = 1) -> TestReport:
    """N independently seeded train+evaluate runs -> per-AM, per-level report.

    Splits stay fixed; only training and segment sampling are reseeded.  The
    runs are independent: per-run seeds come from a splittable counter
    scheme, so results do not depend on n_jobs or completion order.
    """
    v2 = dataset.split("v2")
    if not v2:
        raise ValueError("harness needs a non-empty v2 split")
    truth = dataset.target_matrix(v2)
    train_speakers = sorted({r.speaker for r in dataset.split("train")})
    chance = chance_baseline(
        np.stack([dataset.targets[s] for s in train_speakers]), dataset.am_ids
    )
    order_keys = [r.speaker for r in v2]
    seeds = derive_run_seeds(harness.master_seed, harness.n_runs)

    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=n_jobs, initializer=_worker_init,
            initargs=(dataset, training, harness),
        ) as pool:
            results = list(pool.map(_worker_run, seeds))
    else:
        results = [_single_run(dataset, training, harness, seed) for seed in seeds]

    per_level: dict[float, list[np.ndarray]] = {lvl: [] for lvl in harness.filter_levels}
    for preds, uncert in results:
        ratios = level_ratios(preds, uncert, truth, chance, harness.filter_levels, order_keys)
        for lvl in harness.filter_levels:
            per_level[lvl].append(ratios[lvl])

    stacked = {lvl: np.stack(rows) for lvl, rows in per_level.items()}
    return build_report(stacked, dataset.am_ids, harness.alpha)


# ---------------------------------------------------------------------------
# phoneme-level analysis (annotations are inputs; no segmentation model here)

def phoneme_dataset(dataset: EstimatorDataset, annotations: dict[str, list]) -> dict[str, EstimatorDataset]:
    """Split every annotated recording into per-phoneme recordings.

    annotations: recording_id -> [(start_frame, end_frame, label), ...].
    Returns one derived dataset per phoneme label.
    """
    labels = sorted({lab for spans in annotations.values() for _, _, lab in spans})
    out = {}
    for label in labels:
        splits: dict[str, list] = {}
        for split_name, recs in dataset.splits.items():
            derived = []
            for rec in recs:
                for i, (start, end, lab) in enumerate(annotations.get(rec.recording_id, [])):
                    if lab != label:
                        continue
                    if not (0 <= start < end <= rec.features.shape[0]):
                        raise ValueError(
                            f"annotation ({start}, {end}) out of bounds for {rec.recording_id!r}"
                        )
                    derived.append(
                        type(rec)(rec.speaker, f"{rec.recording_id}#{label}{i}",
                                  rec.features[start:end], wave=rec.wave)
                    )
            splits[split_name] = derived
        out[label] = EstimatorDataset(dataset.am_ids, dataset.targets, splits)
    return out


def run_phoneme_harness(dataset: EstimatorDataset, annotations: dict[str, list],
                        training: TrainingConfig, harness: HarnessConfig) -> dict[str, float]:
    """Per-phoneme mean over AMs of 1 - CI_u (analysis at the 100% level)."""
    datasets = phoneme_dataset(dataset, annotations)
    scores = {}
    for label, ds in sorted(datasets.items()):
        shortest = min(r.features.shape[0] for r in ds.split("train"))
        if shortest < training.min_frames:
            raise ValueError(
                f"phoneme {label!r} has spans of {shortest} frames; "
                f"minimum usable segment is {training.min_frames}"
            )
        cfg = replace(training, segment_frames=(training.min_frames, shortest))
        sub = replace(harness, filter_levels=(1.0,))
        report = run_harness(ds, cfg, sub)
        scores[label] = float(np.mean(list(report.one_minus_ci(1.0).values())))
    return scores
