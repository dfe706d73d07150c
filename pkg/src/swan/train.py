"""Training loop, UAR evaluation, cross-validated experiment runner, window
sweep, and attention-trace export with Gaussian smoothing.

Protocol: subject-independent k-fold cross validation. Each run trains on the
folds outside its test and validation folds (minority-upsampled), selects the
epoch with the best validation UAR, and scores the withheld test fold exactly
once from that checkpoint.
Every run is deterministic given its (seed, fold) key, so repeated invocations
and any execution order produce identical reports.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as _scipy_stats

from . import tensor as T
from .data import split_subjects, upsample_minority
from .models import ModelConfig, build_variant, count_params
from .tensor import Adam, Tape


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


class TrainingError(RuntimeError):
    """A training run failed; the message carries the (fold, seed) context."""


class CapabilityError(RuntimeError):
    """Requested an output the model variant cannot produce."""


DECISION_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# metrics


def uar(predictions, labels) -> float:
    """Unweighted average recall: mean of the two per-class recalls."""
    if len(predictions) != len(labels):
        raise MetricError(f"{len(predictions)} predictions for {len(labels)} labels")
    n0 = n1 = hit0 = hit1 = 0
    for pred, lab in zip(predictions, labels):
        if lab == 0:
            n0 += 1
            hit0 += pred == 0
        else:
            n1 += 1
            hit1 += pred == 1
    if n0 == 0 or n1 == 0:
        raise MetricError("UAR needs both classes present in the labels")
    return (hit0 / n0 + hit1 / n1) / 2.0


def confusion(predictions, labels):
    """(tp, fp, tn, fn) with class 1 as positive."""
    tp = fp = tn = fn = 0
    for pred, lab in zip(predictions, labels):
        if pred == 1 and lab == 1:
            tp += 1
        elif pred == 1 and lab == 0:
            fp += 1
        elif pred == 0 and lab == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def predict_labels(model, samples) -> list[int]:
    return [1 if model.predict_proba(s)[0] >= DECISION_THRESHOLD else 0 for s in samples]


def paired_t_test(a, b):
    """Two-sided paired t-test; (0, 1) when the pairs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise MetricError(f"need two equal-length vectors of >= 2 runs, got {a.shape} and {b.shape}")
    d = a - b
    if (d == 0).all():
        return 0.0, 1.0
    sd = d.std(ddof=1)
    n = d.size
    if sd == 0.0:
        return math.copysign(math.inf, d.mean()), 0.0
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * _scipy_stats.t.sf(abs(t), n - 1)
    return float(t), float(p)


# ---------------------------------------------------------------------------
# single training run


@dataclass
class RunReport:
    """Everything one (fold, seed) run produced."""

    variant: str
    fold: int
    seed: int
    r: int
    s: int
    config: dict
    train_losses: list[float]
    val_uars: list[float]
    selected_epoch: int
    param_count: int
    n_train: int
    n_val: int
    n_test: int
    test_uar: float | None = None
    tp: int | None = None
    fp: int | None = None
    tn: int | None = None
    fn: int | None = None
    wall_time: float = 0.0
    model_state: list = field(default=None, repr=False, compare=False)

    def numeric_key(self):
        """All deterministic numeric fields (wall time excluded by contract)."""
        return (
            self.variant, self.fold, self.seed, self.r, self.s,
            tuple(self.train_losses), tuple(self.val_uars), self.selected_epoch,
            self.param_count, self.n_train, self.n_val, self.n_test,
            self.test_uar, self.tp, self.fp, self.tn, self.fn,
        )


def train(model, train_set, val_set, config: ModelConfig) -> RunReport:
    """Fit with Adam on mini-batched BCE; keep the best-validation epoch.

    The training set must already be upsampled. The model is left at the
    selected checkpoint; test fields of the report stay unset until the caller
    evaluates the withheld fold.
    """
    t0 = time.perf_counter()
    opt = Adam(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    val_labels = [s.label for s in val_set]

    train_losses: list[float] = []
    val_uars: list[float] = []
    best_uar, best_state, best_epoch = -1.0, None, -1
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            with Tape() as tape:
                probs = T.concat([model.forward(s)[0] for s in batch], axis=0)
                y = np.array([[s.label] for s in batch], dtype=np.float64)
                loss = T.bce_loss(probs, y)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"loss diverged at epoch {epoch}")
                tape.backward(loss)
            opt.step()
            epoch_losses.append(value)
        train_losses.append(float(np.mean(epoch_losses)))
        val_uar = uar(predict_labels(model, val_set), val_labels)
        val_uars.append(val_uar)
        if val_uar > best_uar:  # first epoch wins ties
            best_uar, best_state, best_epoch = val_uar, model.get_state(), epoch

    model.set_state(best_state)
    return RunReport(
        variant=config.variant,
        fold=-1,
        seed=config.seed,
        r=config.r,
        s=config.s,
        config=asdict(config),
        train_losses=train_losses,
        val_uars=val_uars,
        selected_epoch=best_epoch,
        param_count=count_params(model),
        n_train=len(train_set),
        n_val=len(val_set),
        n_test=0,
        wall_time=time.perf_counter() - t0,
        model_state=best_state,
    )


def evaluate(model, samples):
    """(UAR, (tp, fp, tn, fn)) on a held-out set."""
    preds = predict_labels(model, samples)
    labels = [s.label for s in samples]
    return uar(preds, labels), confusion(preds, labels)


def execute_run(samples, config: ModelConfig, seed: int, fold: int, folds: int = 5) -> RunReport:
    """One (seed, fold) cell: split, upsample train, fit, score the test fold once."""
    try:
        t0 = time.perf_counter()
        split = split_subjects(samples, k=folds, seed=seed)
        train_set, val_set, test_set = split.partition(samples, fold)
        train_up = upsample_minority(train_set, seed=seed * 100 + fold)
        run_config = replace(config, seed=seed * 100 + fold)
        model = build_variant(run_config)
        report = train(model, train_up, val_set, run_config)
        test_uar, (tp, fp, tn, fn) = evaluate(model, test_set)
        report.fold = fold
        report.seed = seed
        report.test_uar = test_uar
        report.tp, report.fp, report.tn, report.fn = tp, fp, tn, fn
        report.n_test = len(test_set)
        report.wall_time = time.perf_counter() - t0
        return report
    except (TrainingError, MetricError) as exc:
        raise TrainingError(f"run (fold={fold}, seed={seed}): {exc}") from exc


# ---------------------------------------------------------------------------
# cross-validated runner


@dataclass
class CvReport:
    """All runs of one variant, ordered by (seed, fold) for pairing."""

    variant: str
    runs: list[RunReport]
    failures: list = field(default_factory=list)  # [((seed, fold), message)]

    @property
    def uars(self) -> np.ndarray:
        ordered = sorted(self.runs, key=lambda r: (r.seed, r.fold))
        return np.array([r.test_uar for r in ordered])

    @property
    def mean_uar(self) -> float:
        return float(self.uars.mean())

    @property
    def std_uar(self) -> float:
        return float(self.uars.std(ddof=1)) if len(self.runs) > 1 else 0.0

    def best_run(self) -> RunReport:
        return max(self.runs, key=lambda r: (r.test_uar, -r.fold, -r.seed))


_POOL_STATE: dict = {}


def _pool_init(samples, config, folds):
    _POOL_STATE["args"] = (samples, config, folds)


def _pool_run(key):
    samples, config, folds = _POOL_STATE["args"]
    seed, fold = key
    return execute_run(samples, config, seed, fold, folds)


def run_cv(samples, config: ModelConfig, seeds, folds: int = 5, jobs: int = 1,
           progress=None, collect_errors: bool = False) -> CvReport:
    """Run every (seed, fold) cell and aggregate; order-independent by construction.

    With ``collect_errors`` the report carries failed (seed, fold) keys instead
    of raising on the first failure; completed runs are still aggregated.
    """
    if folds < 3:
        raise MetricError(f"need k >= 3 folds (test + validation + training), got {folds}")
    keys = [(seed, fold) for seed in seeds for fold in range(folds)]
    runs, failures = [], []
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init, initargs=(samples, config, folds)
        ) as pool:
            futures = {key: pool.submit(_pool_run, key) for key in keys}
            for key, future in futures.items():
                try:
                    runs.append(future.result())
                except TrainingError as exc:
                    if not collect_errors:
                        raise
                    failures.append((key, str(exc)))
    else:
        for key in keys:
            try:
                run = execute_run(samples, config, key[0], key[1], folds)
            except TrainingError as exc:
                if not collect_errors:
                    raise
                failures.append((key, str(exc)))
                continue
            runs.append(run)
            if progress:
                progress(run)
    runs.sort(key=lambda r: (r.seed, r.fold))
    return CvReport(variant=config.variant, runs=runs, failures=failures)


# ---------------------------------------------------------------------------
# window-range sweep


@dataclass
class SweepPoint:
    variant: str
    r: int
    s: int
    mean_uar: float
    std_uar: float
    n_runs: int
    uars: list[float]


@dataclass
class SweepReport:
    points: list[SweepPoint]

    def spread(self, variant: str) -> float:
        means = [p.mean_uar for p in self.points if p.variant == variant]
        if not means:
            raise MetricError(f"no sweep points for variant {variant!r}")
        return max(means) - min(means)

    def variants(self):
        seen = []
        for p in self.points:
            if p.variant not in seen:
                seen.append(p.variant)
        return seen


def stride_for_range(r: int) -> int:
    """Default stride: half-overlapping windows."""
    return max(1, r // 2)


def sweep_windows(samples, base_config: ModelConfig, ranges, seeds,
                  folds: int = 5, jobs: int = 1,
                  variants=("swan", "windowed_linear"), progress=None) -> SweepReport:
    """run_cv at every window range for each variant; every cell gets the same runs."""
    if not ranges:
        raise MetricError("ranges must be non-empty")
    points = []
    for variant in variants:
        for r in ranges:
            cfg = replace(base_config, variant=variant, r=int(r), s=stride_for_range(int(r)))
            cv = run_cv(samples, cfg, seeds, folds=folds, jobs=jobs, progress=progress)
            points.append(
                SweepPoint(
                    variant=variant, r=int(r), s=cfg.s,
                    mean_uar=cv.mean_uar, std_uar=cv.std_uar,
                    n_runs=len(cv.runs), uars=list(cv.uars),
                )
            )
    return SweepReport(points=points)


# ---------------------------------------------------------------------------
# attention export


def gaussian_smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian kernel smoothing (truncated at 3 sigma) that conserves total mass.

    Each source step's kernel is renormalized over the in-bounds outputs, so
    sum(out) == sum(x) exactly even at the edges; sigma 0 is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if sigma <= 0:
        return x.copy()
    radius = int(math.ceil(3.0 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    coverage = np.convolve(np.ones_like(x), taps, mode="same")
    return np.convolve(x / coverage, taps, mode="same")


@dataclass
class AttentionExport:
    """Per-step aggregate attention for one sample, raw and smoothed."""

    segment_id: str
    per_step: np.ndarray
    smoothed: np.ndarray
    window_weights: np.ndarray
    alive: np.ndarray
    n_real: int
    event: tuple[int, int] | None
    mass_ratio: float | None
    probability: float | None = None


def interval_mass_ratio(series: np.ndarray, event) -> float | None:
    """Attention mass inside the interval relative to the uniform expectation.

    Measured on |series| so that signed window weights cannot cancel the mass.
    """
    if event is None:
        return None
    start, end = event
    magnitude = np.abs(series)
    total = magnitude.sum()
    if total == 0.0:
        return 0.0
    frac_mass = magnitude[start:end].sum() / total
    frac_len = (end - start) / len(series)
    return float(frac_mass / frac_len)


def export_attention(model, sample, smoothing_sigma: float = 5.0) -> AttentionExport:
    """Aggregate window attention into a per-step series and smooth it.

    Per-step attention sums every window's attention row scaled by its learned
    window weight. Variants without windowing attention cannot export.
    """
    prob, trace = model.predict_proba(sample)
    if trace is None:
        raise CapabilityError(
            f"variant {model.config.variant!r} does not expose windowing attention"
        )
    per_step = (trace.window_weights @ trace.attention)[: trace.n_real]
    smoothed = gaussian_smooth(per_step, smoothing_sigma)
    event = getattr(sample, "event", None)
    return AttentionExport(
        segment_id=getattr(sample, "segment_id", ""),
        per_step=per_step,
        smoothed=smoothed,
        window_weights=trace.window_weights.copy(),
        alive=trace.alive.copy(),
        n_real=trace.n_real,
        event=event,
        mass_ratio=interval_mass_ratio(smoothed, event),
        probability=prob,
    )


# ---------------------------------------------------------------------------
# report files (comma-separated, period decimals, locale-independent)


RUN_TABLE_HEADER = ["variant", "fold", "seed", "r", "s", "test_uar",
                    "tp", "fp", "tn", "fn", "params", "wall_time"]


def write_run_table(path, runs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_TABLE_HEADER)
        for r in sorted(runs, key=lambda x: (x.variant, x.seed, x.fold)):
            writer.writerow([
                r.variant, r.fold, r.seed, r.r, r.s, repr(r.test_uar),
                r.tp, r.fp, r.tn, r.fn, r.param_count, f"{r.wall_time:.3f}",
            ])


def read_run_table(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != RUN_TABLE_HEADER:
        raise MetricError(f"{path} is not a run table")
    out = []
    for row in rows[1:]:
        rec = dict(zip(RUN_TABLE_HEADER, row))
        rec["fold"] = int(rec["fold"])
        rec["seed"] = int(rec["seed"])
        rec["test_uar"] = float(rec["test_uar"])
        out.append(rec)
    return out


def paired_uars(table_a: list[dict], table_b: list[dict]):
    """Align two run tables on (seed, fold) and return the paired UAR vectors."""
    by_key_b = {(r["seed"], r["fold"]): r["test_uar"] for r in table_b}
    a_vals, b_vals = [], []
    for r in sorted(table_a, key=lambda x: (x["seed"], x["fold"])):
        key = (r["seed"], r["fold"])
        if key in by_key_b:
            a_vals.append(r["test_uar"])
            b_vals.append(by_key_b[key])
    if len(a_vals) < 2:
        raise MetricError("fewer than two paired (seed, fold) runs between the tables")
    return np.array(a_vals), np.array(b_vals)


def write_sweep_table(path, report: SweepReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "r_steps", "r_seconds", "s_steps",
                         "mean_uar", "std_uar", "n_runs"])
        for p in report.points:
            writer.writerow([p.variant, p.r, repr(p.r / 10.0), p.s,
                             repr(p.mean_uar), repr(p.std_uar), p.n_runs])


def write_plot_data(path, report: SweepReport) -> None:
    """Two-series plot file: range in seconds vs mean UAR with std, per variant."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "range_seconds", "mean_uar", "std_uar"])
        for p in report.points:
            writer.writerow([p.variant, repr(p.r / 10.0), repr(p.mean_uar), repr(p.std_uar)])


def write_attention_series(path, series: np.ndarray) -> None:
    """Step-indexed two-column series file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "weight"])
        for i, v in enumerate(series):
            writer.writerow([i, repr(float(v))])


def write_summary(path, cv: CvReport) -> None:
    lines = [
        f"variant: {cv.variant}",
        f"runs: {len(cv.runs)}",
        f"mean_test_uar: {cv.mean_uar!r}",
        f"std_test_uar: {cv.std_uar!r}",
        "",
    ]
    for r in cv.runs:
        lines.append(
            f"seed={r.seed} fold={r.fold} test_uar={r.test_uar!r} "
            f"selected_epoch={r.selected_epoch} params={r.param_count} "
            f"wall_time={r.wall_time:.1f}s"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
