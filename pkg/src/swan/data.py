"""Dataset handling: synthetic planted-event generation, container I/O,
resampling, minority upsampling, and subject-independent fold splitting.

The synthetic task mirrors the driving-study schema: 10-dim series at 10 Hz
(velocity, angular velocity, steering angle, engine volume, proactive-voice
flag; gaze x, gaze y, left/right pupil, gaze-object code), 4 metadata values
per segment, and a binary label with a configurable minority fraction.

Minority-class (label 0) samples carry one planted event: a sustained
multi-channel excursion (velocity surge, gaze shift, pupil dilation) lasting a
few seconds. The planted interval is recorded as an annotation so attention
localization can be scored against ground truth. Both classes additionally
receive brief distractor transients, so the label signal lives in the
*duration structure* of the excursion, not in any global extreme: fixed-window
pooled statistics only resolve it when the window is commensurate with the
event. Per-subject baseline offsets make subject-independent splitting matter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import ConfigError

N_DIMS = 10
TARGET_HZ = 10
MAX_SEQ_LEN = 1500

# proactive-voice flag and gaze-object code are categorical
FLAG_DIMS = (4, 9)
# channels the planted event perturbs; the detector oracle watches these
SIGNATURE_DIMS = (0, 5, 6, 7, 8)

METADATA_FIELDS = ("mobility", "aggressiveness", "proactive", "watch_order")

MANIFEST_NAME = "manifest.csv"
SERIES_DIR = "series"
_MANIFEST_HEADER = [
    "segment_id", "subject_id", "video_id", "label", "length", "series_file",
    *METADATA_FIELDS, "event_start", "event_end",
]


class DataError(ValueError):
    """Dataset contents violate a protocol precondition."""


class ParseError(ValueError):
    """Malformed record in a dataset container."""


class InputError(ValueError):
    """Well-formed record outside the supported schema bounds."""


@dataclass(eq=False)
class SequenceSample:
    """One labeled segment: (L, 10) series, 4 metadata values, binary label."""

    subject_id: str
    video_id: str
    segment_id: str
    series: np.ndarray
    metadata: np.ndarray
    label: int
    real_len: int | None = None
    event: tuple[int, int] | None = None  # planted [start, end) steps, synthetic only

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.metadata = np.asarray(self.metadata, dtype=np.float64)
        if self.real_len is None:
            self.real_len = self.series.shape[0]


@dataclass(frozen=True)
class GeneratorConfig:
    subjects: int = 44
    per_subject: int = 38
    minority_fraction: float = 0.14
    min_len: int = 160
    max_len: int = 320
    event_duration_s: tuple[float, float] = (2.0, 5.0)
    event_shape: str = "bump"  # "swing" = zero-integral excursion, invisible to mean pooling
    amplitude: float = 5.0
    noise_level: float = 1.0
    subject_sigma: float = 0.4
    distractor_rate: float = 3.0  # mean brief transients per sample, both classes
    distractor_dims: tuple[int, ...] = (0, 1, 2)
    n_videos: int = 12
    videos_per_subject: int = 4
    gaze_objects: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.minority_fraction < 1.0):
            raise ConfigError(
                f"minority_fraction must be in (0, 1), got {self.minority_fraction}"
            )
        for name in ("subjects", "per_subject", "min_len", "max_len",
                     "n_videos", "videos_per_subject", "gaze_objects"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.min_len > self.max_len:
            raise ConfigError(f"min_len {self.min_len} > max_len {self.max_len}")
        if self.max_len > MAX_SEQ_LEN:
            raise ConfigError(f"max_len {self.max_len} exceeds the {MAX_SEQ_LEN}-step canvas")
        lo, hi = self.event_duration_s
        if not (0 < lo <= hi):
            raise ConfigError(f"event_duration_s must satisfy 0 < lo <= hi, got {lo}, {hi}")
        if int(round(hi * TARGET_HZ)) > self.min_len:
            raise ConfigError(
                f"event duration {hi}s exceeds the minimum sequence length "
                f"{self.min_len} steps"
            )
        if min(self.amplitude, self.noise_level, self.subject_sigma, self.distractor_rate) < 0:
            raise ConfigError(
                "amplitude, noise_level, subject_sigma and distractor_rate must be >= 0"
            )
        if self.event_shape not in ("bump", "swing"):
            raise ConfigError(f"event_shape must be 'bump' or 'swing', got {self.event_shape!r}")
        if not self.distractor_dims or any(not 0 <= d < N_DIMS for d in self.distractor_dims):
            raise ConfigError(f"distractor_dims must be channel indices, got {self.distractor_dims}")
        if self.videos_per_subject > self.n_videos:
            raise ConfigError("videos_per_subject cannot exceed n_videos")


def _smooth_noise(rng, length, level):
    """Background channel: white noise low-passed over ~1 s, unit-ish variance."""
    white = rng.standard_normal(length + 9)
    kernel = np.ones(10) / 10.0
    smooth = np.convolve(white, kernel, mode="valid")
    return level * smooth * np.sqrt(10.0)


def _piecewise_codes(rng, length, n_values, lo=5, hi=40):
    out = np.empty(length)
    t = 0
    while t < length:
        run = int(rng.integers(lo, hi))
        out[t:t + run] = float(rng.integers(0, n_values))
        t += run
    return out[:length]


def _base_series(rng, length, offsets, video, config):
    x = np.empty((length, N_DIMS))
    for d in (0, 1, 2, 3, 5, 6, 7, 8):
        x[:, d] = _smooth_noise(rng, length, config.noise_level) + offsets[d]
    x[:, 8] = 0.5 * (x[:, 7] + x[:, 8])  # pupils co-vary
    if video["proactive"]:
        x[:, 4] = (_piecewise_codes(rng, length, 2, lo=10, hi=50) > 0).astype(float)
    else:
        x[:, 4] = 0.0
    x[:, 9] = _piecewise_codes(rng, length, config.gaze_objects) / config.gaze_objects
    return x


def _inject_distractors(x, rng, amplitude, rate, dims):
    """Brief transients common to both classes.

    These dominate any global-extreme statistic, so only features commensurate
    with the event's duration can separate the classes.
    """
    for _ in range(rng.poisson(rate)):
        dur = int(rng.integers(3, 9))  # 0.3 to 0.8 s
        start = int(rng.integers(0, max(1, len(x) - dur)))
        dim = int(dims[rng.integers(0, len(dims))])
        sign = 1.0 if rng.random() < 0.5 else -1.0
        x[start:start + dur, dim] += sign * amplitude * np.hanning(dur + 2)[1:-1]


def _inject_event(x, start, dur, amplitude, rng, shape):
    """Sustained multi-channel excursion: the trust-relevant moment.

    The "swing" shape integrates to ~zero per channel, so it cannot be read
    off a whole-sequence mean; only structure at its own time scale sees it.
    """
    env = np.hanning(dur + 2)[1:-1]  # strictly interior support
    if shape == "swing":
        env = env * np.sin(2.0 * np.pi * (np.arange(dur) + 0.5) / dur)
    sx = 1.0 if rng.random() < 0.5 else -1.0
    sy = 1.0 if rng.random() < 0.5 else -1.0
    x[start:start + dur, 0] += amplitude * env
    x[start:start + dur, 1] += 0.6 * amplitude * env
    x[start:start + dur, 5] += 0.7 * amplitude * sx * env
    x[start:start + dur, 6] += 0.7 * amplitude * sy * env
    x[start:start + dur, 7] += 0.4 * amplitude * env
    x[start:start + dur, 8] += 0.4 * amplitude * env


def generate(config: GeneratorConfig) -> list[SequenceSample]:
    """Deterministically generate the synthetic planted-event dataset."""
    rng = np.random.default_rng(config.seed)
    videos = [
        {
            "id": f"v{v:02d}",
            "mobility": int(rng.integers(0, 2)),
            "aggressiveness": int(rng.integers(0, 2)),
            "proactive": int(rng.integers(0, 2)),
        }
        for v in range(config.n_videos)
    ]
    total = config.subjects * config.per_subject
    n_minority = int(round(config.minority_fraction * total))
    # spread the minority count as evenly as possible across subjects, so any
    # subject-level fold still sees both classes
    base, extra = divmod(n_minority, config.subjects)
    per_subject_minority = np.full(config.subjects, base, dtype=int)
    per_subject_minority[rng.choice(config.subjects, extra, replace=False)] += 1

    samples = []
    for s in range(config.subjects):
        subject_id = f"s{s:02d}"
        offsets = rng.normal(0.0, config.subject_sigma, N_DIMS)
        watched = rng.choice(config.n_videos, config.videos_per_subject, replace=False)
        labels = np.ones(config.per_subject, dtype=int)
        labels[:per_subject_minority[s]] = 0
        labels = labels[rng.permutation(config.per_subject)]
        for k in range(config.per_subject):
            order = k % config.videos_per_subject
            video = videos[watched[order]]
            length = int(rng.integers(config.min_len, config.max_len + 1))
            series = _base_series(rng, length, offsets, video, config)
            _inject_distractors(series, rng, config.amplitude, config.distractor_rate,
                                config.distractor_dims)
            label = int(labels[k])
            event = None
            if label == 0:
                dur = int(round(rng.uniform(*config.event_duration_s) * TARGET_HZ))
                lo, hi = dur, length - 2 * dur
                if hi < lo:
                    lo, hi = 0, length - dur
                start = int(rng.integers(lo, hi + 1))
                _inject_event(series, start, dur, config.amplitude, rng,
                              config.event_shape)
                event = (start, start + dur)
            samples.append(
                SequenceSample(
                    subject_id=subject_id,
                    video_id=video["id"],
                    segment_id=f"{subject_id}_{video['id']}_{k:02d}",
                    series=series,
                    metadata=np.array(
                        [
                            float(video["mobility"]),
                            float(video["aggressiveness"]),
                            float(video["proactive"]),
                            (order + 1) / config.videos_per_subject,
                        ]
                    ),
                    label=label,
                    event=event,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# solvability oracle


def detector_scores(samples, window_s: float = 3.0) -> np.ndarray:
    """Max windowed energy of the signature channels, per sample."""
    w = max(1, int(round(window_s * TARGET_HZ)))
    kernel = np.ones(w) / w
    scores = np.empty(len(samples))
    for i, sample in enumerate(samples):
        x = sample.series[: sample.real_len][:, SIGNATURE_DIMS]
        centered = x - np.median(x, axis=0)
        energy = (centered ** 2).sum(axis=1)
        scores[i] = np.convolve(energy, kernel, mode="valid").max()
    return scores


def detector_uar(samples, window_s: float = 3.0) -> float:
    """Best-threshold UAR of the brute-force energy detector (event class is 0)."""
    scores = detector_scores(samples, window_s)
    labels = np.array([s.label for s in samples])
    order = np.argsort(scores)[::-1]  # descending: high energy first
    sorted_labels = labels[order]
    n0 = (labels == 0).sum()
    n1 = (labels == 1).sum()
    if n0 == 0 or n1 == 0:
        raise DataError("detector needs both classes present")
    # predict 0 for the top-k scores, for every cut k
    hits0 = np.concatenate([[0], np.cumsum(sorted_labels == 0)])
    ks = np.arange(len(labels) + 1)
    recall0 = hits0 / n0
    recall1 = (n1 - (ks - hits0)) / n1
    return float(((recall0 + recall1) / 2).max())


# ---------------------------------------------------------------------------
# container I/O


def _format_row(values):
    return ",".join(repr(float(v)) for v in values)


def save_dataset(samples, path) -> None:
    """Write the manifest + one comma-separated series file per sample."""
    root = Path(path)
    (root / SERIES_DIR).mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        for s in samples:
            series_file = f"{SERIES_DIR}/{s.segment_id}.csv"
            start, end = (s.event if s.event is not None else ("", ""))
            writer.writerow(
                [s.segment_id, s.subject_id, s.video_id, s.label, s.real_len,
                 series_file, *[repr(float(v)) for v in s.metadata], start, end]
            )
            with open(root / series_file, "w", encoding="utf-8") as sf:
                for row in s.series[: s.real_len]:
                    sf.write(_format_row(row) + "\n")


def _parse_series_file(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != N_DIMS:
                raise ParseError(
                    f"{path}:{lineno}: expected {N_DIMS} columns, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), N_DIMS)


def load_dataset(path, source_hz: float = TARGET_HZ) -> list[SequenceSample]:
    """Load a dataset container; resamples when the caller declares a higher rate."""
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    samples = []
    with open(manifest, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return []
    if rows[0] != _MANIFEST_HEADER:
        raise ParseError(f"{manifest}:1: unrecognized manifest header")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(_MANIFEST_HEADER):
            raise ParseError(
                f"{manifest}:{lineno}: expected {len(_MANIFEST_HEADER)} fields, got {len(row)}"
            )
        rec = dict(zip(_MANIFEST_HEADER, row))
        try:
            label = int(rec["label"])
            length = int(rec["length"])
            metadata = np.array([float(rec[k]) for k in METADATA_FIELDS])
        except ValueError as exc:
            raise ParseError(f"{manifest}:{lineno}: {exc}") from None
        series = _parse_series_file(root / rec["series_file"])
        if source_hz != TARGET_HZ:
            series = resample(series, source_hz)
        if series.shape[0] != length:
            raise ParseError(
                f"{manifest}:{lineno}: {rec['segment_id']} declares {length} steps "
                f"but the series has {series.shape[0]}"
            )
        if length > MAX_SEQ_LEN:
            raise InputError(
                f"{manifest}:{lineno}: {rec['segment_id']} has {length} steps, "
                f"max is {MAX_SEQ_LEN}"
            )
        event = None
        if rec["event_start"] != "":
            event = (int(rec["event_start"]), int(rec["event_end"]))
        samples.append(
            SequenceSample(
                subject_id=rec["subject_id"],
                video_id=rec["video_id"],
                segment_id=rec["segment_id"],
                series=series,
                metadata=metadata,
                label=label,
                event=event,
            )
        )
    return samples


def resample(series: np.ndarray, source_hz: float, target_hz: float = TARGET_HZ) -> np.ndarray:
    """Bin a higher-rate series down to ``target_hz``.

    Continuous dims take the bin mean; flag/categorical dims take the bin's
    modal value (smallest value on ties).
    """
    if source_hz < target_hz:
        raise DataError(
            f"upsampling from {source_hz} Hz to {target_hz} Hz is unsupported"
        )
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    bins = np.floor(np.arange(n) * (target_hz / source_hz)).astype(int)
    n_out = bins[-1] + 1
    out = np.empty((n_out, series.shape[1]))
    for b in range(n_out):
        chunk = series[bins == b]
        out[b] = chunk.mean(axis=0)
        for d in FLAG_DIMS:
            values, counts = np.unique(chunk[:, d], return_counts=True)
            out[b, d] = values[counts.argmax()]
    return out


# ---------------------------------------------------------------------------
# protocol operations


def upsample_minority(train, seed: int = 0) -> list[SequenceSample]:
    """Duplicate minority samples (with replacement, seeded) to balance classes."""
    zeros = [s for s in train if s.label == 0]
    ones = [s for s in train if s.label == 1]
    if not zeros or not ones:
        raise DataError("upsampling needs both classes in the training set")
    minority, majority = (zeros, ones) if len(zeros) < len(ones) else (ones, zeros)
    needed = len(majority) - len(minority)
    rng = np.random.default_rng(seed)
    extras = [minority[i] for i in rng.integers(0, len(minority), needed)]
    return list(train) + extras


@dataclass(frozen=True)
class FoldSplit:
    """Assignment of subjects to k folds; runs rotate the test/validation folds."""

    folds: tuple[tuple[str, ...], ...]

    @property
    def k(self):
        return len(self.folds)

    def partition(self, samples, run_index: int):
        """(train, val, test) lists for the run that tests fold ``run_index``."""
        test_ids = set(self.folds[run_index % self.k])
        val_ids = set(self.folds[(run_index + 1) % self.k])
        train, val, test = [], [], []
        for s in samples:
            if s.subject_id in test_ids:
                test.append(s)
            elif s.subject_id in val_ids:
                val.append(s)
            else:
                train.append(s)
        return train, val, test


def split_subjects(samples, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle subjects by seed and deal them round-robin into k folds."""
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < k:
        raise DataError(f"need at least {k} subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    return FoldSplit(folds=tuple(tuple(shuffled[i::k]) for i in range(k)))
