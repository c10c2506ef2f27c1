"""Core IMU signal types: loading, resampling, normalization, windowing.

Everything downstream (detection, recognition, scoring) consumes the
:class:`SignalSequence` defined here. Sequences are immutable after
construction, so they can be shared freely across workers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

# All loaded signals are resampled to this rate on ingest; models assume it.
CANONICAL_RATE_HZ = 50.0

CHANNEL_NAMES = ("ax", "ay", "az", "gx", "gy", "gz")
N_CHANNELS = 6

# Degenerate (constant) channels get their std clamped to this before division.
STD_FLOOR = 1e-8

CSV_HEADER = ("t",) + CHANNEL_NAMES


class SignalError(ValueError):
    """Malformed or inconsistent signal data."""


class SignalParseError(SignalError):
    """CSV row that could not be parsed; carries the 1-based line number."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class NonMonotoneTimestampError(SignalError):
    """Timestamps must be strictly increasing; names the offending sample."""

    def __init__(self, index: int, t_prev: float, t_cur: float):
        super().__init__(
            f"timestamp at sample {index} is not strictly increasing "
            f"({t_cur!r} after {t_prev!r})"
        )
        self.index = index


class ImuSample(NamedTuple):
    """One IMU reading: time, 3-axis acceleration (m/s^2), 3-axis gyro (rad/s)."""

    t: float
    accel: np.ndarray
    gyro: np.ndarray


def _first_bad_step(times: np.ndarray) -> int | None:
    """Index of the first sample whose timestamp does not increase, or None."""
    if len(times) < 2:
        return None
    bad = np.nonzero(np.diff(times) <= 0)[0]
    if len(bad) == 0:
        return None
    return int(bad[0]) + 1


@dataclass(frozen=True, eq=False)
class SignalSequence:
    """A 6-axis IMU stream with per-sample timestamps.

    Invariants: timestamps strictly increasing, all channel values finite.
    Arrays are made read-only on construction.
    """

    rate: float
    times: np.ndarray  # (N,) seconds
    values: np.ndarray  # (N, 6) ax ay az gx gy gz
    subject_id: str | None = None

    def __post_init__(self):
        if not (self.rate > 0):
            raise SignalError(f"rate must be > 0, got {self.rate}")
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_CHANNELS:
            raise SignalError(f"values must have shape (N, {N_CHANNELS}), got {values.shape}")
        if times.shape != (values.shape[0],):
            raise SignalError(
                f"times length {times.shape} does not match values {values.shape}"
            )
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
            raise SignalError("non-finite value in signal")
        bad = _first_bad_step(times)
        if bad is not None:
            raise NonMonotoneTimestampError(bad, float(times[bad - 1]), float(times[bad]))
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalSequence):
            return NotImplemented
        return (
            self.rate == other.rate
            and self.subject_id == other.subject_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    @property
    def duration(self) -> float:
        """Span in seconds (0 for sequences shorter than 2 samples)."""
        if len(self) < 2:
            return 0.0
        return float(self.times[-1] - self.times[0])

    def sample(self, i: int) -> ImuSample:
        row = self.values[i]
        return ImuSample(float(self.times[i]), row[:3], row[3:])

    def slice_frames(self, start: int, stop: int) -> "SignalSequence":
        """Sub-sequence over frames [start, stop) sharing rate and subject."""
        return SignalSequence(
            rate=self.rate,
            times=self.times[start:stop],
            values=self.values[start:stop],
            subject_id=self.subject_id,
        )

    def with_values(self, values: np.ndarray) -> "SignalSequence":
        return SignalSequence(self.rate, self.times, values, self.subject_id)


def sequence_from_values(
    values: np.ndarray, rate: float = CANONICAL_RATE_HZ, subject_id: str | None = None
) -> SignalSequence:
    """Build a uniformly timestamped sequence starting at t=0 from raw frames."""
    values = np.asarray(values, dtype=np.float64)
    times = np.arange(values.shape[0], dtype=np.float64) / rate
    return SignalSequence(rate=rate, times=times, values=values, subject_id=subject_id)


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window geometry: window length and stride, both in frames."""

    length: int
    step: int

    def __post_init__(self):
        if self.length <= 0:
            raise SignalError(f"window length must be > 0, got {self.length}")
        if not (0 < self.step <= self.length):
            raise SignalError(
                f"step must satisfy 0 < step <= length, got step={self.step} length={self.length}"
            )


# 6 s windows at 50 Hz, stride = length / 4 so interior frames get 4 predictions.
def default_window() -> WindowConfig:
    return WindowConfig(length=300, step=75)


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std fitted on a corpus; std is pre-clamped > 0."""

    mean: np.ndarray  # (6,)
    std: np.ndarray  # (6,)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(N_CHANNELS)
        std = np.asarray(self.std, dtype=np.float64).reshape(N_CHANNELS)
        if not np.all(std > 0):
            raise SignalError("all std values must be > 0")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


def load_signal(path: str | Path, rate: float | None = None) -> SignalSequence:
    """Load a signal CSV (header ``t,ax,ay,az,gx,gy,gz``).

    An optional sidecar ``<path>.meta.json`` may declare ``rate`` and
    ``subject_id``. Without either, the rate is inferred from the median
    timestamp spacing (canonical rate for sequences shorter than 2 samples).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"signal file not found: {path}")

    subject_id = None
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if rate is None and "rate" in meta:
            rate = float(meta["rate"])
        subject_id = meta.get("subject_id")

    times: list[float] = []
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SignalParseError(path, 1, "missing header") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise SignalParseError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise SignalParseError(path, line_no, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                parsed = [float(x) for x in row]
            except ValueError as exc:
                raise SignalParseError(path, line_no, str(exc)) from None
            times.append(parsed[0])
            rows.append(parsed[1:])

    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(rows, dtype=np.float64).reshape(len(rows), N_CHANNELS)
    bad = _first_bad_step(t)
    if bad is not None:
        raise NonMonotoneTimestampError(bad, float(t[bad - 1]), float(t[bad]))
    if rate is None:
        rate = 1.0 / float(np.median(np.diff(t))) if len(t) >= 2 else CANONICAL_RATE_HZ
    return SignalSequence(rate=rate, times=t, values=v, subject_id=subject_id)


def save_signal(seq: SignalSequence, path: str | Path, sidecar: bool = True) -> None:
    """Write a sequence in the CSV schema accepted by :func:`load_signal`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(seq)):
            writer.writerow([repr(float(seq.times[i]))] + [repr(float(x)) for x in seq.values[i]])
    if sidecar:
        meta = {"rate": seq.rate, "subject_id": seq.subject_id}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta))


def resample(seq: SignalSequence, target_rate: float) -> SignalSequence:
    """Resample onto a uniform grid spanning [t0, t_last] by linear interpolation."""
    if len(seq) < 2:
        raise SignalError(f"resample needs at least 2 samples, got {len(seq)}")
    if not (target_rate > 0):
        raise SignalError(f"target_rate must be > 0, got {target_rate}")
    t0 = float(seq.times[0])
    span = float(seq.times[-1]) - t0
    n_out = int(math.floor(span * target_rate + 1e-9)) + 1
    grid = t0 + np.arange(n_out, dtype=np.float64) / target_rate
    # Guard against the last grid point drifting past t_last by float error.
    grid = np.minimum(grid, seq.times[-1])
    out = np.empty((n_out, N_CHANNELS), dtype=np.float64)
    for c in range(N_CHANNELS):
        out[:, c] = np.interp(grid, seq.times, seq.values[:, c])
    return SignalSequence(rate=target_rate, times=grid, values=out, subject_id=seq.subject_id)


def fit_norm_stats(sequences: list[SignalSequence]) -> NormStats:
    """Per-channel mean/std (population) over the concatenated corpus."""
    arrays = [s.values for s in sequences if len(s) > 0]
    if not arrays:
        raise SignalError("cannot fit normalization stats on an empty corpus")
    stacked = np.concatenate(arrays, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std)


def apply_norm(seq: SignalSequence, stats: NormStats) -> SignalSequence:
    return seq.with_values((seq.values - stats.mean) / stats.std)


def invert_norm(seq: SignalSequence, stats: NormStats) -> SignalSequence:
    return seq.with_values(seq.values * stats.std + stats.mean)


def normalize_values(values: np.ndarray, stats: NormStats | None) -> np.ndarray:
    if stats is None:
        return np.asarray(values, dtype=np.float64)
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def slice_windows(seq: SignalSequence, cfg: WindowConfig) -> list[tuple[int, np.ndarray]]:
    """Cut a sequence into sliding windows of ``cfg.length`` at stride ``cfg.step``.

    Starts on the stride grid 0, step, 2*step, ...; if that grid leaves the
    tail uncovered, one extra window anchored at ``max(0, N - length)`` is
    appended so every frame is covered. Sequences shorter than the window
    yield a single short window (model input pads it; see the detector).

    Returns (start_frame, window_values) pairs; windows are read-only views.
    """
    n = len(seq)
    if n == 0:
        raise SignalError("cannot slice an empty sequence")
    starts = list(range(0, max(n - cfg.length, 0) + 1, cfg.step))
    covered = starts[-1] + cfg.length
    if covered < n:
        starts.append(max(0, n - cfg.length))
    return [(s, seq.values[s : min(s + cfg.length, n)]) for s in starts]


def window_coverage(n_frames: int, cfg: WindowConfig) -> np.ndarray:
    """Number of windows covering each frame, from the same start rule."""
    counts = np.zeros(n_frames, dtype=np.int64)
    if n_frames == 0:
        return counts
    starts = list(range(0, max(n_frames - cfg.length, 0) + 1, cfg.step))
    if starts[-1] + cfg.length < n_frames:
        starts.append(max(0, n_frames - cfg.length))
    for s in starts:
        counts[s : min(s + cfg.length, n_frames)] += 1
    return counts
