"""Synthetic motion-detection data and scripted class-session fixtures.

The detector's training data is built by sampling labeled segments from a
pool, relabeling them motion/stationary, and concatenating random draws with
linear blending at the junctions. A parametric waveform generator provides
class-distinct segments so the full pipeline is runnable without any real
recordings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pipeline import ActionTriplet
from .signals import (
    CANONICAL_RATE_HZ,
    N_CHANNELS,
    SignalSequence,
    load_signal,
    save_signal,
    sequence_from_values,
)

MOTION, STATIONARY = "motion", "stationary"


class SynthError(ValueError):
    pass


class UnclassifiedLabelError(SynthError):
    def __init__(self, label: str):
        super().__init__(f"label {label!r} is in neither the motion nor the stationary set")
        self.label = label


class UnknownLabelError(SynthError):
    def __init__(self, label: str):
        super().__init__(f"label {label!r} not present in pool")
        self.label = label


@dataclass(frozen=True)
class PoolSegment:
    """One signal segment plus the label it was recorded under."""

    values: np.ndarray  # (N, 6)
    source_label: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != N_CHANNELS:
            raise SynthError(f"segment must be (N, {N_CHANNELS}), got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LabeledSegmentPool:
    """Segments grouped by class label, all at a common rate.

    ``stationary_labels`` records which *source* labels count as inactivity;
    the motion/stationary partition is configuration, not hardcoded.
    """

    rate: float
    classes: dict[str, tuple[PoolSegment, ...]]
    stationary_labels: frozenset[str] = frozenset()

    def __post_init__(self):
        for label, segs in self.classes.items():
            if not segs:
                raise SynthError(f"pool class {label!r} is empty")

    @property
    def is_binary(self) -> bool:
        return set(self.classes) == {MOTION, STATIONARY}

    def labels(self) -> list[str]:
        return list(self.classes)

    def segments_for_label(self, label: str) -> tuple[PoolSegment, ...]:
        """Segments under a class key, or matched by source label in any class."""
        if label in self.classes:
            return self.classes[label]
        matched = tuple(
            seg for segs in self.classes.values() for seg in segs if seg.source_label == label
        )
        if not matched:
            raise UnknownLabelError(label)
        return matched

    def min_segment_len(self) -> int:
        return min(len(seg) for segs in self.classes.values() for seg in segs)

    def counts(self) -> dict[str, int]:
        return {label: len(segs) for label, segs in self.classes.items()}


@dataclass(frozen=True)
class MotionMask:
    """Per-frame binary labels, 1 = motion."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if values.ndim != 1:
            raise SynthError(f"mask must be 1-D, got shape {values.shape}")
        if values.size and not np.isin(values, (0, 1)).all():
            raise SynthError("mask values must be 0 or 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MotionMask):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    @property
    def motion_fraction(self) -> float:
        return float(self.values.mean()) if len(self) else 0.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for sequence synthesis.

    Lengths are frames at the pool rate. Defaults: 2-8 segments per sequence,
    0.2 s blends, sequences clipped to 3-60 s at 50 Hz.
    """

    segments_per_sequence: tuple[int, int] = (2, 8)
    blend_width: int = 10
    length_range: tuple[int, int] = (150, 3000)
    motion_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.segments_per_sequence
        if not (1 <= lo <= hi):
            raise SynthError(f"bad segments_per_sequence range ({lo}, {hi})")
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise SynthError(f"bad length_range ({lo}, {hi})")
        if not (0.0 <= self.motion_prob <= 1.0):
            raise SynthError(f"motion_prob must be in [0, 1], got {self.motion_prob}")
        if self.blend_width < 0:
            raise SynthError("blend_width must be >= 0")

    def to_dict(self) -> dict:
        return {
            "segments_per_sequence": list(self.segments_per_sequence),
            "blend_width": self.blend_width,
            "length_range": list(self.length_range),
            "motion_prob": self.motion_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(
            segments_per_sequence=tuple(d["segments_per_sequence"]),
            blend_width=int(d["blend_width"]),
            length_range=tuple(d["length_range"]),
            motion_prob=float(d["motion_prob"]),
            seed=int(d["seed"]),
        )


def relabel_binary(
    pool: LabeledSegmentPool, motion_labels: set[str], stationary_labels: set[str]
) -> LabeledSegmentPool:
    """Collapse a multi-class pool to motion/stationary, keeping source labels."""
    overlap = set(motion_labels) & set(stationary_labels)
    if overlap:
        raise SynthError(f"labels in both sets: {sorted(overlap)}")
    motion_segs: list[PoolSegment] = []
    stationary_segs: list[PoolSegment] = []
    for label, segs in pool.classes.items():
        if label in motion_labels:
            motion_segs.extend(segs)
        elif label in stationary_labels:
            stationary_segs.extend(segs)
        else:
            raise UnclassifiedLabelError(label)
    classes = {}
    if motion_segs:
        classes[MOTION] = tuple(motion_segs)
    if stationary_segs:
        classes[STATIONARY] = tuple(stationary_segs)
    return LabeledSegmentPool(
        rate=pool.rate, classes=classes, stationary_labels=frozenset(stationary_labels)
    )


def blend_transition(tail: np.ndarray, head: np.ndarray, w: int) -> np.ndarray:
    """Linear crossfade of width ``w`` between a segment end and the next start.

    Frame k (k = 1..w) is ``tail[-1] * (1 - k/(w+1)) + head[0] * (k/(w+1))``
    per channel. The caller replaces the w frames straddling the junction
    (ceil(w/2) from the left segment, floor(w/2) from the right).
    """
    if w < 1:
        raise SynthError(f"blend width must be >= 1, got {w}")
    tail = np.atleast_2d(np.asarray(tail, dtype=np.float64))
    head = np.atleast_2d(np.asarray(head, dtype=np.float64))
    if tail.shape[0] < w or head.shape[0] < w:
        raise SynthError(
            f"blend width {w} exceeds available frames ({tail.shape[0]}, {head.shape[0]})"
        )
    a_last = tail[-1]
    b_first = head[0]
    k = np.arange(1, w + 1, dtype=np.float64)[:, None] / (w + 1)
    return a_last * (1.0 - k) + b_first * k


def _concat_with_blend(pieces: list[np.ndarray], w: int) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate segment arrays, crossfading junctions.

    Returns (values, owner) where owner[f] is the index of the segment a
    frame belongs to; blended frames belong to the later segment.
    """
    values = pieces[0].copy()
    owner = np.zeros(len(pieces[0]), dtype=np.int64)
    for idx, piece in enumerate(pieces[1:], start=1):
        if w >= 1:
            blended = blend_transition(values, piece, w)
            left = (w + 1) // 2  # extra frame goes to the left segment
            right = w - left
            values = np.concatenate([values[: len(values) - left], blended, piece[right:]])
            owner = np.concatenate(
                [owner[: len(owner) - left], np.full(w + len(piece) - right, idx, dtype=np.int64)]
            )
        else:
            values = np.concatenate([values, piece])
            owner = np.concatenate([owner, np.full(len(piece), idx, dtype=np.int64)])
    return values, owner


@dataclass(frozen=True)
class SegmentDraw:
    """One entry of the synthesis draw log."""

    class_label: str
    source_label: str
    segment_index: int
    n_frames: int


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for sequence ``index`` of a dataset seeded with ``seed``.

    Parallel generation must partition the seed space this way (one derived
    stream per sequence index).
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def synthesize_sequence_with_log(
    pool: LabeledSegmentPool, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[SignalSequence, MotionMask, list[SegmentDraw]]:
    """Like :func:`synthesize_sequence` but also returns the draw log."""
    if not pool.is_binary:
        raise SynthError(f"synthesis needs a binary pool, got classes {pool.labels()}")
    if cfg.blend_width and cfg.blend_width >= pool.min_segment_len():
        raise SynthError(
            f"blend width {cfg.blend_width} must be smaller than the shortest "
            f"pool segment ({pool.min_segment_len()} frames)"
        )

    def draw_one() -> tuple[np.ndarray, SegmentDraw, int]:
        cls = MOTION if rng.random() < cfg.motion_prob else STATIONARY
        segs = pool.classes.get(cls)
        if not segs:
            raise SynthError(f"pool class {cls!r} is empty")
        i = int(rng.integers(len(segs)))
        seg = segs[i]
        log_entry = SegmentDraw(cls, seg.source_label, i, len(seg))
        return seg.values, log_entry, 1 if cls == MOTION else 0

    k = int(rng.integers(cfg.segments_per_sequence[0], cfg.segments_per_sequence[1] + 1))
    pieces, log, flags = [], [], []
    for _ in range(k):
        vals, entry, flag = draw_one()
        pieces.append(vals)
        log.append(entry)
        flags.append(flag)
    # Top up until the minimum length is reached, then truncate to the maximum.
    # Blending replaces frames rather than inserting, so lengths just add up.
    while sum(len(p) for p in pieces) < cfg.length_range[0]:
        vals, entry, flag = draw_one()
        pieces.append(vals)
        log.append(entry)
        flags.append(flag)

    values, owner = _concat_with_blend(pieces, cfg.blend_width)
    mask = np.asarray(flags, dtype=np.uint8)[owner]
    n = min(len(values), cfg.length_range[1])
    seq = sequence_from_values(values[:n], rate=pool.rate)
    return seq, MotionMask(mask[:n]), log


def synthesize_sequence(
    pool: LabeledSegmentPool, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[SignalSequence, MotionMask]:
    """Concatenate random motion/stationary draws into one labeled sequence."""
    seq, mask, _ = synthesize_sequence_with_log(pool, cfg, rng)
    return seq, mask


@dataclass(frozen=True)
class SyntheticDataset:
    pairs: tuple[tuple[SignalSequence, MotionMask], ...]
    config: SynthConfig
    summary: dict


def synthesize_dataset(pool: LabeledSegmentPool, cfg: SynthConfig, n: int) -> SyntheticDataset:
    """Generate ``n`` (sequence, mask) pairs, deterministic in ``cfg.seed``."""
    if n < 1:
        raise SynthError(f"dataset size must be >= 1, got {n}")
    pairs = []
    for i in range(n):
        pairs.append(synthesize_sequence(pool, cfg, sequence_rng(cfg.seed, i)))
    lengths = np.array([len(seq) for seq, _ in pairs])
    motion_frames = sum(int(mask.values.sum()) for _, mask in pairs)
    total = int(lengths.sum())
    hist, edges = np.histogram(lengths, bins=min(10, n))
    summary = {
        "n": n,
        "total_frames": total,
        "motion_fraction": motion_frames / total if total else 0.0,
        "length_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
    }
    return SyntheticDataset(pairs=tuple(pairs), config=cfg, summary=summary)


DATASET_SCHEMA = "kinesis.synth_dataset/1"


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    """Write ``signals/*.csv`` + ``masks/*.csv`` + ``manifest.json``."""
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, (seq, mask) in enumerate(ds.pairs):
        save_signal(seq, out / "signals" / f"{i:05d}.csv")
        with open(out / "masks" / f"{i:05d}.csv", "w") as fh:
            fh.write("frame,label\n")
            fh.writelines(f"{f},{int(v)}\n" for f, v in enumerate(mask.values))
    manifest = {
        "schema": DATASET_SCHEMA,
        "n": len(ds.pairs),
        "config": ds.config.to_dict(),
        "summary": ds.summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("schema") != DATASET_SCHEMA:
        raise SynthError(f"unsupported dataset schema {manifest.get('schema')!r}")
    cfg = SynthConfig.from_dict(manifest["config"])
    pairs = []
    for i in range(manifest["n"]):
        seq = load_signal(src / "signals" / f"{i:05d}.csv")
        rows = (src / "masks" / f"{i:05d}.csv").read_text().strip().splitlines()[1:]
        mask = MotionMask(np.array([int(r.split(",")[1]) for r in rows], dtype=np.uint8))
        if len(mask) != len(seq):
            raise SynthError(f"mask length mismatch for item {i}")
        pairs.append((seq, mask))
    return SyntheticDataset(pairs=tuple(pairs), config=cfg, summary=manifest["summary"])


# ---------------------------------------------------------------------------
# Parametric waveforms: class-distinct segments without real recordings
# ---------------------------------------------------------------------------

GRAVITY = 9.81


@dataclass(frozen=True)
class WaveformSignature:
    """Deterministic per-label waveform parameters."""

    freq_hz: float
    amplitude: float
    harmonic: float
    channel_weights: tuple[float, ...]  # (6,)
    phases: tuple[float, ...]  # (6,)
    stationary: bool = False


def waveform_signature(label: str, index: int | None = None) -> WaveformSignature:
    """Signature for a label; pass ``index`` for widely spaced fixture classes.

    Without an index, parameters derive from a stable hash of the label so
    ad-hoc technical labels (e.g. dribbling) still get a repeatable waveform.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    u = [b / 255.0 for b in digest[:16]]
    if index is None:
        freq = 0.7 + 2.6 * u[0]
        amp = 0.8 + 1.4 * u[1]
        harmonic = 0.1 + 0.4 * u[2]
    else:
        freq = 0.6 + 0.33 * index
        amp = 1.0 + 0.3 * (index % 4)
        harmonic = 0.15 + 0.1 * (index % 3)
    weights = tuple(0.35 + 0.65 * u[3 + c] for c in range(6))
    if index is not None:
        # Rotate the emphasis pattern so neighbouring classes differ in
        # channel mix as well as frequency.
        weights = tuple(weights[(c + index) % 6] for c in range(6))
    phases = tuple(2.0 * np.pi * u[9 + c % 6] + 0.7 * c for c in range(6))
    return WaveformSignature(freq, amp, harmonic, weights, phases)


def stationary_signature(label: str) -> WaveformSignature:
    sig = waveform_signature(label)
    return replace(sig, amplitude=0.02, harmonic=0.0, stationary=True)


def synthesize_waveform(
    sig: WaveformSignature,
    n_frames: int,
    rng: np.random.Generator,
    rate: float = CANONICAL_RATE_HZ,
    amplitude_scale: float = 1.0,
    noise: float = 0.05,
) -> np.ndarray:
    """Render one (n_frames, 6) segment from a signature."""
    t = np.arange(n_frames, dtype=np.float64) / rate
    out = np.empty((n_frames, N_CHANNELS), dtype=np.float64)
    amp = sig.amplitude * amplitude_scale
    for c in range(N_CHANNELS):
        if sig.stationary:
            out[:, c] = 0.0
        else:
            base = np.sin(2 * np.pi * sig.freq_hz * t + sig.phases[c])
            base += sig.harmonic * np.sin(2 * np.pi * 2 * sig.freq_hz * t + 2 * sig.phases[c])
            out[:, c] = amp * sig.channel_weights[c] * base
    out[:, 2] += GRAVITY  # accelerometer z carries gravity at rest
    out += rng.normal(scale=noise * max(amp, 0.02), size=out.shape)
    return out


def make_waveform_pool(
    motion_labels: list[str],
    stationary_labels: list[str],
    seed: int,
    segments_per_label: int = 20,
    seconds_range: tuple[float, float] = (1.0, 3.0),
    rate: float = CANONICAL_RATE_HZ,
    amplitude_jitter: tuple[float, float] = (0.85, 1.2),
    freq_jitter: float = 0.0,
    phase_jitter: float = 0.0,
    noise: float = 0.05,
) -> LabeledSegmentPool:
    """Multi-class pool of parametric segments, one waveform family per label.

    ``freq_jitter``/``phase_jitter`` add per-segment variation within a class
    (relative frequency spread, absolute phase spread in radians), which makes
    few-shot tasks genuinely need more shots.
    """
    classes: dict[str, tuple[PoolSegment, ...]] = {}
    all_labels = list(motion_labels) + list(stationary_labels)
    for idx, label in enumerate(all_labels):
        if label in stationary_labels:
            sig = stationary_signature(label)
        else:
            sig = waveform_signature(label, index=idx)
        rng = sequence_rng(seed, idx)
        segs = []
        for _ in range(segments_per_label):
            n = int(rng.integers(round(seconds_range[0] * rate), round(seconds_range[1] * rate) + 1))
            scale = float(rng.uniform(*amplitude_jitter))
            seg_sig = sig
            if freq_jitter or phase_jitter:
                seg_sig = replace(
                    sig,
                    freq_hz=sig.freq_hz * (1.0 + float(rng.uniform(-freq_jitter, freq_jitter))),
                    phases=tuple(
                        p + float(rng.uniform(-phase_jitter, phase_jitter)) for p in sig.phases
                    ),
                )
            segs.append(
                PoolSegment(synthesize_waveform(seg_sig, n, rng, rate, scale, noise), label)
            )
        classes[label] = tuple(segs)
    return LabeledSegmentPool(
        rate=rate, classes=classes, stationary_labels=frozenset(stationary_labels)
    )


SCORE_RANGE = 5.0


def make_scored_segments(
    label: str,
    n: int,
    seed: int,
    amp_range: tuple[float, float] = (0.4, 2.0),
    seconds_range: tuple[float, float] = (1.0, 2.0),
    rate: float = CANONICAL_RATE_HZ,
) -> list[tuple[np.ndarray, float]]:
    """Segments whose gold score is 5 * (amplitude normalized over amp_range).

    RMS grows with the drawn amplitude; execution at higher amplitude is also
    faster and sharper (frequency and harmonic content scale with it), so the
    score is recoverable from waveform shape as well as scale.
    """
    base = waveform_signature(label)
    rng = sequence_rng(seed, 0)
    lo, hi = amp_range
    out = []
    for _ in range(n):
        amp = float(rng.uniform(lo, hi))
        score = SCORE_RANGE * (amp - lo) / (hi - lo)
        sig = replace(
            base,
            amplitude=amp,
            harmonic=0.05 + 0.17 * score,
            freq_hz=base.freq_hz * (1.0 + 0.12 * score),
        )
        frames = int(rng.integers(round(seconds_range[0] * rate), round(seconds_range[1] * rate) + 1))
        out.append((synthesize_waveform(sig, frames, rng, rate), score))
    return out


# ---------------------------------------------------------------------------
# Scripted class sessions (end-to-end fixtures with ground truth)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    duration_s: float
    label: str
    score: float

    def __post_init__(self):
        if not (self.duration_s > 0):
            raise SynthError(f"script durations must be > 0, got {self.duration_s}")
        if not (0.0 <= self.score <= 5.0):
            raise SynthError(f"script score must be in [0, 5], got {self.score}")


@dataclass(frozen=True)
class SessionScript:
    """Ordered (duration, action, target score) plan for one student."""

    student_id: str
    entries: tuple[ScriptEntry, ...]


def simulate_class_session(
    script: SessionScript,
    pool: LabeledSegmentPool,
    cfg: SynthConfig,
    rng: np.random.Generator,
    allow_parametric: bool = True,
) -> tuple[SignalSequence, list[ActionTriplet]]:
    """Realize a script as one continuous signal plus gold triplets.

    Entries whose label is in ``pool.stationary_labels`` produce signal but no
    triplet (they are the rests the detector must reject). Labels absent from
    the pool fall back to parametric waveforms unless ``allow_parametric`` is
    off, in which case they raise.
    """
    if not script.entries:
        return (
            sequence_from_values(np.zeros((0, N_CHANNELS)), rate=pool.rate, subject_id=script.student_id),
            [],
        )

    pieces: list[np.ndarray] = []
    triplets: list[ActionTriplet] = []
    cursor = 0
    for entry in script.entries:
        n_frames = int(round(entry.duration_s * pool.rate))
        pieces.append(_realize_entry(entry.label, n_frames, pool, cfg, rng, allow_parametric))
        start, end = cursor, cursor + n_frames
        cursor = end
        if entry.label not in pool.stationary_labels:
            triplets.append(
                ActionTriplet(
                    start=start / pool.rate,
                    end=end / pool.rate,
                    label=entry.label,
                    score=entry.score,
                )
            )
    values, _ = _concat_with_blend(pieces, cfg.blend_width if len(pieces) > 1 else 0)
    seq = sequence_from_values(values, rate=pool.rate, subject_id=script.student_id)
    return seq, triplets


def _realize_entry(
    label: str,
    n_frames: int,
    pool: LabeledSegmentPool,
    cfg: SynthConfig,
    rng: np.random.Generator,
    allow_parametric: bool,
) -> np.ndarray:
    try:
        segs = pool.segments_for_label(label)
    except UnknownLabelError:
        if not allow_parametric:
            raise
        sig = waveform_signature(label)
        return synthesize_waveform(sig, n_frames, rng, pool.rate)
    pieces = []
    total = 0
    while total < n_frames:
        seg = segs[int(rng.integers(len(segs)))]
        pieces.append(seg.values)
        total += len(seg)
    blend = cfg.blend_width if len(pieces) > 1 and cfg.blend_width < min(len(p) for p in pieces) else 0
    values, _ = _concat_with_blend(pieces, blend)
    return values[:n_frames]


def save_session(
    seq: SignalSequence, triplets: list[ActionTriplet], out_dir: str | Path
) -> None:
    """Write a session fixture: signal CSV plus gold ``triplets.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_signal(seq, out / "signal.csv")
    doc = [
        {"start_s": t.start, "end_s": t.end, "label": t.label, "score": t.score}
        for t in triplets
    ]
    (out / "triplets.json").write_text(json.dumps(doc, indent=2) + "\n")


def load_session(in_dir: str | Path) -> tuple[SignalSequence, list[ActionTriplet]]:
    src = Path(in_dir)
    seq = load_signal(src / "signal.csv")
    doc = json.loads((src / "triplets.json").read_text())
    triplets = [
        ActionTriplet(start=d["start_s"], end=d["end_s"], label=d["label"], score=d["score"])
        for d in doc
    ]
    return seq, triplets
