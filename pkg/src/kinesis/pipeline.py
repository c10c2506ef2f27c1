"""Structured pipeline outputs: action triplets, per-student and class stats.

The cascade itself (:func:`analyze_sequence`) lives here too; it turns one
session-long signal into the (interval, label, score) triplets the report
stage consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import detect, extract_segments
from .recognition import classify, embed_labels
from .signals import CANONICAL_RATE_HZ, SignalSequence, WindowConfig

TIMELINE_SCHEMA = "kinesis.timeline/1"
CLASS_STATS_SCHEMA = "kinesis.class_stats/1"

_BOUNDS_EPS = 1e-9


class SchemaError(ValueError):
    """Serialized document violates the schema; carries the field path."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class PipelineError(ValueError):
    pass


def _round2(x: float) -> float:
    return round(float(x), 2)


@dataclass(frozen=True)
class ActionTriplet:
    """One detected action: half-open interval in seconds, label, score in [0, 5].

    ``low_confidence`` flags segments whose top classification similarity fell
    below the configured floor; they are still emitted.
    """

    start: float
    end: float
    label: str
    score: float
    low_confidence: bool = False

    def __post_init__(self):
        if not self.start < self.end:
            raise PipelineError(f"triplet start must be < end, got [{self.start}, {self.end})")
        if not (0.0 <= self.score <= 5.0):
            raise PipelineError(f"triplet score must be in [0, 5], got {self.score}")
        if not self.label:
            raise PipelineError("triplet label must be nonempty")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class StudentStats:
    """Aggregates of one student's triplets over a session."""

    student_id: str
    triplets: tuple[ActionTriplet, ...]
    session_duration: float
    label_counts: dict[str, int]
    label_durations: dict[str, float]
    label_mean_scores: dict[str, float]
    active_fraction: float


@dataclass(frozen=True)
class ClassStats:
    """Cross-student aggregates for one class session."""

    students: tuple[StudentStats, ...]
    label_mean_scores: dict[str, float]
    participation_ranking: tuple[str, ...]


def aggregate_student(
    student_id: str, triplets: list[ActionTriplet], session_duration: float
) -> StudentStats:
    """Fold a student's triplets into per-label counts, durations and means."""
    if not (session_duration > 0):
        raise PipelineError(f"session duration must be > 0, got {session_duration}")
    ordered = tuple(sorted(triplets, key=lambda t: (t.start, t.end)))
    prev_end = None
    for t in ordered:
        if t.start < -_BOUNDS_EPS or t.end > session_duration + _BOUNDS_EPS:
            raise PipelineError(
                f"triplet [{t.start}, {t.end}) outside session bounds [0, {session_duration}]"
            )
        if prev_end is not None and t.start < prev_end - _BOUNDS_EPS:
            raise PipelineError(f"triplets overlap at {t.start}")
        prev_end = t.end

    counts: dict[str, int] = {}
    durations: dict[str, float] = {}
    score_sums: dict[str, float] = {}
    for t in ordered:
        counts[t.label] = counts.get(t.label, 0) + 1
        durations[t.label] = durations.get(t.label, 0.0) + t.duration
        score_sums[t.label] = score_sums.get(t.label, 0.0) + t.score
    means = {lab: score_sums[lab] / counts[lab] for lab in counts}
    active = sum(durations.values()) / session_duration
    return StudentStats(
        student_id=student_id,
        triplets=ordered,
        session_duration=float(session_duration),
        label_counts=counts,
        label_durations=durations,
        label_mean_scores=means,
        active_fraction=active,
    )


def aggregate_class(students: list[StudentStats]) -> ClassStats:
    """Combine per-student stats; ranking by active fraction desc, ties by id."""
    if not students:
        raise PipelineError("aggregate_class needs at least one student")
    ids = [s.student_id for s in students]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise PipelineError(f"duplicate student ids: {dupes}")

    per_label: dict[str, list[float]] = {}
    for s in students:
        for lab, mean in s.label_mean_scores.items():
            per_label.setdefault(lab, []).append(mean)
    label_means = {lab: float(np.mean(vals)) for lab, vals in per_label.items()}
    ranking = tuple(
        s.student_id
        for s in sorted(students, key=lambda s: (-s.active_fraction, s.student_id))
    )
    return ClassStats(
        students=tuple(students),
        label_mean_scores=label_means,
        participation_ranking=ranking,
    )


# ---------------------------------------------------------------------------
# Serialization (versioned JSON; validation errors carry the field path)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Timeline:
    """One student's triplet timeline plus the rate it was produced at."""

    student_id: str
    rate_hz: float
    triplets: tuple[ActionTriplet, ...]


def _require(cond: bool, path: str, reason: str):
    if not cond:
        raise SchemaError(path, reason)


def _get(obj: dict, key: str, kind, path: str):
    _require(isinstance(obj, dict), path, "expected object")
    _require(key in obj, f"{path}.{key}" if path else key, "missing field")
    val = obj[key]
    if kind is float:
        _require(isinstance(val, (int, float)) and not isinstance(val, bool),
                 f"{path}.{key}" if path else key, "expected number")
        return float(val)
    _require(isinstance(val, kind), f"{path}.{key}" if path else key,
             f"expected {kind.__name__}")
    return val


def triplet_to_dict(t: ActionTriplet) -> dict:
    d = {
        "start_s": _round2(t.start),
        "end_s": _round2(t.end),
        "label": t.label,
        "score": t.score,
    }
    if t.low_confidence:
        d["low_confidence"] = True
    return d


def triplet_from_dict(d: dict, path: str) -> ActionTriplet:
    start = _get(d, "start_s", float, path)
    end = _get(d, "end_s", float, path)
    label = _get(d, "label", str, path)
    score = _get(d, "score", float, path)
    _require(start < end, f"{path}.end_s", f"end {end} must be > start {start}")
    _require(0.0 <= score <= 5.0, f"{path}.score", f"score {score} out of range [0, 5]")
    _require(bool(label), f"{path}.label", "label must be nonempty")
    low = bool(d.get("low_confidence", False))
    return ActionTriplet(start=start, end=end, label=label, score=score, low_confidence=low)


def timeline_to_dict(tl: Timeline) -> dict:
    return {
        "schema": TIMELINE_SCHEMA,
        "student_id": tl.student_id,
        "rate_hz": tl.rate_hz,
        "triplets": [triplet_to_dict(t) for t in tl.triplets],
    }


def timeline_from_dict(doc: dict) -> Timeline:
    _require(isinstance(doc, dict), "", "expected object")
    schema = _get(doc, "schema", str, "")
    _require(schema == TIMELINE_SCHEMA, "schema", f"unsupported schema {schema!r}")
    student_id = _get(doc, "student_id", str, "")
    rate = _get(doc, "rate_hz", float, "")
    _require(rate > 0, "rate_hz", "must be > 0")
    trips = _get(doc, "triplets", list, "")
    triplets = tuple(
        triplet_from_dict(t, f"triplets[{i}]") for i, t in enumerate(trips)
    )
    return Timeline(student_id=student_id, rate_hz=rate, triplets=triplets)


def student_stats_to_dict(s: StudentStats) -> dict:
    return {
        "student_id": s.student_id,
        "session_duration_s": s.session_duration,
        "active_fraction": s.active_fraction,
        "triplets": [triplet_to_dict(t) for t in s.triplets],
        "per_label": {
            lab: {
                "count": s.label_counts[lab],
                "duration_s": s.label_durations[lab],
                "mean_score": s.label_mean_scores[lab],
            }
            for lab in sorted(s.label_counts)
        },
    }


def student_stats_from_dict(doc: dict, path: str = "") -> StudentStats:
    sid = _get(doc, "student_id", str, path)
    duration = _get(doc, "session_duration_s", float, path)
    _require(duration > 0, f"{path}.session_duration_s", "must be > 0")
    active = _get(doc, "active_fraction", float, path)
    _require(0.0 <= active <= 1.0, f"{path}.active_fraction", "must be in [0, 1]")
    trips = _get(doc, "triplets", list, path)
    triplets = tuple(
        triplet_from_dict(t, f"{path}.triplets[{i}]" if path else f"triplets[{i}]")
        for i, t in enumerate(trips)
    )
    per_label = _get(doc, "per_label", dict, path)
    counts, durations, means = {}, {}, {}
    for lab, block in per_label.items():
        lp = f"{path}.per_label.{lab}" if path else f"per_label.{lab}"
        counts[lab] = int(_get(block, "count", int, lp))
        durations[lab] = _get(block, "duration_s", float, lp)
        means[lab] = _get(block, "mean_score", float, lp)
    # Aggregates must be recomputable from the triplet list.
    recount: dict[str, int] = {}
    for t in triplets:
        recount[t.label] = recount.get(t.label, 0) + 1
    _require(recount == counts, f"{path}.per_label" if path else "per_label",
             "counts inconsistent with triplet list")
    return StudentStats(
        student_id=sid,
        triplets=triplets,
        session_duration=duration,
        label_counts=counts,
        label_durations=durations,
        label_mean_scores=means,
        active_fraction=active,
    )


def class_stats_to_dict(cs: ClassStats) -> dict:
    return {
        "schema": CLASS_STATS_SCHEMA,
        "students": [student_stats_to_dict(s) for s in cs.students],
        "class_aggregates": {
            "label_mean_scores": {k: cs.label_mean_scores[k] for k in sorted(cs.label_mean_scores)},
            "participation_ranking": list(cs.participation_ranking),
        },
    }


def class_stats_from_dict(doc: dict) -> ClassStats:
    schema = _get(doc, "schema", str, "")
    _require(schema == CLASS_STATS_SCHEMA, "schema", f"unsupported schema {schema!r}")
    students = tuple(
        student_stats_from_dict(s, f"students[{i}]")
        for i, s in enumerate(_get(doc, "students", list, ""))
    )
    agg = _get(doc, "class_aggregates", dict, "")
    means = {
        str(k): float(v)
        for k, v in _get(agg, "label_mean_scores", dict, "class_aggregates").items()
    }
    ranking = tuple(
        str(x) for x in _get(agg, "participation_ranking", list, "class_aggregates")
    )
    return ClassStats(students=students, label_mean_scores=means, participation_ranking=ranking)


# ---------------------------------------------------------------------------
# The cascade: detect -> classify -> score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Inference knobs for one pass over a session signal."""

    window: WindowConfig | None = None  # None -> detector's training window
    threshold: float = 0.5
    min_len: int = 25
    merge_gap: int = 15
    confidence_floor: float = 0.0  # flag triplets whose top cosine is below
    confidence_margin: float | None = None  # optional top-vs-runner-up margin
    rate_hz: float = CANONICAL_RATE_HZ


def _check_compatible(detector, encoder, provider, scorer, seq: SignalSequence,
                      cfg: PipelineConfig) -> None:
    if encoder.dim != scorer.dim:
        raise PipelineError(
            f"encoder dim {encoder.dim} does not match scorer dim {scorer.dim}"
        )
    if getattr(provider, "dim", encoder.dim) != encoder.dim:
        raise PipelineError(
            f"provider dim {provider.dim} does not match encoder dim {encoder.dim}"
        )
    if abs(seq.rate - cfg.rate_hz) > 1e-6:
        raise PipelineError(
            f"sequence rate {seq.rate} Hz differs from pipeline rate {cfg.rate_hz} Hz; "
            "resample on ingest"
        )


def analyze_sequence(detector, encoder, provider, scorer, labels, seq: SignalSequence,
                     cfg: PipelineConfig | None = None) -> list[ActionTriplet]:
    """Run the full cascade over one session signal.

    Each detected segment becomes one triplet: its interval in seconds, the
    nearest label in the shared embedding space, and the quality score.
    Returned triplets are sorted and pairwise disjoint.
    """
    cfg = cfg or PipelineConfig()
    _check_compatible(detector, encoder, provider, scorer, seq, cfg)
    probs = detect(detector, seq, cfg.window)
    segments = extract_segments(probs, threshold=cfg.threshold,
                                min_len=cfg.min_len, merge_gap=cfg.merge_gap)
    if not segments:
        return []
    matrix = embed_labels(provider, labels)
    embeddings = encoder.embed_batch([seq.values[a:b] for a, b in segments])
    triplets = []
    for (a, b), emb in zip(segments, embeddings):
        label, sims = classify(emb, matrix, labels)
        order = np.sort(sims)
        low = bool(order[-1] < cfg.confidence_floor)
        if cfg.confidence_margin is not None and len(order) > 1:
            low = low or bool(order[-1] - order[-2] < cfg.confidence_margin)
        score = scorer.score(emb, provider.embed(label))
        triplets.append(
            ActionTriplet(start=a / seq.rate, end=b / seq.rate, label=label,
                          score=score, low_confidence=low)
        )
    return triplets


def match_triplets(gold: list[ActionTriplet], predicted: list[ActionTriplet],
                   iou_threshold: float = 0.5) -> dict:
    """Greedy one-to-one matching of gold to predicted triplets by IoU.

    A gold triplet counts as recovered when some unmatched prediction overlaps
    it at or above the threshold with the same label.
    """
    used = set()
    matched = []
    for g in gold:
        best, best_iou = None, 0.0
        for i, p in enumerate(predicted):
            if i in used or p.label != g.label:
                continue
            inter = max(0.0, min(g.end, p.end) - max(g.start, p.start))
            union = (g.end - g.start) + (p.end - p.start) - inter
            iou = inter / union if union else 0.0
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = i, iou
        if best is not None:
            used.add(best)
            matched.append((g, predicted[best], best_iou))
    recall = len(matched) / len(gold) if gold else 1.0
    return {"n_gold": len(gold), "n_predicted": len(predicted),
            "n_matched": len(matched), "recall": recall, "pairs": matched}


def save_timeline(tl: Timeline, path: str | Path) -> None:
    Path(path).write_text(json.dumps(timeline_to_dict(tl), indent=2) + "\n")


def load_timeline(path: str | Path) -> Timeline:
    return timeline_from_dict(json.loads(Path(path).read_text()))


def save_class_stats(cs: ClassStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(class_stats_to_dict(cs), indent=2) + "\n")


def load_class_stats(path: str | Path) -> ClassStats:
    return class_stats_from_dict(json.loads(Path(path).read_text()))
