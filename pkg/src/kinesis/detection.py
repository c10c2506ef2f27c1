"""Per-frame motion detection: LSTM model, sliding-window inference, metrics.

Inference slides windows over the sequence and averages every prediction a
frame receives; segments come from thresholding the averaged probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoints import (
    arrays_to_state_dict,
    load_checkpoint,
    params_sha256,
    save_checkpoint,
    state_dict_to_arrays,
)
from .signals import (
    N_CHANNELS,
    NormStats,
    SignalSequence,
    WindowConfig,
    fit_norm_stats,
    normalize_values,
    slice_windows,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "motion_detector"


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorArch:
    """Recurrent stack descriptor. Defaults follow the reference setup."""

    layers: int = 6
    hidden: int = 64
    in_channels: int = N_CHANNELS


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    window: WindowConfig = field(default_factory=lambda: WindowConfig(300, 75))
    val_fraction: float = 0.1


class _DetectorNet(nn.Module):
    def __init__(self, arch: DetectorArch):
        super().__init__()
        self.lstm = nn.LSTM(arch.in_channels, arch.hidden, num_layers=arch.layers,
                            batch_first=True)
        self.head = nn.Linear(arch.hidden, 1)

    def forward(self, x):  # (B, T, C) -> logits (B, T)
        out, _ = self.lstm(x)
        return self.head(out).squeeze(-1)


class DetectorModel:
    """Trained per-frame motion-probability model.

    Immutable once trained; concurrent detect() calls on one model are safe.
    """

    def __init__(self, net: _DetectorNet, arch: DetectorArch, window: WindowConfig,
                 norm_stats: NormStats | None, meta: dict | None = None):
        self.net = net.eval()
        self.arch = arch
        self.window = window
        self.norm_stats = norm_stats
        self.meta = meta or {}

    def predict_batch(self, windows: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        """Probabilities for raw windows (B, L, C); rows are independent."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[2] != self.arch.in_channels:
            raise DetectionError(
                f"expected windows shaped (B, L, {self.arch.in_channels}), got {windows.shape}"
            )
        x = normalize_values(windows.reshape(-1, windows.shape[2]), self.norm_stats)
        x = torch.from_numpy(x.reshape(windows.shape).astype(np.float32))
        with torch.no_grad():
            probs = torch.sigmoid(self.net(x))
        return probs.numpy().astype(np.float64)

    def predict_window(self, window: np.ndarray) -> np.ndarray:
        """Per-frame probabilities for one window; short windows are padded."""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2 or window.shape[1] != self.arch.in_channels:
            raise DetectionError(
                f"expected a window shaped (L, {self.arch.in_channels}), got {window.shape}"
            )
        n = window.shape[0]
        length = max(n, self.window.length)
        padded = np.zeros((1, length, self.arch.in_channels))
        padded[0, :n] = window
        return self.predict_batch(padded)[0, :n]

    def param_hash(self) -> str:
        return params_sha256(state_dict_to_arrays(self.net.state_dict()))

    def save(self, path: str | Path) -> None:
        arrays = state_dict_to_arrays(self.net.state_dict())
        if self.norm_stats is not None:
            arrays["norm.mean"] = np.asarray(self.norm_stats.mean)
            arrays["norm.std"] = np.asarray(self.norm_stats.std)
        descriptor = {
            "layers": self.arch.layers,
            "hidden": self.arch.hidden,
            "in_channels": self.arch.in_channels,
            "window_length": self.window.length,
            "window_step": self.window.step,
            "has_norm": self.norm_stats is not None,
        }
        save_checkpoint(path, CHECKPOINT_KIND, descriptor, arrays, extra=self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        _, desc, arrays, extra = load_checkpoint(path, expect_kind=CHECKPOINT_KIND)
        arch = DetectorArch(layers=desc["layers"], hidden=desc["hidden"],
                            in_channels=desc["in_channels"])
        window = WindowConfig(desc["window_length"], desc["window_step"])
        norm = None
        if desc.get("has_norm"):
            norm = NormStats(mean=arrays.pop("norm.mean"), std=arrays.pop("norm.std"))
        net = _DetectorNet(arch)
        net.load_state_dict(arrays_to_state_dict(arrays))
        return cls(net, arch, window, norm, meta=extra)


def _as_pairs(dataset):
    pairs = list(getattr(dataset, "pairs", dataset))
    if not pairs:
        raise DetectionError("training dataset is empty")
    return pairs


def _mask_values(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "values", mask))


def _window_tensors(pairs, window: WindowConfig, norm: NormStats | None):
    """Stack every training window: inputs, per-frame targets, valid weights."""
    xs, ys, ws = [], [], []
    length = window.length
    for seq, mask in pairs:
        values = normalize_values(seq.values, norm)
        target = _mask_values(mask).astype(np.float32)
        if len(target) != len(seq):
            raise DetectionError("mask length does not match sequence length")
        for start, win in slice_windows(seq, window):
            n = win.shape[0]
            x = np.zeros((length, win.shape[1]), dtype=np.float32)
            x[:n] = values[start : start + n]
            y = np.zeros(length, dtype=np.float32)
            y[:n] = target[start : start + n]
            w = np.zeros(length, dtype=np.float32)
            w[:n] = 1.0
            xs.append(x)
            ys.append(y)
            ws.append(w)
    return (
        torch.from_numpy(np.stack(xs)),
        torch.from_numpy(np.stack(ys)),
        torch.from_numpy(np.stack(ws)),
    )


def _masked_bce(logits, targets, weights) -> torch.Tensor:
    per_frame = nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="none"
    )
    return (per_frame * weights).sum() / weights.sum().clamp(min=1.0)


def train_detector(
    dataset,
    cfg: DetectorTrainConfig,
    arch: DetectorArch = DetectorArch(),
) -> DetectorModel:
    """Train on (sequence, mask) pairs; deterministic for a fixed seed."""
    pairs = _as_pairs(dataset)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(round(len(pairs) * cfg.val_fraction))) if len(pairs) > 1 else 0
    val_pairs = [pairs[i] for i in order[: n_val]] or pairs
    train_pairs = [pairs[i] for i in order[n_val:]] or pairs

    norm = fit_norm_stats([seq for seq, _ in train_pairs])
    torch.manual_seed(cfg.seed)
    net = _DetectorNet(arch)

    x, y, w = _window_tensors(train_pairs, cfg.window, norm)
    xv, yv, wv = _window_tensors(val_pairs, cfg.window, norm)

    def val_loss() -> float:
        net.eval()
        with torch.no_grad():
            return float(_masked_bce(net(xv), yv, wv))

    loss_init = val_loss()
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        net.train()
        perm = rng.permutation(x.shape[0])
        total, seen = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[i : i + cfg.batch_size].copy())
            optimizer.zero_grad()
            loss = _masked_bce(net(x[idx]), y[idx], w[idx])
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        logger.info("detector epoch %d/%d train_bce=%.4f", epoch + 1, cfg.epochs, curve[-1])

    meta = {
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "loss_curve": curve,
        "val_bce_init": loss_init,
        "val_bce_final": val_loss(),
        "n_train_pairs": len(train_pairs),
        "n_val_pairs": len(val_pairs),
    }
    return DetectorModel(net, arch, cfg.window, norm, meta=meta)


@dataclass(frozen=True)
class FrameProbabilities:
    """Averaged per-frame motion probabilities plus prediction counts."""

    values: np.ndarray  # (N,) in [0, 1]
    counts: np.ndarray  # (N,) >= 1

    def __len__(self) -> int:
        return len(self.values)


def detect(model, seq: SignalSequence, cfg: WindowConfig | None = None) -> FrameProbabilities:
    """Average window predictions over every window covering each frame.

    ``model`` needs ``predict_batch(windows, lengths)`` and a default
    ``window``; predictions for zero-padded frames are discarded.
    """
    if len(seq) == 0:
        raise DetectionError("cannot detect on an empty sequence")
    cfg = cfg or model.window
    wins = slice_windows(seq, cfg)
    length = cfg.length
    batch = np.zeros((len(wins), length, seq.values.shape[1]))
    lengths = np.empty(len(wins), dtype=np.int64)
    for i, (start, win) in enumerate(wins):
        batch[i, : win.shape[0]] = win
        lengths[i] = win.shape[0]
    probs = model.predict_batch(batch, lengths)
    sums = np.zeros(len(seq))
    counts = np.zeros(len(seq), dtype=np.int64)
    for i, (start, win) in enumerate(wins):
        n = win.shape[0]
        sums[start : start + n] += probs[i, :n]
        counts[start : start + n] += 1
    return FrameProbabilities(values=sums / counts, counts=counts)


def extract_segments(
    probs,
    threshold: float = 0.5,
    min_len: int = 25,
    merge_gap: int = 15,
) -> list[tuple[int, int]]:
    """Half-open [start, end) frame intervals where probability >= threshold.

    Runs closer than ``merge_gap`` frames are merged first, then runs shorter
    than ``min_len`` are dropped. Defaults: 0.5 s minimum, 0.3 s gap at 50 Hz.
    """
    if not (0.0 <= threshold <= 1.0):
        raise DetectionError(f"threshold must be in [0, 1], got {threshold}")
    p = np.asarray(getattr(probs, "values", probs), dtype=np.float64)
    active = p >= threshold
    runs = []
    start = None
    for i, flag in enumerate(active):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(active)))

    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] < merge_gap:
            merged[-1] = (merged[-1][0], run[1])
        else:
            merged.append(run)
    return [r for r in merged if r[1] - r[0] >= min_len]


def segments_to_mask(segments: list[tuple[int, int]], n_frames: int) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=np.uint8)
    for a, b in segments:
        mask[a:b] = 1
    return mask


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    return extract_segments(mask.astype(np.float64), threshold=0.5, min_len=1, merge_gap=0)


def _interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union else 0.0


def eval_detection(predicted, gold) -> dict:
    """Per-frame precision/recall/F1 (motion positive) plus a segment IoU block.

    Zero-denominator metrics come back as 0.0 with the metric name flagged.
    """
    pred = _mask_values(predicted).astype(np.int64)
    g = _mask_values(gold).astype(np.int64)
    if pred.shape != g.shape:
        raise DetectionError(f"mask length mismatch: {pred.shape} vs {g.shape}")
    tp = int(((pred == 1) & (g == 1)).sum())
    fp = int(((pred == 1) & (g == 0)).sum())
    fn = int(((pred == 0) & (g == 1)).sum())
    tn = int(((pred == 0) & (g == 0)).sum())

    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")

    pred_segs = _runs(pred)
    gold_segs = _runs(g)
    best_ious = [
        max((_interval_iou(gs, ps) for ps in pred_segs), default=0.0) for gs in gold_segs
    ]
    segment_block = {
        "n_predicted": len(pred_segs),
        "n_gold": len(gold_segs),
        "mean_best_iou": float(np.mean(best_ious)) if best_ious else 0.0,
        "matched_at_50": int(sum(iou >= 0.5 for iou in best_ious)),
    }
    return {
        "frame": {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        },
        "segments": segment_block,
        "flags": flags,
    }
