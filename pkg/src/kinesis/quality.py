"""Action quality scoring: a small MLP over concatenated signal and label
embeddings, squashed to the 0-5 scale. Trained on human-style scores with
frozen feature extractors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
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

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "quality_scorer"
SCORE_MAX = 5.0


class QualityError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    """A segment with its gold label and human score in [0, 5]."""

    segment: object  # SignalSequence or (N, 6) array
    label: str
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= SCORE_MAX):
            raise QualityError(f"score must be in [0, {SCORE_MAX}], got {self.score}")


@dataclass(frozen=True)
class ScorerConfig:
    hidden: tuple[int, int] = (256, 64)
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2


class _ScorerNet(nn.Module):
    def __init__(self, in_dim: int, hidden: tuple[int, int]):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden[0]),
            nn.ReLU(),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, x):  # (B, 2d) -> scores (B,) in [0, 5]
        return torch.sigmoid(self.mlp(x).squeeze(-1)) * SCORE_MAX


class ScorerMlp:
    """Maps concat(signal embedding, label embedding) to a score in [0, 5].

    The sigmoid-times-five output guarantees the range structurally; an
    all-zero network scores exactly 2.5.
    """

    def __init__(self, net: _ScorerNet, dim: int, hidden: tuple[int, int],
                 meta: dict | None = None):
        self.net = net.eval()
        self.dim = dim
        self.hidden = hidden
        self.meta = meta or {}

    @classmethod
    def create(cls, dim: int, hidden: tuple[int, int] = (256, 64), seed: int = 0) -> "ScorerMlp":
        torch.manual_seed(seed)
        return cls(_ScorerNet(2 * dim, hidden), dim, hidden, meta={"init_seed": seed})

    def score_batch(self, f_signal: np.ndarray, f_label: np.ndarray) -> np.ndarray:
        f_signal = np.asarray(f_signal, dtype=np.float64)
        f_label = np.asarray(f_label, dtype=np.float64)
        if f_signal.shape[-1] != self.dim or f_label.shape[-1] != self.dim:
            raise QualityError(
                f"expected embedding dim {self.dim}, got "
                f"{f_signal.shape[-1]} and {f_label.shape[-1]}"
            )
        x = np.concatenate([np.atleast_2d(f_signal), np.atleast_2d(f_label)], axis=-1)
        with torch.no_grad():
            out = self.net(torch.from_numpy(x.astype(np.float32)))
        return out.numpy().astype(np.float64)

    def score(self, f_signal: np.ndarray, f_label: np.ndarray) -> float:
        return float(self.score_batch(f_signal, f_label)[0])

    def param_hash(self) -> str:
        return params_sha256(state_dict_to_arrays(self.net.state_dict()))

    def save(self, path: str | Path) -> None:
        descriptor = {"dim": self.dim, "hidden": list(self.hidden)}
        save_checkpoint(path, CHECKPOINT_KIND, descriptor,
                        state_dict_to_arrays(self.net.state_dict()), extra=self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "ScorerMlp":
        _, desc, arrays, extra = load_checkpoint(path, expect_kind=CHECKPOINT_KIND)
        net = _ScorerNet(2 * desc["dim"], tuple(desc["hidden"]))
        net.load_state_dict(arrays_to_state_dict(arrays))
        return cls(net, desc["dim"], tuple(desc["hidden"]), meta=extra)


def score_segment(mlp: ScorerMlp, f_signal: np.ndarray, f_label: np.ndarray) -> float:
    """Deterministic squash(MLP(concat(signal, label))) score."""
    return mlp.score(f_signal, f_label)


def _extract_features(samples, encoder, provider):
    segments = [s.segment for s in samples]
    f_signal = encoder.embed_batch(segments)
    f_label = np.stack([provider.embed(s.label) for s in samples])
    gold = np.array([s.score for s in samples], dtype=np.float64)
    return f_signal, f_label, gold


def train_scorer(samples, encoder, provider, cfg: ScorerConfig) -> ScorerMlp:
    """Fit the MLP on frozen features; deterministic for a fixed seed."""
    samples = list(samples)
    if not samples:
        raise QualityError("no scored samples to train on")
    f_signal, f_label, gold = _extract_features(samples, encoder, provider)
    x = np.concatenate([f_signal, f_label], axis=-1).astype(np.float32)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * cfg.val_fraction)) if len(samples) > 4 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    xt = torch.from_numpy(x[train_idx])
    yt = torch.from_numpy(gold[train_idx].astype(np.float32))
    mlp = ScorerMlp.create(encoder.dim, cfg.hidden, seed=cfg.seed)
    net = mlp.net

    def val_mse() -> float | None:
        if n_val == 0:
            return None
        net.eval()
        with torch.no_grad():
            pred = net(torch.from_numpy(x[val_idx])).numpy()
        return float(np.mean((pred - gold[val_idx]) ** 2))

    baseline = None
    if n_val:
        baseline = float(np.mean((gold[train_idx].mean() - gold[val_idx]) ** 2))
    mse_init = val_mse()

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.MSELoss()
    curve = []
    for epoch in range(cfg.epochs):
        net.train()
        perm = rng.permutation(len(train_idx))
        total, seen = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[i : i + cfg.batch_size].copy())
            optimizer.zero_grad()
            loss = loss_fn(net(xt[idx]), yt[idx])
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    net.eval()
    mlp.meta.update({
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "loss_curve": curve,
        "val_mse_init": mse_init,
        "val_mse_final": val_mse(),
        "val_mse_baseline": baseline,
        "n_train": len(train_idx),
        "n_val": n_val,
    })
    return mlp


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Textbook correlation; returns (value, degenerate_flag)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom == 0.0:
        return 0.0, True
    return float((da * db).sum() / denom), False


def eval_scorer(mlp: ScorerMlp, samples, encoder, provider) -> dict:
    """MSE and Pearson correlation against gold scores."""
    samples = list(samples)
    if len(samples) < 2:
        raise QualityError(f"need at least 2 samples to evaluate, got {len(samples)}")
    f_signal, f_label, gold = _extract_features(samples, encoder, provider)
    pred = mlp.score_batch(f_signal, f_label)
    mse = float(np.mean((pred - gold) ** 2))
    rho, degenerate = pearson(pred, gold)
    flags = ["pearson"] if degenerate else []
    return {"mse": mse, "pearson": rho, "n": len(samples), "flags": flags}
