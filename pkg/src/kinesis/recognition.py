"""Activity recognition: contrastive signal encoder aligned to frozen label
embeddings, similarity classification, and LoRA few-shot fine-tuning.

The signal encoder is a small transformer over frame patches whose output is
pulled toward a frozen text-embedding space during training, so any label the
text side can embed becomes a classification candidate.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
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
from .lora import LoraConfig, LoraError, LoraLinear
from .signals import N_CHANNELS, NormStats, fit_norm_stats, normalize_values, sequence_from_values

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "signal_encoder"


class RecognitionError(ValueError):
    pass


class MissingLabelError(RecognitionError):
    def __init__(self, label: str):
        super().__init__(f"label {label!r} has no embedding in this provider")
        self.label = label


class FrozenParameterError(RecognitionError):
    pass


class LabelSet:
    """Ordered distinct label strings; order defines the classify tie-break."""

    def __init__(self, labels):
        labels = list(labels)
        if not labels:
            raise RecognitionError("label set must be nonempty")
        if len(set(labels)) != len(labels):
            raise RecognitionError("label set contains duplicates")
        self._labels = tuple(labels)

    def __iter__(self):
        return iter(self._labels)

    def __len__(self):
        return len(self._labels)

    def __getitem__(self, i):
        return self._labels[i]

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self._labels == other._labels

    def index(self, label: str) -> int:
        return self._labels.index(label)

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-12)


# ---------------------------------------------------------------------------
# Frozen text-embedding providers
# ---------------------------------------------------------------------------


class SeededRandomProvider:
    """Deterministic label -> unit vector map; stands in for a real text encoder.

    The mapping is a pure function of (seed, dim, label), so it is frozen by
    construction and never updated by training.
    """

    kind = "seeded"

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, label: str) -> np.ndarray:
        if label not in self._cache:
            digest = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
            rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
            vec = l2_normalize(rng.standard_normal(self.dim))
            vec.setflags(write=False)
            self._cache[label] = vec
        return self._cache[label]

    def fingerprint(self) -> str:
        return hashlib.sha256(f"seeded:{self.dim}:{self.seed}".encode()).hexdigest()


class PrecomputedTableProvider:
    """Label embeddings loaded from a table file (e.g. exported CLIP vectors).

    File format: first line ``<dim>\\t<count>``, then one ``label\\tv1,...,vd``
    row per label.
    """

    kind = "table"

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.dim = dim
        self._table = {}
        for label, vec in table.items():
            vec = np.asarray(vec, dtype=np.float64).copy()
            if vec.shape != (dim,):
                raise RecognitionError(f"embedding for {label!r} has shape {vec.shape}")
            norm = float(np.linalg.norm(vec))
            # only rescale when needed so save/load keeps exact bytes
            if abs(norm - 1.0) > 1e-9:
                vec = vec / max(norm, 1e-12)
            vec.setflags(write=False)
            self._table[label] = vec

    def embed(self, label: str) -> np.ndarray:
        if label not in self._table:
            raise MissingLabelError(label)
        return self._table[label]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for label in sorted(self._table):
            h.update(label.encode("utf-8"))
            h.update(self._table[label].tobytes())
        return h.hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "PrecomputedTableProvider":
        lines = Path(path).read_text().splitlines()
        dim, count = (int(x) for x in lines[0].split("\t"))
        table = {}
        for line in lines[1 : 1 + count]:
            label, values = line.split("\t")
            table[label] = np.array([float(x) for x in values.split(",")])
        return cls(table, dim)

    def save(self, path: str | Path) -> None:
        lines = [f"{self.dim}\t{len(self._table)}"]
        for label in sorted(self._table):
            lines.append(label + "\t" + ",".join(repr(float(x)) for x in self._table[label]))
        Path(path).write_text("\n".join(lines) + "\n")


def embed_labels(provider, labels) -> np.ndarray:
    """Matrix of unit-norm label embeddings, row i for label i."""
    return np.stack([provider.embed(label) for label in labels])


def classify(f_s: np.ndarray, label_matrix: np.ndarray, labels: LabelSet):
    """Nearest label by cosine similarity; ties go to the lowest label index.

    Returns (predicted_label, similarities) with similarities in [-1, 1].
    """
    f = l2_normalize(np.asarray(f_s, dtype=np.float64))
    m = np.asarray(label_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != f.shape[-1]:
        raise RecognitionError(
            f"label matrix {m.shape} incompatible with embedding dim {f.shape[-1]}"
        )
    if m.shape[0] != len(labels):
        raise RecognitionError(f"{m.shape[0]} rows for {len(labels)} labels")
    sims = l2_normalize(m) @ f
    return labels[int(np.argmax(sims))], sims


# ---------------------------------------------------------------------------
# Transformer signal encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderArch:
    dim: int = 512  # shared embedding dimension
    width: int = 128
    layers: int = 6
    heads: int = 4
    mlp_ratio: int = 2
    patch_len: int = 10  # frames per token
    max_frames: int = 1500
    in_channels: int = N_CHANNELS

    @property
    def max_tokens(self) -> int:
        return self.max_frames // self.patch_len

    def to_dict(self) -> dict:
        return {
            "dim": self.dim, "width": self.width, "layers": self.layers,
            "heads": self.heads, "mlp_ratio": self.mlp_ratio,
            "patch_len": self.patch_len, "max_frames": self.max_frames,
            "in_channels": self.in_channels,
        }


class _Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.o_proj = nn.Linear(width, width)

    def forward(self, x, pad):  # x (B,T,W), pad (B,T) True where padded
        b, t, w = x.shape

        def split(z):
            return z.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, w)
        return self.o_proj(out)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = _Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(),
            nn.Linear(width * mlp_ratio, width),
        )

    def forward(self, x, pad):
        x = x + self.attn(self.ln1(x), pad)
        x = x + self.mlp(self.ln2(x))
        return x


class _EncoderNet(nn.Module):
    def __init__(self, arch: EncoderArch):
        super().__init__()
        self.patch_proj = nn.Linear(arch.patch_len * arch.in_channels, arch.width)
        self.pos = nn.Parameter(torch.zeros(arch.max_tokens, arch.width))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            _Block(arch.width, arch.heads, arch.mlp_ratio) for _ in range(arch.layers)
        )
        self.ln_final = nn.LayerNorm(arch.width)
        self.out_proj = nn.Linear(arch.width, arch.dim)

    def forward(self, tokens, pad):  # tokens (B,T,patch*C), pad (B,T)
        x = self.patch_proj(tokens) + self.pos[: tokens.shape[1]]
        for block in self.blocks:
            x = block(x, pad)
        x = self.ln_final(x)
        keep = (~pad).float().unsqueeze(-1)
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        z = self.out_proj(pooled)
        return z / z.norm(dim=-1, keepdim=True).clamp(min=1e-12)


class SignalEncoder:
    """Signal-to-embedding model; immutable once training is done.

    After :func:`inject_lora` the base weights are frozen (requires_grad off
    and guarded by :meth:`set_parameter`); only adapter matrices may train.
    """

    def __init__(self, net: _EncoderNet, arch: EncoderArch,
                 norm_stats: NormStats | None = None,
                 lora: LoraConfig | None = None, meta: dict | None = None):
        self.net = net.eval()
        self.arch = arch
        self.norm_stats = norm_stats
        self.lora = lora
        self.meta = meta or {}

    @classmethod
    def create(cls, arch: EncoderArch = EncoderArch(), seed: int = 0) -> "SignalEncoder":
        torch.manual_seed(seed)
        return cls(_EncoderNet(arch), arch, meta={"init_seed": seed})

    @property
    def dim(self) -> int:
        return self.arch.dim

    # -- tokenization -------------------------------------------------------

    def _prepare(self, segment, n_valid: int | None) -> np.ndarray:
        values = getattr(segment, "values", segment)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.arch.in_channels:
            raise RecognitionError(
                f"segment must be (N, {self.arch.in_channels}), got {values.shape}"
            )
        if n_valid is not None:
            values = values[:n_valid]
        if values.shape[0] == 0:
            raise RecognitionError("cannot embed an empty segment")
        if values.shape[0] > self.arch.max_frames:
            warnings.warn(
                f"segment of {values.shape[0]} frames truncated to {self.arch.max_frames}",
                stacklevel=3,
            )
            values = values[: self.arch.max_frames]
        return normalize_values(values, self.norm_stats)

    def _tokenize(self, normalized: np.ndarray) -> tuple[np.ndarray, int]:
        p = self.arch.patch_len
        n = normalized.shape[0]
        n_tokens = -(-n // p)
        padded = np.zeros((n_tokens * p, normalized.shape[1]))
        padded[:n] = normalized
        return padded.reshape(n_tokens, p * normalized.shape[1]), n_tokens

    # -- embedding ----------------------------------------------------------

    def embed_batch(self, segments, n_valid=None) -> np.ndarray:
        token_arrays, lengths = [], []
        for i, seg in enumerate(segments):
            nv = n_valid[i] if n_valid is not None else None
            tokens, t = self._tokenize(self._prepare(seg, nv))
            token_arrays.append(tokens)
            lengths.append(t)
        t_max = max(lengths)
        batch = np.zeros((len(token_arrays), t_max, token_arrays[0].shape[1]), dtype=np.float32)
        pad = np.ones((len(token_arrays), t_max), dtype=bool)
        for i, (tokens, t) in enumerate(zip(token_arrays, lengths)):
            batch[i, :t] = tokens
            pad[i, :t] = False
        with torch.no_grad():
            z = self.net(torch.from_numpy(batch), torch.from_numpy(pad))
        return l2_normalize(z.numpy().astype(np.float64))

    def embed(self, segment, n_valid: int | None = None) -> np.ndarray:
        return self.embed_batch([segment], [n_valid] if n_valid is not None else None)[0]

    # -- parameter management -----------------------------------------------

    def base_state_arrays(self) -> dict[str, np.ndarray]:
        state = state_dict_to_arrays(self.net.state_dict())
        # Adapter wrapping renames q_proj.weight -> q_proj.base.weight; strip
        # that so the base hash is stable across injection.
        return {
            k.replace(".base.", "."): v for k, v in state.items() if "lora_" not in k
        }

    def base_param_hash(self) -> str:
        return params_sha256(self.base_state_arrays())

    def param_hash(self) -> str:
        return params_sha256(state_dict_to_arrays(self.net.state_dict()))

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters() if p.requires_grad)

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        """Overwrite one named parameter; frozen base params reject writes."""
        params = dict(self.net.named_parameters())
        if name not in params:
            raise RecognitionError(f"unknown parameter {name!r}")
        if self.lora is not None and "lora_" not in name:
            raise FrozenParameterError(
                f"base parameter {name!r} is frozen while adapters are attached"
            )
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(np.asarray(value, dtype=np.float32)))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = state_dict_to_arrays(self.net.state_dict())
        if self.norm_stats is not None:
            arrays["norm.mean"] = np.asarray(self.norm_stats.mean)
            arrays["norm.std"] = np.asarray(self.norm_stats.std)
        descriptor = {
            "arch": self.arch.to_dict(),
            "has_norm": self.norm_stats is not None,
            "lora": None if self.lora is None else {
                "rank": self.lora.rank,
                "alpha": self.lora.alpha,
                "targets": list(self.lora.targets),
            },
        }
        save_checkpoint(path, CHECKPOINT_KIND, descriptor, arrays, extra=self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "SignalEncoder":
        _, desc, arrays, extra = load_checkpoint(path, expect_kind=CHECKPOINT_KIND)
        arch = EncoderArch(**desc["arch"])
        norm = None
        if desc.get("has_norm"):
            norm = NormStats(mean=arrays.pop("norm.mean"), std=arrays.pop("norm.std"))
        net = _EncoderNet(arch)
        encoder = cls(net, arch, norm_stats=norm, meta=extra)
        if desc.get("lora"):
            lora_desc = desc["lora"]
            cfg = LoraConfig(rank=lora_desc["rank"], alpha=lora_desc["alpha"],
                             targets=tuple(lora_desc["targets"]))
            inject_lora(encoder, cfg)
        encoder.net.load_state_dict(arrays_to_state_dict(arrays))
        return encoder


def embed_signal(encoder: SignalEncoder, segment, n_valid: int | None = None) -> np.ndarray:
    """Unit-norm embedding of one segment (pure in encoder params and input)."""
    return encoder.embed(segment, n_valid=n_valid)


# ---------------------------------------------------------------------------
# LoRA injection / merging
# ---------------------------------------------------------------------------


def inject_lora(encoder: SignalEncoder, cfg: LoraConfig, seed: int = 0) -> SignalEncoder:
    """Attach adapters to the configured attention projections; freeze the base."""
    if encoder.lora is not None:
        raise LoraError("adapters already injected")
    for target in cfg.targets:
        if not hasattr(encoder.net.blocks[0].attn, target):
            raise LoraError(f"target projection {target!r} not found in architecture")
    for p in encoder.net.parameters():
        p.requires_grad_(False)
    torch.manual_seed(seed)
    for block in encoder.net.blocks:
        for target in cfg.targets:
            base = getattr(block.attn, target)
            setattr(block.attn, target, LoraLinear(base, cfg))
    encoder.lora = cfg
    return encoder


def merge_lora(encoder: SignalEncoder) -> SignalEncoder:
    """Fold adapters into the base weights and drop them; unfreezes the result."""
    if encoder.lora is None:
        raise LoraError("no adapters to merge")
    for block in encoder.net.blocks:
        for target in encoder.lora.targets:
            layer = getattr(block.attn, target)
            setattr(block.attn, target, layer.merged_linear())
    for p in encoder.net.parameters():
        p.requires_grad_(True)
    encoder.lora = None
    return encoder


# ---------------------------------------------------------------------------
# Contrastive training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (self.temperature > 0):
            raise RecognitionError(f"temperature must be > 0, got {self.temperature}")


def contrastive_loss(z: torch.Tensor, t: torch.Tensor, labels: list[str],
                     temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch pairs; same-label pairs are positives.

    With all-distinct labels this reduces to the usual CLIP-style loss, whose
    value at initialization is about ln(batch).
    """
    logits = (z @ t.T) / temperature
    same = torch.tensor(
        [[a == b for b in labels] for a in labels], dtype=torch.float32, device=z.device
    )

    def directional(lg, pos):
        p = pos / pos.sum(dim=1, keepdim=True)
        return -(p * torch.log_softmax(lg, dim=1)).sum(dim=1).mean()

    return 0.5 * (directional(logits, same) + directional(logits.T, same.T))


def _dataset_tensors(encoder: SignalEncoder, samples, provider):
    tokens_list, lengths, labels, targets = [], [], [], []
    for segment, label in samples:
        tokens, t = encoder._tokenize(encoder._prepare(segment, None))
        tokens_list.append(tokens)
        lengths.append(t)
        labels.append(label)
        targets.append(provider.embed(label))
    t_max = max(lengths)
    batch = np.zeros((len(tokens_list), t_max, tokens_list[0].shape[1]), dtype=np.float32)
    pad = np.ones((len(tokens_list), t_max), dtype=bool)
    for i, (tokens, t) in enumerate(zip(tokens_list, lengths)):
        batch[i, :t] = tokens
        pad[i, :t] = False
    return (
        torch.from_numpy(batch),
        torch.from_numpy(pad),
        labels,
        torch.from_numpy(np.stack(targets).astype(np.float32)),
    )


def _run_contrastive(encoder: SignalEncoder, samples, provider,
                     cfg: ContrastiveConfig, tag: str) -> dict:
    if not samples:
        raise RecognitionError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * cfg.val_fraction)) if len(samples) > 3 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_samples = [samples[i] for i in train_idx]
    val_samples = [samples[i] for i in val_idx]

    x, pad, labels, targets = _dataset_tensors(encoder, train_samples, provider)
    if val_samples:
        xv, padv, labels_v, targets_v = _dataset_tensors(encoder, val_samples, provider)

    net = encoder.net

    def val_loss() -> float | None:
        if not val_samples:
            return None
        net.eval()
        with torch.no_grad():
            z = net(xv, padv)
            return float(contrastive_loss(z, targets_v, labels_v, cfg.temperature))

    loss_init = val_loss()
    trainable = [p for p in net.parameters() if p.requires_grad]
    if not trainable:
        raise RecognitionError("encoder has no trainable parameters")
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        net.train()
        perm = rng.permutation(len(train_samples))
        total, seen = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if len(idx) < 2:
                continue  # a singleton batch has no negatives
            tidx = torch.from_numpy(idx.copy())
            optimizer.zero_grad()
            z = net(x[tidx], pad[tidx])
            loss = contrastive_loss(z, targets[tidx], [labels[j] for j in idx],
                                    cfg.temperature)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        curve.append(total / max(seen, 1))
        logger.info("%s epoch %d/%d loss=%.4f", tag, epoch + 1, cfg.epochs, curve[-1])
    net.eval()
    return {"loss_curve": curve, "val_loss_init": loss_init, "val_loss_final": val_loss(),
            "seed": cfg.seed, "epochs": cfg.epochs}


def pretrain_contrastive(encoder: SignalEncoder, dataset, provider,
                         cfg: ContrastiveConfig) -> SignalEncoder:
    """Align the encoder to the provider's frozen label space.

    ``dataset`` is a list of (segment, label) pairs. The provider is never
    written; its fingerprint is unchanged by training.
    """
    if encoder.norm_stats is None and dataset:
        sequences = [
            seg if hasattr(seg, "values") else sequence_from_values(seg)
            for seg, _ in dataset
        ]
        encoder.norm_stats = fit_norm_stats(sequences)
    stats = _run_contrastive(encoder, list(dataset), provider, cfg, "pretrain")
    encoder.meta = {**encoder.meta, "pretrain": stats}
    return encoder


def finetune_kshot(encoder: SignalEncoder, samples, provider,
                   cfg: ContrastiveConfig, k: int) -> SignalEncoder:
    """Adapter-only contrastive fine-tuning on exactly ``k`` samples per class."""
    if encoder.lora is None:
        raise LoraError("inject adapters before K-shot fine-tuning")
    counts: dict[str, int] = {}
    for _, label in samples:
        counts[label] = counts.get(label, 0) + 1
    wrong = sorted(lab for lab, c in counts.items() if c != k)
    if wrong:
        detail = ", ".join(f"{lab}={counts[lab]}" for lab in wrong)
        raise RecognitionError(f"expected exactly {k} samples per class; got {detail}")

    base_hash = encoder.base_param_hash()
    stats = _run_contrastive(encoder, list(samples), provider, cfg, "finetune")
    if encoder.base_param_hash() != base_hash:
        raise FrozenParameterError("base parameters changed during fine-tuning")
    encoder.meta = {**encoder.meta, "finetune": {**stats, "k": k}}
    return encoder


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_recognition(encoder: SignalEncoder, provider, test_set, labels: LabelSet) -> dict:
    """Overall and per-class accuracy/F1 plus a confusion matrix."""
    test_set = list(test_set)
    if not test_set:
        raise RecognitionError("test set is empty")
    matrix = embed_labels(provider, labels)
    segments = [seg for seg, _ in test_set]
    golds = [label for _, label in test_set]
    embeddings = encoder.embed_batch(segments)
    n = len(labels)
    confusion = np.zeros((n, n), dtype=np.int64)
    for emb, gold in zip(embeddings, golds):
        pred, _ = classify(emb, matrix, labels)
        confusion[labels.index(gold), labels.index(pred)] += 1

    per_class = {}
    f1s, accs = [], []
    for i, label in enumerate(labels):
        support = int(confusion[i].sum())
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = support - tp
        acc = tp / support if support else 0.0
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class[label] = {"accuracy": acc, "f1": f1, "support": support}
        if support:
            accs.append(acc)
            f1s.append(f1)
    overall = float(np.trace(confusion)) / len(test_set)
    return {
        "overall_accuracy": overall,
        "macro_accuracy": float(np.mean(accs)) if accs else 0.0,
        "macro_f1": float(np.mean(f1s)) if f1s else 0.0,
        "per_class": per_class,
        "confusion": confusion,
    }


def write_confusion_csv(confusion: np.ndarray, labels: LabelSet, path: str | Path) -> None:
    lines = ["," + ",".join(labels)]
    for i, label in enumerate(labels):
        lines.append(label + "," + ",".join(str(int(x)) for x in confusion[i]))
    Path(path).write_text("\n".join(lines) + "\n")
