"""Versioned single-file model container shared by every model type.

One ``.npz`` holds a JSON header (format version, model kind, architecture
descriptor, training metadata) plus named parameter arrays. Readers reject
unknown versions or kinds up front.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__kinesis_meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    kind: str,
    descriptor: dict,
    arrays: dict[str, np.ndarray],
    extra: dict | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "descriptor": descriptor,
        "extra": extra or {},
        "array_names": sorted(arrays),
    }
    payload = {name: np.ascontiguousarray(a) for name, a in arrays.items()}
    payload[_META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path, expect_kind: str | None = None):
    """Returns (kind, descriptor, arrays, extra)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path}: not a kinesis checkpoint (missing header)")
        meta = json.loads(bytes(data[_META_KEY].tobytes()).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {meta.get('format_version')}"
            )
        if expect_kind is not None and meta["kind"] != expect_kind:
            raise CheckpointError(
                f"{path}: expected a {expect_kind!r} checkpoint, found {meta['kind']!r}"
            )
        arrays = {name: data[name] for name in meta["array_names"]}
    return meta["kind"], meta["descriptor"], arrays, meta["extra"]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    """Torch state dict -> plain float64-preserving numpy arrays."""
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}


def arrays_to_state_dict(arrays: dict[str, np.ndarray]):
    import torch

    return {k: torch.from_numpy(np.ascontiguousarray(a)) for k, a in arrays.items()}


def params_sha256(arrays: dict[str, np.ndarray]) -> str:
    """Stable digest over named arrays (order-independent)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
