"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian tensor bytes. The header maps each tensor name to
its dtype, shape and byte offset (relative to the end of the header) and
echoes the model config and seed.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PSEDCKP1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], meta: dict) -> None:
    tensors, blobs, offset = {}, [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        tensors[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": tensors}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    state = {}
    for name, info in header["tensors"].items():
        start = base + info["offset"]
        arr = np.frombuffer(raw[start : start + info["nbytes"]], dtype=_DTYPES[info["dtype"]])
        state[name] = torch.from_numpy(arr.reshape(info["shape"]).astype(info["dtype"]))
    return state, header["meta"]


def save_model(path, model: torch.nn.Module, kind: str, config: dict, seed: int, extra: dict | None = None) -> None:
    meta = {"kind": kind, "config": config, "seed": seed, **(extra or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, expect_kind: str | None = None):
    """Rebuild a :class:`PseNet`/:class:`PvadNet` from a checkpoint; returns (model, meta)."""
    from .model import build_model

    state, meta = load_checkpoint(path)
    kind = meta["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    model = build_model(kind, meta["config"])
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ValueError(f"{path}: parameters do not match the stored config: {exc}") from exc
    if any(v.dtype == torch.float64 for v in state.values()):
        model = model.double()
    model.eval()
    return model, meta
