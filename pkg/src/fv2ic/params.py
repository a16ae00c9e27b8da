"""Parameter manifests, flat vectors and the on-disk checkpoint format.

A checkpoint is ``<stem>.json`` (names, shapes, metadata) plus ``<stem>.bin``
holding every tensor as little-endian float32, concatenated in manifest
order. The same byte layout is what the communication ledger counts.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .errors import ProtocolError

BYTES_PER_VALUE = 4  # float32 on the wire


def clone_state(state: Mapping[str, torch.Tensor]) -> OrderedDict:
    return OrderedDict((k, v.detach().clone()) for k, v in state.items())


def manifest(state: Mapping[str, torch.Tensor], prefixes: Iterable[str] | None = None) -> list[tuple[str, tuple[int, ...]]]:
    items = [(k, tuple(v.shape)) for k, v in state.items()]
    if prefixes is not None:
        prefixes = tuple(prefixes)
        items = [(k, s) for k, s in items if k.startswith(prefixes)]
    return items


def check_manifests(reference: list, other: list, who: str = "client") -> None:
    if reference != other:
        ref_names = {n for n, _ in reference}
        diff = sorted(ref_names.symmetric_difference(n for n, _ in other))
        detail = f"names differ: {diff[:4]}" if diff else "shapes differ"
        raise ProtocolError(f"{who} parameter manifest mismatch ({detail})")


def numel(man: list[tuple[str, tuple[int, ...]]]) -> int:
    return int(sum(int(np.prod(s, dtype=np.int64)) for _, s in man))


def payload_bytes(man: list[tuple[str, tuple[int, ...]]]) -> int:
    return numel(man) * BYTES_PER_VALUE


def flatten(state: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return torch.cat([v.detach().reshape(-1) for v in state.values()])


def unflatten(vec: torch.Tensor, man: list[tuple[str, tuple[int, ...]]]) -> OrderedDict:
    out = OrderedDict()
    offset = 0
    for name, shape in man:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = vec[offset : offset + n].reshape(shape).clone()
        offset += n
    if offset != vec.numel():
        raise ProtocolError(f"flat vector has {vec.numel()} values, manifest expects {offset}")
    return out


def save_checkpoint(stem: str | Path, state: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    man = manifest(state)
    blob = b"".join(v.detach().cpu().numpy().astype("<f4").tobytes(order="C") for v in state.values())
    header = {
        "format": "fv2ic-checkpoint/1",
        "dtype": "<f4",
        "params": [{"name": n, "shape": list(s)} for n, s in man],
        "bytes": len(blob),
        "meta": meta or {},
    }
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1))
    return stem.with_suffix(".json")


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[OrderedDict, dict]:
    path = Path(path)
    stem = path.with_suffix("")
    header = json.loads(stem.with_suffix(".json").read_text())
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    man = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    state = unflatten(torch.from_numpy(raw.astype(np.float32)).to(dtype), man)
    return state, header.get("meta", {})
