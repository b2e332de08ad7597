"""Checkpoint directory IO: the params.bin tensor format and JSON side files."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch


def write_params(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    """Records of: name (u32 length + UTF-8), rank u32, dims u32[rank], float32 data; little-endian."""
    with open(path, "wb") as f:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().to(torch.float64).numpy().astype("<f4"))
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("params file truncated")
    return b


def read_params(path: str | Path) -> dict[str, torch.Tensor]:
    out = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("params file truncated")
            (n,) = struct.unpack("<I", head)
            name = _read_exact(f, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
            out[name] = torch.from_numpy(data.copy())
    return out


def save_state(model: torch.nn.Module, path: str | Path) -> None:
    write_params(path, model.state_dict())


def load_state(model: torch.nn.Module, path: str | Path) -> None:
    stored = read_params(path)
    own = model.state_dict()
    missing = sorted(set(own) - set(stored))
    extra = sorted(set(stored) - set(own))
    if missing or extra:
        raise ValueError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    model.load_state_dict({k: stored[k].to(own[k].dtype) for k in own})


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
