"""Versioned plain-text tensor container.

    HYPERMESH-CKPT v1
    <name> shape <d0> <d1> ...
    <row-major float64 values separated by spaces>
    ...

Values are written with ``repr`` so reading them back is exact.
"""
from __future__ import annotations

from pathlib import Path

import torch

HEADER = "HYPERMESH-CKPT v1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, torch.Tensor]) -> str:
    lines = [HEADER]
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        t = t.detach().to(torch.float64)
        lines.append(" ".join([name, "shape", *map(str, t.shape)]))
        lines.append(" ".join(repr(float(x)) for x in t.reshape(-1).tolist()))
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, torch.Tensor]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        found = lines[0].strip() if lines else "<empty>"
        raise CheckpointError(f"unsupported checkpoint header {found!r}, expected {HEADER!r}")
    out: dict[str, torch.Tensor] = {}
    body = lines[1:]
    if len(body) % 2:
        raise CheckpointError("truncated checkpoint")
    for head, values in zip(body[::2], body[1::2]):
        parts = head.split()
        if len(parts) < 2 or parts[1] != "shape":
            raise CheckpointError(f"malformed tensor header {head!r}")
        shape = tuple(int(d) for d in parts[2:])
        data = [float(x) for x in values.split()]
        t = torch.tensor(data, dtype=torch.float64)
        if t.numel() != torch.Size(shape).numel():
            raise CheckpointError(f"{parts[0]}: {t.numel()} values for shape {shape}")
        out[parts[0]] = t.reshape(shape)
    return out


def save(path, tensors: dict[str, torch.Tensor]) -> None:
    Path(path).write_text(dumps(tensors))


def load(path) -> dict[str, torch.Tensor]:
    return loads(Path(path).read_text())
