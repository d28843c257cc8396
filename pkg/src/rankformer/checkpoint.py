"""Embedding checkpoints.

Layout: a 16-byte little-endian header ``magic(4s) n(u32) m(u32) d(u32)``
followed by ``(n+m)*d`` little-endian float32 values, row-major, users first.
A ``<file>.manifest`` sidecar holds ``key=value`` lines (config, version).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RKF1"
_HEADER = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    pass


def save_embeddings(path: str | Path, Z, n: int, m: int, manifest: Mapping[str, object] | None = None) -> None:
    Z = np.asarray(Z.detach().cpu() if hasattr(Z, "detach") else Z)
    if Z.ndim != 2 or Z.shape[0] != n + m:
        raise CheckpointError(f"expected ({n + m}, d) matrix, got {Z.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, m, Z.shape[1]))
        fh.write(np.ascontiguousarray(Z, dtype="<f4").tobytes())
    if manifest is not None:
        write_key_values(path.with_name(path.name + ".manifest"), manifest)


def load_embeddings(path: str | Path) -> tuple[np.ndarray, int, int]:
    """Return ``(Z, n, m)`` with ``Z`` as float32 of shape ``(n+m, d)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, n, m, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * (n + m) * d
    if len(raw) != expected:
        raise CheckpointError(f"size {len(raw)} != expected {expected}")
    Z = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n + m, d).copy()
    return Z, n, m


def write_key_values(path: str | Path, values: Mapping[str, object]) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _fmt(v: object) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)
