"""On-disk formats: AVT1 latent tensors, weight bundles and loss traces.

AVT1 is little-endian: ``b"AVT1"``, then five ``u32`` (version, T, H, W, D),
then ``T*H*W*D`` float32 values in row-major ``(t, y, x, d)`` order.

Weight bundles (``AVW1``) store the model config as JSON followed by every
tensor in sorted-name order as float64, so equal weights give equal bytes.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

LATENT_MAGIC = b"AVT1"
LATENT_VERSION = 1
WEIGHTS_MAGIC = b"AVW1"
WEIGHTS_VERSION = 1


class FormatError(ValueError):
    """File contents do not match the expected layout."""


def write_latent(path: str | Path, video: np.ndarray) -> None:
    video = np.asarray(video)
    if video.ndim != 4:
        raise ValueError(f"latent must be (T, H, W, D), got shape {video.shape}")
    header = LATENT_MAGIC + struct.pack("<5I", LATENT_VERSION, *video.shape)
    data = np.ascontiguousarray(video, dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def read_latent(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != LATENT_MAGIC:
        raise FormatError(f"{path}: not an AVT1 file")
    version, T, H, W, D = struct.unpack("<5I", raw[4:24])
    if version != LATENT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = T * H * W * D
    if len(raw) != 24 + 4 * n:
        raise FormatError(f"{path}: expected {n} values, file holds {(len(raw) - 24) / 4:g}")
    return np.frombuffer(raw, dtype="<f4", offset=24).reshape(T, H, W, D).astype(np.float32)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_weights(path: str | Path, weights: dict[str, np.ndarray], config: dict | None = None) -> None:
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights))]
    parts.append(_pack_str(json.dumps(config or {}, sort_keys=True)))
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f8", order="C")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(weights, config_dict)``."""
    raw = memoryview(Path(path).read_bytes())
    if bytes(raw[:4]) != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weights file")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = bytes(raw[pos:pos + n]).decode("utf-8")
        pos += n
        return s

    try:
        version, count = take("<II")
        if version != WEIGHTS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        config = json.loads(take_str())
        weights = {}
        for _ in range(count):
            name = take_str()
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}")
            weights[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated file") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return weights, config


def write_loss_csv(path: str | Path, losses: Iterable[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss))])


def read_loss_csv(path: str | Path) -> list[float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]
