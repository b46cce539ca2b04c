"""On-disk formats: FGT1 tensor container, checkpoint manifests, atomic writes.

FGT1 layout: magic b"FGT1", rank as u32 little-endian, each dimension as
u32 little-endian, then the data as little-endian float32, row-major.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FGT1"


def write_fgt(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.float32)
    payload = MAGIC + struct.pack("<I", array.ndim)
    payload += struct.pack(f"<{array.ndim}I", *array.shape)
    payload += array.astype("<f4").tobytes()
    atomic_write_bytes(path, payload)


def read_fgt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an FGT1 file (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise ValueError(f"{path}: truncated FGT1 payload")
    return data.reshape(shape).astype(np.float32)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(directory, params: dict) -> None:
    """Persist named parameters: a manifest plus one FGT1 file per entry.

    ``params`` maps name -> Tensor (or ndarray).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        fname = name.replace("/", "_").replace(".", "_") + ".fgt"
        arr = getattr(params[name], "data", params[name])
        write_fgt(directory / fname, np.asarray(arr))
        lines.append(f"{name} {fname}")
    atomic_write_text(directory / "manifest.txt", "\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict:
    """Read a manifest directory back into {name: ndarray}."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    out = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        name, fname = line.split(" ", 1)
        out[name] = read_fgt(directory / fname)
    return out
