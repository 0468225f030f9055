"""RFCT tensor files and checkpoint directories.

Layout of one file: ``b"RFCT"``, u32 rank, ``rank`` u32 extents, then the
values as f64, all little-endian and row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import RFCTFormatError

MAGIC = b"RFCT"


def encode(array) -> bytes:
    # ascontiguousarray would promote a 0-d array to shape (1,)
    arr = np.array(array, dtype="<f8", order="C")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise RFCTFormatError("bad magic, not an RFCT tensor")
    if len(blob) < 8:
        raise RFCTFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    end = 8 + 4 * rank
    if len(blob) < end:
        raise RFCTFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != end + 8 * count:
        raise RFCTFormatError(f"expected {count} values, file holds {(len(blob) - end) / 8}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=end).reshape(shape).astype(np.float64)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_checkpoint(directory, tensors: dict[str, np.ndarray]) -> None:
    """Write ``manifest.txt`` plus one ``<name>.rfct`` per entry, in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        lines.append(" ".join([name, str(value.ndim), *map(str, value.shape)]))
        save(directory / f"{name}.rfct", value)
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out: dict[str, np.ndarray] = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, rank, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        if len(shape) != int(rank):
            raise RFCTFormatError(f"manifest line for {name!r} has inconsistent rank")
        value = load(directory / f"{name}.rfct")
        if value.shape != shape:
            raise RFCTFormatError(f"{name}: manifest shape {shape}, file shape {value.shape}")
        out[name] = value
    return out
