"""Binary checkpoint format for named tensors.

Layout (all integers little-endian u32):

    magic "RVFG" | version | repeated records until EOF
    record: name_len | name (UTF-8) | rank | dims... | float32 data (LE)

Tensors are written in sorted name order so that identical contents always
produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVFG"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            data = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            if data.ndim:
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        out[name] = data.reshape(shape).copy()
    return out
