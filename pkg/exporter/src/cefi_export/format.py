"""Writer for the engine's binary feature-file format.

Layout (little-endian): magic ``CEFI``, u16 version = 1, u8 dtype
(0 = float32), u8 flags (bit 0: labels present), u64 rows, u64 cols,
row-major float32 data, rows x u32 sample ids, then rows x u32 labels when
flagged. This is the only interface shared with the inference engine, so the
byte layout here must stay exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CEFI"
VERSION = 1
FLAG_LABELS = 0x01

_HEADER = struct.Struct("<4sHBBQQ")


def write_feature_file(path, features: np.ndarray, ids: np.ndarray,
                       labels: np.ndarray | None = None) -> None:
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {f.shape}")
    rows, cols = f.shape
    ids_arr = np.ascontiguousarray(ids, dtype="<u4")
    if ids_arr.shape != (rows,):
        raise ValueError(f"need {rows} ids, got shape {ids_arr.shape}")
    flags = 0
    blobs = [f.tobytes(), ids_arr.tobytes()]
    if labels is not None:
        lab = np.ascontiguousarray(labels, dtype="<u4")
        if lab.shape != (rows,):
            raise ValueError(f"need {rows} labels, got shape {lab.shape}")
        flags |= FLAG_LABELS
        blobs.append(lab.tobytes())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, flags, rows, cols))
        for blob in blobs:
            fh.write(blob)
