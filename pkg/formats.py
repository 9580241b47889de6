"""
On-disk formats.

EmbeddingFile (little-endian):
    header   : magic b"BAGF", u16 version, u16 dtype code (1 = f32), u32 dim, u32 item count
    per item : u32 id length, UTF-8 id, u32 row count, rows x dim f32 payload,
               ceil(rows / 8) bytes validity bitmap (little bit order)
Row 0 of each item is its CLS vector; rows 1.. form the late-interaction
matrix. Values are widened to float64 on load.
"""

from __future__ import annotations

import logging
import struct
from typing import BinaryIO, Iterable, List, Sequence

import numpy as np
import pandas as pd

from embedding_core import EmbeddingMatrix
from errors import DimMismatchError, FormatError
from similarity import ItemEmbedding, PaddingMask, SimilarityMatrix

logger = logging.getLogger(__name__)

MAGIC = b"BAGF"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sHHII")
U32 = struct.Struct("<I")


def _item_rows(item: ItemEmbedding):
    rows = item.cls[None, :]
    valid = np.ones(1, dtype=bool)
    if item.late is not None:
        rows = np.vstack([rows, item.late.data])
        valid = np.concatenate([valid, item.mask.valid])
    return rows, valid


def write_embedding_file(path: str, items: Sequence[ItemEmbedding]) -> None:
    dims = {item.dim for item in items}
    if len(dims) > 1:
        raise DimMismatchError(f"items disagree on dimension: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, dim, len(items)))
        for item in items:
            raw_id = item.item_id.encode("utf-8")
            rows, valid = _item_rows(item)
            f.write(U32.pack(len(raw_id)))
            f.write(raw_id)
            f.write(U32.pack(rows.shape[0]))
            f.write(rows.astype("<f4").tobytes())
            f.write(np.packbits(valid, bitorder="little").tobytes())
    logger.debug("wrote %d items (dim %d) to %s", len(items), dim, path)


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated file while reading {what}")
    return data


def read_embedding_file(path: str) -> List[ItemEmbedding]:
    with open(path, "rb") as f:
        magic, version, dtype, dim, count = HEADER.unpack(_read_exact(f, HEADER.size, "header"))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise FormatError(f"{path}: unsupported dtype code {dtype}")
        items = []
        for _ in range(count):
            (id_len,) = U32.unpack(_read_exact(f, U32.size, "id length"))
            try:
                item_id = _read_exact(f, id_len, "id").decode("utf-8")
            except UnicodeDecodeError as e:
                raise FormatError(f"{path}: item id is not UTF-8 ({e})")
            (rows,) = U32.unpack(_read_exact(f, U32.size, "row count"))
            if rows < 1:
                raise FormatError(f"{path}: item {item_id!r} has no CLS row")
            payload = _read_exact(f, rows * dim * 4, f"payload of {item_id!r}")
            data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
            bitmap = np.frombuffer(_read_exact(f, (rows + 7) // 8, "bitmap"), dtype=np.uint8)
            valid = np.unpackbits(bitmap, count=rows, bitorder="little").astype(bool)
            late = mask = None
            if rows > 1:
                late = EmbeddingMatrix(data[1:])
                mask = PaddingMask(valid[1:])
            items.append(ItemEmbedding(item_id, data[0], late, mask))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} items")
    return items


def write_matrix_csv(path: str, matrix: SimilarityMatrix) -> None:
    frame = pd.DataFrame(matrix.scores,
                         index=pd.Index(matrix.query_ids or range(matrix.queries), name="query"),
                         columns=matrix.candidate_ids or range(matrix.candidates))
    frame.to_csv(path, float_format="%.17g")


def read_matrix_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, index_col=0)


def write_loss_csv(path: str, curve: Iterable) -> None:
    frame = pd.DataFrame([(e.epoch, e.l_itc, e.l_bwc, e.tau) for e in curve],
                         columns=["epoch", "l_itc", "l_bwc", "tau"])
    frame.to_csv(path, index=False, float_format="%.10g")


def write_pgm(path: str, heat: np.ndarray) -> None:
    """Plain (P2) grayscale image, min-max scaled to 0..255 per map."""
    heat = np.asarray(heat, dtype=np.float64)
    low, high = float(heat.min()), float(heat.max())
    if high > low:
        pixels = np.rint((heat - low) / (high - low) * 255).astype(int)
    else:
        pixels = np.zeros(heat.shape, dtype=int)
    height, width = heat.shape
    with open(path, "w", encoding="ascii") as f:
        f.write(f"P2\n{width} {height}\n255\n")
        for row in pixels:
            f.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        tokens = f.read().split()
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: not a plain PGM file")
    width, height = int(tokens[1]), int(tokens[2])
    values = np.array([int(t) for t in tokens[4:]], dtype=int)
    if values.size != width * height:
        raise FormatError(f"{path}: expected {width * height} pixels, got {values.size}")
    return values.reshape(height, width)


def write_heatmap(prefix: str, heat: np.ndarray) -> None:
    """``<prefix>.pgm`` plus ``<prefix>.txt`` holding the raw values."""
    write_pgm(f"{prefix}.pgm", heat)
    np.savetxt(f"{prefix}.txt", heat, fmt="%.17g")
