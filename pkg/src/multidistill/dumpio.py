"""Binary feature dump files: the bridge for externally produced teacher features.

Layout (all little-endian, fixed offsets):

    bytes 0..3    magic "RFD1"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 record count
    bytes 16..19  u32 rows
    bytes 20..23  u32 cols
    bytes 24..27  u32 channels
    bytes 28..31  u32 summary_dim
    then, per record: summary_dim f4 values, followed by rows*cols*channels f4
    values in row-major order.

Readers and writers stream record by record; nothing requires the whole file
in memory.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .geometry import FeatureGrid

MAGIC = b"RFD1"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")
HEADER_SIZE = _HEADER.size  # 32


@dataclass(frozen=True)
class FeatureDumpHeader:
    count: int
    rows: int
    cols: int
    channels: int
    summary_dim: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.channels < 1 or self.summary_dim < 1:
            raise ValueError(
                f"degenerate dump dimensions {self.rows}x{self.cols}x{self.channels}"
                f"/{self.summary_dim}"
            )
        if self.count < 0:
            raise ValueError("negative record count")

    @property
    def record_floats(self) -> int:
        return self.rows * self.cols * self.channels + self.summary_dim

    @property
    def payload_bytes(self) -> int:
        return self.count * self.record_floats * 4


def write_dump(
    path,
    records: Iterable[tuple[np.ndarray, FeatureGrid]],
    patch: int = 16,
) -> FeatureDumpHeader:
    """Stream records to a dump file; shapes are taken from the first record.

    The count field is patched in after the stream ends, so generators of
    unknown length work.
    """
    it = iter(records)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("cannot write an empty dump") from None

    def to_f4(summary, feat):
        s = np.ascontiguousarray(np.asarray(summary), dtype="<f4")
        f = np.ascontiguousarray(feat.data, dtype="<f4")
        return s, f

    s0, f0 = to_f4(*first)
    rows, cols, channels = f0.shape
    header = FeatureDumpHeader(0, rows, cols, channels, s0.shape[0])
    count = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, rows, cols, channels, s0.shape[0]))
        for summary, feat in itertools.chain([first], it):
            s, f = to_f4(summary, feat)
            if f.shape != (rows, cols, channels) or s.shape[0] != header.summary_dim:
                raise ValueError(
                    f"record {count} shape {f.shape}/{s.shape[0]} does not match "
                    f"header {rows}x{cols}x{channels}/{header.summary_dim}"
                )
            fh.write(s.tobytes())
            fh.write(f.tobytes())
            count += 1
        fh.seek(8)
        fh.write(struct.pack("<Q", count))
    return FeatureDumpHeader(count, rows, cols, channels, header.summary_dim)


def read_header(path) -> FeatureDumpHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"file too short for a dump header: {len(raw)} bytes")
    magic, version, count, rows, cols, channels, summary_dim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported dump version {version}, expected {VERSION}")
    return FeatureDumpHeader(count, rows, cols, channels, summary_dim)


def read_dump(path, patch: int = 16) -> Iterator[tuple[np.ndarray, FeatureGrid]]:
    """Yield (summary, FeatureGrid) records one at a time.

    The payload length is validated against the header before the first
    record is yielded, so truncation surfaces immediately.
    """
    header = read_header(path)
    actual = os.path.getsize(path) - HEADER_SIZE
    if actual != header.payload_bytes:
        raise ValueError(
            f"truncated or padded dump: header implies {header.payload_bytes} "
            f"payload bytes, file has {actual}"
        )
    n_sum = header.summary_dim
    n_feat = header.rows * header.cols * header.channels
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        for _ in range(header.count):
            buf = fh.read((n_sum + n_feat) * 4)
            rec = np.frombuffer(buf, dtype="<f4")
            summary = rec[:n_sum].copy()
            feats = rec[n_sum:].reshape(header.rows, header.cols, header.channels).copy()
            yield summary, FeatureGrid(feats, patch)
