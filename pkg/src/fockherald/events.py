"""Detection-event containers and their on-disk formats.

Two record streams flow through the toolkit: calibrated detection events
(electrons with an energy loss, photons on channel A or B) and raw camera
pixel hits.  Both are stored as time-sorted numpy structured arrays and
serialize to fixed-width little-endian binary files that are trivially
seekable (constant record size, 8-byte magic header).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

EVENT_MAGIC = b"EHPEVT01"
PIXEL_MAGIC = b"EHPPIX01"

KIND_ELECTRON = 0
KIND_PHOTON = 1
CHANNEL_A = 0
CHANNEL_B = 1

FLAG_ENERGY_CLIPPED = 0x01

# 16-byte event record: u8 kind, u8 channel, u16 flags, i64 time (ps), f32 energy (eV)
EVENT_DTYPE = np.dtype(
    [
        ("kind", "<u1"),
        ("channel", "<u1"),
        ("flags", "<u2"),
        ("time", "<i8"),
        ("energy", "<f4"),
    ]
)
assert EVENT_DTYPE.itemsize == 16

# 12-byte pixel record: u16 x, u16 y, i64 time (ps)
PIXEL_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("time", "<i8")])
assert PIXEL_DTYPE.itemsize == 12


class ParseError(ValueError):
    """Malformed binary stream; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class EventStream:
    """Time-ordered detection records (times in integer picoseconds)."""

    records: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=EVENT_DTYPE))

    def __post_init__(self):
        self.records = np.asarray(self.records)
        if self.records.dtype != EVENT_DTYPE:
            self.records = self.records.astype(EVENT_DTYPE)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, EventStream) and np.array_equal(self.records, other.records)

    @property
    def times(self) -> np.ndarray:
        return self.records["time"]

    def electrons(self) -> np.ndarray:
        return self.records[self.records["kind"] == KIND_ELECTRON]

    def photons(self, channel: int) -> np.ndarray:
        mask = (self.records["kind"] == KIND_PHOTON) & (self.records["channel"] == channel)
        return self.records[mask]

    def electron_times(self) -> np.ndarray:
        return self.electrons()["time"]

    def photon_times(self, channel: int) -> np.ndarray:
        return self.photons(channel)["time"]

    def validate(self) -> None:
        t = self.records["time"]
        if len(t) > 1 and np.any(np.diff(t) < 0):
            raise ValueError("event stream is not time-sorted")


@dataclass
class PixelHitStream:
    """Raw camera hits (x, y in pixels, time in integer picoseconds)."""

    records: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=PIXEL_DTYPE))

    def __post_init__(self):
        self.records = np.asarray(self.records)
        if self.records.dtype != PIXEL_DTYPE:
            self.records = self.records.astype(PIXEL_DTYPE)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, PixelHitStream) and np.array_equal(self.records, other.records)


def merge_sorted(parts: list[np.ndarray]) -> np.ndarray:
    """Stable time-sort of concatenated record arrays (ties keep input order)."""
    if not parts:
        return np.empty(0, dtype=EVENT_DTYPE)
    merged = np.concatenate(parts)
    order = np.argsort(merged["time"], kind="stable")
    return merged[order]


def write_events(stream: EventStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(EVENT_MAGIC)
        fh.write(stream.records.tobytes())


def write_pixel_hits(stream: PixelHitStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(PIXEL_MAGIC)
        fh.write(stream.records.tobytes())


def _parse_records(data: bytes, magic: bytes, dtype: np.dtype) -> np.ndarray:
    if len(data) < len(magic):
        raise ParseError("truncated header", len(data))
    if data[: len(magic)] != magic:
        raise ParseError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}", 0)
    body = len(data) - len(magic)
    if body % dtype.itemsize != 0:
        offset = len(magic) + (body // dtype.itemsize) * dtype.itemsize
        raise ParseError(f"truncated record ({body % dtype.itemsize} trailing bytes)", offset)
    return np.frombuffer(data[len(magic):], dtype=dtype).copy()


def parse_events(data: bytes) -> EventStream:
    """Decode an event file; rejects bad magic, torn records, unsorted times."""
    records = _parse_records(data, EVENT_MAGIC, EVENT_DTYPE)
    t = records["time"]
    if len(t) > 1:
        bad = np.nonzero(np.diff(t) < 0)[0]
        if bad.size:
            offset = len(EVENT_MAGIC) + int(bad[0] + 1) * EVENT_DTYPE.itemsize
            raise ParseError("records not sorted by time", offset)
    if len(records) and not np.all(np.isfinite(records["energy"])):
        idx = int(np.nonzero(~np.isfinite(records["energy"]))[0][0])
        raise ParseError("non-finite energy", len(EVENT_MAGIC) + idx * EVENT_DTYPE.itemsize)
    return EventStream(records)


def parse_pixel_hits(data: bytes) -> PixelHitStream:
    records = _parse_records(data, PIXEL_MAGIC, PIXEL_DTYPE)
    t = records["time"]
    if len(t) > 1:
        bad = np.nonzero(np.diff(t) < 0)[0]
        if bad.size:
            offset = len(PIXEL_MAGIC) + int(bad[0] + 1) * PIXEL_DTYPE.itemsize
            raise ParseError("records not sorted by time", offset)
    return PixelHitStream(records)


def read_events(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_events(fh.read())


def read_pixel_hits(path) -> PixelHitStream:
    with open(path, "rb") as fh:
        return parse_pixel_hits(fh.read())


def events_to_csv(stream: EventStream, path_or_buf) -> None:
    """CSV twin of the binary event format (same fields, header row)."""
    close = False
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        fh = open(path_or_buf, "w", newline="")
        close = True
    else:
        fh = path_or_buf
    try:
        writer = csv.writer(fh)
        writer.writerow(["kind", "channel", "flags", "time_ps", "energy_ev"])
        for rec in stream.records:
            writer.writerow(
                [int(rec["kind"]), int(rec["channel"]), int(rec["flags"]),
                 int(rec["time"]), repr(float(rec["energy"]))]
            )
    finally:
        if close:
            fh.close()


def pixel_hits_to_csv(stream: PixelHitStream, path_or_buf) -> None:
    close = False
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        fh = open(path_or_buf, "w", newline="")
        close = True
    else:
        fh = path_or_buf
    try:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "time_ps"])
        for rec in stream.records:
            writer.writerow([int(rec["x"]), int(rec["y"]), int(rec["time"])])
    finally:
        if close:
            fh.close()


def events_csv_string(stream: EventStream) -> str:
    buf = io.StringIO()
    events_to_csv(stream, buf)
    return buf.getvalue()
