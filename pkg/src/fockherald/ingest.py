"""Raw-stream reconstruction: pixel clustering, energy calibration, drift removal.

Camera hits are grouped into per-electron clusters by 8-connectivity within a
temporal window (cluster position = arithmetic mean, time = earliest hit,
size capped at 10 by deterministic seeded growth).  Cluster columns map to
energy loss through the spectrometer dispersion, and slow shifts of the
zero-loss peak are removed window by window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import (
    EVENT_DTYPE,
    KIND_ELECTRON,
    EventStream,
    PixelHitStream,
    ParseError,
    parse_events,
    parse_pixel_hits,
    read_events,
    read_pixel_hits,
)

__all__ = [
    "CalibrationMap",
    "ClusteredElectrons",
    "cluster_pixel_hits",
    "calibrate_energy",
    "correct_zlp_drift",
    "DriftReport",
    "parse_events",
    "parse_pixel_hits",
    "read_events",
    "read_pixel_hits",
    "ParseError",
]

CLUSTER_DTYPE = np.dtype(
    [("x", "<f8"), ("y", "<f8"), ("time", "<i8"), ("size", "<i4")]
)

MAX_CLUSTER_SIZE = 10


@dataclass(frozen=True)
class CalibrationMap:
    dispersion: float = 0.03  # eV per pixel column
    zlp_reference: float = 257.0  # column of zero energy loss
    drift_window: float = 10.0  # s

    def __post_init__(self):
        if self.dispersion <= 0:
            raise ValueError("dispersion must be positive")


@dataclass
class ClusteredElectrons:
    """Per-electron pixel-space events recovered from camera hits."""

    records: np.ndarray

    def __len__(self) -> int:
        return len(self.records)


_NEIGHBORHOOD = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def cluster_pixel_hits(hits: PixelHitStream, window: float = 100e-9) -> ClusteredElectrons:
    """Group hits into electron clusters (8-connected, within ``window`` s).

    Oversized components are split deterministically: repeatedly grow from
    the earliest unassigned hit, adding time-then-position ordered adjacent
    hits until the 10-pixel cap.
    """
    recs = hits.records
    n = len(recs)
    if n == 0:
        return ClusteredElectrons(np.empty(0, dtype=CLUSTER_DTYPE))
    t = recs["time"]
    if np.any(np.diff(t) < 0):
        raise ValueError("pixel hits must be time-sorted")
    window_ps = int(round(window * 1e12))

    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    xs = recs["x"].astype(int)
    ys = recs["y"].astype(int)
    last_at: dict[tuple[int, int], int] = {}
    for i in range(n):
        xi, yi, ti = xs[i], ys[i], int(t[i])
        for dx, dy in _NEIGHBORHOOD:
            j = last_at.get((xi + dx, yi + dy))
            if j is not None and ti - int(t[j]) <= window_ps:
                union(i, j)
        last_at[(xi, yi)] = i

    roots = np.array([find(i) for i in range(n)])
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(roots):
        groups.setdefault(int(r), []).append(i)

    clusters: list[tuple[float, float, int, int]] = []
    for members in groups.values():
        if len(members) <= MAX_CLUSTER_SIZE:
            chunks = [members]
        else:
            chunks = _split_oversized(members, xs, ys, t, window_ps)
        for chunk in chunks:
            cx = float(np.mean(xs[chunk]))
            cy = float(np.mean(ys[chunk]))
            ct = int(np.min(t[chunk]))
            clusters.append((cx, cy, ct, len(chunk)))

    out = np.array(clusters, dtype=[("x", "<f8"), ("y", "<f8"), ("time", "<i8"), ("size", "<i4")])
    out = out[np.argsort(out["time"], kind="stable")]
    return ClusteredElectrons(out.astype(CLUSTER_DTYPE))


def _split_oversized(members: list[int], xs, ys, t, window_ps: int) -> list[list[int]]:
    """Carve a too-large component into <= 10-hit clusters by seeded growth."""
    order = sorted(members, key=lambda i: (int(t[i]), int(xs[i]), int(ys[i])))
    unassigned = set(order)
    by_pixel: dict[tuple[int, int], list[int]] = {}
    for i in order:
        by_pixel.setdefault((int(xs[i]), int(ys[i])), []).append(i)

    chunks = []
    for seed in order:
        if seed not in unassigned:
            continue
        chunk = [seed]
        unassigned.discard(seed)
        while len(chunk) < MAX_CLUSTER_SIZE:
            candidates = []
            for i in chunk:
                for dx, dy in _NEIGHBORHOOD:
                    for j in by_pixel.get((int(xs[i]) + dx, int(ys[i]) + dy), ()):
                        if j in unassigned and abs(int(t[j]) - int(t[i])) <= window_ps:
                            candidates.append(j)
            if not candidates:
                break
            nxt = min(candidates, key=lambda i: (int(t[i]), int(xs[i]), int(ys[i])))
            chunk.append(nxt)
            unassigned.discard(nxt)
        chunks.append(chunk)
    return chunks


def calibrate_energy(clusters: ClusteredElectrons, cal: CalibrationMap) -> EventStream:
    """Map cluster columns to energy loss: E = (zlp_reference - x) * dispersion."""
    recs = np.zeros(len(clusters), dtype=EVENT_DTYPE)
    recs["kind"] = KIND_ELECTRON
    recs["time"] = clusters.records["time"]
    recs["energy"] = (cal.zlp_reference - clusters.records["x"]) * cal.dispersion
    order = np.argsort(recs["time"], kind="stable")
    return EventStream(recs[order])


@dataclass
class DriftReport:
    window_starts_ps: np.ndarray
    offsets_ev: np.ndarray
    reused: np.ndarray  # True where a window had too few electrons


def correct_zlp_drift(stream: EventStream, window: float = 10.0,
                      bin_width: float = 0.03, search_halfwidth: float = 0.45,
                      min_electrons: int = 100,
                      return_report: bool = False):
    """Re-zero the electron energy scale window by window.

    Per time window, the zero-loss peak is located as the histogram mode
    (0.03 eV bins, restricted to |E| < ``search_halfwidth``) refined by
    parabolic interpolation, and subtracted from all electron energies in
    the window.  Windows with fewer than ``min_electrons`` electrons reuse
    the previous offset and are flagged.  Timestamps are never modified.
    """
    recs = stream.records.copy()
    is_el = recs["kind"] == KIND_ELECTRON
    if not np.any(is_el):
        report = DriftReport(np.empty(0, np.int64), np.empty(0), np.empty(0, bool))
        out = EventStream(recs)
        return (out, report) if return_report else out

    window_ps = int(round(window * 1e12))
    t = recs["time"]
    n_windows = int(t[-1] // window_ps) + 1 if len(t) else 0
    starts, offsets, reused = [], [], []
    prev_offset = 0.0
    el_idx = np.nonzero(is_el)[0]
    el_t = t[el_idx]
    el_e = recs["energy"][el_idx].astype(float)
    win_of = el_t // window_ps

    edges = np.arange(-search_halfwidth, search_halfwidth + bin_width, bin_width)
    centers = 0.5 * (edges[:-1] + edges[1:])

    for w in range(n_windows):
        sel = win_of == w
        n_sel = int(sel.sum())
        starts.append(w * window_ps)
        if n_sel < min_electrons:
            offsets.append(prev_offset)
            reused.append(True)
        else:
            e = el_e[sel]
            counts, _ = np.histogram(e, bins=edges)
            mode = int(np.argmax(counts))
            if 0 < mode < len(counts) - 1:
                cl, cc, cr = counts[mode - 1], counts[mode], counts[mode + 1]
                denom = cl - 2 * cc + cr
                shift = 0.5 * (cl - cr) / denom if denom != 0 else 0.0
                shift = float(np.clip(shift, -0.5, 0.5))
            else:
                shift = 0.0
            offset = float(centers[mode] + shift * bin_width)
            offsets.append(offset)
            reused.append(False)
            prev_offset = offset
        recs["energy"][el_idx[sel]] = el_e[sel] - offsets[-1]

    report = DriftReport(np.array(starts, np.int64), np.array(offsets), np.array(reused, bool))
    out = EventStream(recs)
    return (out, report) if return_report else out
