"""Coincidence engine: nearest-photon matching, dedup, and the 3-D cube.

Every electron is joined to its temporally closest photon on each channel
(within a configurable maximum delay); photons claimed by several electrons
are resolved so each photon is a "true" coincidence of exactly one electron
(smallest |delay| wins, earlier electron on ties).  Complete triples are
histogrammed into a (tau_A, tau_B, E_el) cube whose per-energy electron
totals and electron-photon pair marginals feed the correlation estimators.

Matching uses vectorized binary search on the sorted photon arrays (same
output as a sequential two-pointer merge, well above the throughput target)
and parallelizes over electron shards with an elementwise-additive merge.
"""

from __future__ import annotations

import json
import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from .events import CHANNEL_A, CHANNEL_B, EventStream

ABSENT = np.iinfo(np.int64).min
_FAR = np.int64(2**62)

TRIPLE_DTYPE = np.dtype(
    [
        ("t_el", "<i8"),
        ("e_el", "<f4"),
        ("tau_a", "<i8"),
        ("tau_b", "<i8"),
        ("idx_a", "<i8"),
        ("idx_b", "<i8"),
        ("true_a", "?"),
        ("true_b", "?"),
    ]
)

CUBE_MAGIC = b"EHPCUB01"


def _as_times(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype.names and "time" in x.dtype.names:
        return x["time"].astype(np.int64)
    return np.asarray(x, dtype=np.int64)


def _check_sorted(t: np.ndarray, label: str) -> None:
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise ValueError(f"{label} must be time-sorted")


def _nearest(t_el: np.ndarray, t_ph: np.ndarray, max_delay_ps: int):
    """Per electron: signed delay to the closest photon and its index.

    Equidistant photons resolve to the earlier one; delays beyond
    ``max_delay_ps`` are ABSENT (index -1).
    """
    n = len(t_el)
    if len(t_ph) == 0 or n == 0:
        return np.full(n, ABSENT, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    # sentinel-padded photon times remove all boundary branching
    padded = np.empty(len(t_ph) + 2, dtype=np.int64)
    padded[0] = -_FAR
    padded[-1] = _FAR
    padded[1:-1] = t_ph
    pos = np.searchsorted(t_ph, t_el, side="left")
    pos += 1  # index into padded
    dl = t_el - padded[pos - 1]  # >= 0
    dr = padded[pos] - t_el  # >= 0
    take_left = dl <= dr  # tie -> earlier photon
    delay = np.where(take_left, -dl, dr)
    idx = pos - 1
    idx -= take_left  # back to unpadded indexing
    ok = np.abs(delay) <= max_delay_ps
    tau = np.where(ok, delay, ABSENT)
    idx = np.where(ok, np.clip(idx, 0, len(t_ph) - 1), 0)
    # canonical identity for duplicate timestamps: first photon of the run
    idx = np.searchsorted(t_ph, t_ph[idx], side="left")
    idx = np.where(ok, idx, -1)
    return tau, idx


def match_coincidences(electrons, photons_a, photons_b, max_delay: float = 100e-9) -> np.ndarray:
    """Join each electron to its nearest photon per channel.

    ``electrons`` is a structured array with ``time``/``energy`` fields (or a
    ``(times, energies)`` pair); photon arguments are time arrays or
    structured arrays.  Returns one TRIPLE_DTYPE record per electron.
    """
    if isinstance(electrons, tuple):
        t_el = np.asarray(electrons[0], dtype=np.int64)
        e_el = np.asarray(electrons[1], dtype=np.float32)
    else:
        t_el = electrons["time"].astype(np.int64)
        e_el = electrons["energy"].astype(np.float32)
    t_a = _as_times(photons_a)
    t_b = _as_times(photons_b)
    _check_sorted(t_el, "electrons")
    _check_sorted(t_a, "photons_a")
    _check_sorted(t_b, "photons_b")
    return _match_arrays(t_el, e_el, t_a, t_b, int(round(max_delay * 1e12)))


def match_stream(stream: EventStream, max_delay: float = 100e-9) -> np.ndarray:
    el = stream.electrons()
    return match_coincidences(
        el, stream.photon_times(CHANNEL_A), stream.photon_times(CHANNEL_B), max_delay
    )


def _match_arrays(t_el, e_el, t_a, t_b, max_delay_ps: int) -> np.ndarray:
    records = np.zeros(len(t_el), dtype=TRIPLE_DTYPE)
    records["t_el"] = t_el
    records["e_el"] = e_el
    records["tau_a"], records["idx_a"] = _nearest(t_el, t_a, max_delay_ps)
    records["tau_b"], records["idx_b"] = _nearest(t_el, t_b, max_delay_ps)
    return records


def dedupe_true_coincidences(records: np.ndarray) -> np.ndarray:
    """Flag, per photon, the single claiming electron with minimal |delay|.

    Ties break toward the earlier electron.  Only flag fields change; the
    flags depend on |delay| values alone, so they are invariant under any
    common time translation of the streams.
    """
    out = records.copy()
    rank = np.arange(len(out))
    for ch in ("a", "b"):
        tau = out[f"tau_{ch}"]
        idx = out[f"idx_{ch}"]
        present = tau != ABSENT
        flags = np.zeros(len(out), dtype=bool)
        if np.any(present):
            rid = rank[present]
            photon = idx[present]
            order = np.lexsort((rid, np.abs(tau[present]), photon))
            sorted_photon = photon[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = sorted_photon[1:] != sorted_photon[:-1]
            flags[rid[order[first]]] = True
        out[f"true_{ch}"] = flags
    return out


@dataclass(frozen=True)
class CubeAxes:
    """Uniform bin edges for (tau_A, tau_B, E_el)."""

    tau_a_edges: np.ndarray
    tau_b_edges: np.ndarray
    e_edges: np.ndarray

    @staticmethod
    def default(tau_bin: float = 1.56e-9, tau_halfspan: float = 99.84e-9,
                e_bin: float = 0.03, e_lo: float = -1.5, e_hi: float = 4.5) -> "CubeAxes":
        """Hardware-granularity binning: electron timestamp quantum in tau,
        one pixel in energy."""
        tb = tau_bin * 1e12
        n = int(round(tau_halfspan * 1e12 / tb))
        tau_edges = (np.arange(-n, n + 1) * tb).astype(float)
        e_edges = np.arange(e_lo, e_hi + e_bin / 2, e_bin)
        return CubeAxes(tau_edges.copy(), tau_edges.copy(), e_edges)

    def validate(self) -> None:
        for name, edges in (("tau_a", self.tau_a_edges), ("tau_b", self.tau_b_edges),
                            ("e", self.e_edges)):
            if len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise ValueError(f"{name} edges must be strictly increasing")
            steps = np.diff(edges)
            if not np.allclose(steps, steps[0], rtol=1e-9):
                raise ValueError(f"{name} edges must be uniform")


def _bin_index(values, edges):
    n = len(edges) - 1
    lo = edges[0]
    step = edges[1] - edges[0]
    if (values.dtype.kind == "i" and float(lo).is_integer() and float(step).is_integer()):
        idx = (values - np.int64(lo)) // np.int64(step)
    else:
        idx = np.floor((values - lo) * (1.0 / step)).astype(np.int64)
    valid = (idx >= 0) & (idx < n)
    return idx, valid, n


@dataclass
class CoincidenceCube:
    """3-D triple-coincidence histogram plus the marginals that normalize it.

    ``totals`` counts every electron per energy bin (photon or not);
    ``pair_a``/``pair_b`` count electron-photon pairs per (tau, energy)
    regardless of the other channel.  ``overflow`` tallies out-of-range
    entries so that count conservation stays checkable.
    """

    axes: CubeAxes
    counts: np.ndarray
    totals: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    overflow: dict = field(default_factory=dict)

    @property
    def n_triples(self) -> int:
        return int(self.counts.sum()) + int(self.overflow.get("triples", 0))

    def e_slice(self, window: tuple[float, float]) -> np.ndarray:
        """Indices of energy bins whose centers fall inside ``window``."""
        centers = 0.5 * (self.axes.e_edges[:-1] + self.axes.e_edges[1:])
        sel = np.nonzero((centers >= window[0]) & (centers <= window[1]))[0]
        if sel.size == 0:
            raise ValueError(f"energy window {window} selects no bins")
        return sel


def _accumulate(e_el, tau_a, tau_b, sel_a, sel_b, axes: CubeAxes) -> CoincidenceCube:
    """Shared binning core; ``sel_x`` marks records whose channel-x delay counts."""
    ie, ve, ne = _bin_index(e_el, axes.e_edges)
    totals = np.bincount(ie[ve], minlength=ne)

    ia, va, na = _bin_index(tau_a, axes.tau_a_edges)
    ib, vb, nb = _bin_index(tau_b, axes.tau_b_edges)

    pa_mask = sel_a & va & ve
    pair_a = np.bincount(ia[pa_mask] * ne + ie[pa_mask], minlength=na * ne).reshape(na, ne)
    pb_mask = sel_b & vb & ve
    pair_b = np.bincount(ib[pb_mask] * ne + ie[pb_mask], minlength=nb * ne).reshape(nb, ne)

    triple = sel_a & sel_b
    t_mask = triple & va & vb & ve
    flat = (ia[t_mask] * nb + ib[t_mask]) * ne + ie[t_mask]
    counts = np.bincount(flat, minlength=na * nb * ne).reshape(na, nb, ne)

    overflow = {
        "electrons": int(np.sum(~ve)),
        "pair_a": int(np.sum(sel_a & ~pa_mask)),
        "pair_b": int(np.sum(sel_b & ~pb_mask)),
        "triples": int(np.sum(triple & ~t_mask)),
    }
    return CoincidenceCube(axes=axes, counts=counts, totals=totals,
                           pair_a=pair_a, pair_b=pair_b, overflow=overflow)


def build_cube(records: np.ndarray, axes: CubeAxes | None = None,
               require_true: str = "") -> CoincidenceCube:
    """Histogram matched records into the coincidence cube.

    ``require_true`` ("", "a", "b" or "ab") additionally restricts the triple
    counts and the corresponding pair marginals to deduplicated true
    coincidences.
    """
    if axes is None:
        axes = CubeAxes.default()
    axes.validate()

    sel_a = records["tau_a"] != ABSENT
    sel_b = records["tau_b"] != ABSENT
    if "a" in require_true:
        sel_a = sel_a & records["true_a"]
    if "b" in require_true:
        sel_b = sel_b & records["true_b"]
    return _accumulate(records["e_el"], records["tau_a"], records["tau_b"],
                       sel_a, sel_b, axes)


# ---------------------------------------------------------------------------
# parallel sharding

_SHARD_CTX: dict = {}


def _shard_worker(args):
    i0, i1, max_delay_ps = args
    t_el = _SHARD_CTX["t_el"][i0:i1]
    e_el = _SHARD_CTX["e_el"][i0:i1]
    axes = _SHARD_CTX["axes"]
    tau_a, _ = _nearest(t_el, _SHARD_CTX["t_a"], max_delay_ps)
    tau_b, _ = _nearest(t_el, _SHARD_CTX["t_b"], max_delay_ps)
    cube = _accumulate(e_el, tau_a, tau_b, tau_a != ABSENT, tau_b != ABSENT, axes)
    return cube.counts, cube.totals, cube.pair_a, cube.pair_b, cube.overflow


def build_cube_sharded(electrons, photons_a, photons_b, max_delay: float = 100e-9,
                       axes: CubeAxes | None = None, workers: int = 1,
                       shards: int | None = None) -> CoincidenceCube:
    """Match + cube over electron shards, merged by elementwise addition.

    Nearest-photon matching is independent per electron, so shards need no
    halo; the merge is exact (integer sums), making the shard count and
    worker count irrelevant to the result.
    """
    if isinstance(electrons, tuple):
        t_el = np.asarray(electrons[0], dtype=np.int64)
        e_el = np.asarray(electrons[1], dtype=np.float32)
    else:
        t_el = electrons["time"].astype(np.int64)
        e_el = electrons["energy"].astype(np.float32)
    t_a = _as_times(photons_a)
    t_b = _as_times(photons_b)
    _check_sorted(t_el, "electrons")
    _check_sorted(t_a, "photons_a")
    _check_sorted(t_b, "photons_b")
    if axes is None:
        axes = CubeAxes.default()
    max_delay_ps = int(round(max_delay * 1e12))

    n = len(t_el)
    if shards is None:
        # chunk for allocator friendliness even single-threaded
        shards = max(1, workers, math.ceil(n / 1_500_000))
    bounds = np.linspace(0, n, shards + 1).astype(int)
    tasks = [(int(bounds[i]), int(bounds[i + 1]), max_delay_ps)
             for i in range(shards) if bounds[i + 1] > bounds[i]]

    _SHARD_CTX.update(t_el=t_el, e_el=e_el, t_a=t_a, t_b=t_b, axes=axes)
    try:
        if workers <= 1:
            results = [_shard_worker(task) for task in tasks]
        else:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers) as pool:
                results = pool.map(_shard_worker, tasks)
    finally:
        _SHARD_CTX.clear()

    axes.validate()
    ne = len(axes.e_edges) - 1
    na = len(axes.tau_a_edges) - 1
    nb = len(axes.tau_b_edges) - 1
    cube = CoincidenceCube(
        axes=axes,
        counts=np.zeros((na, nb, ne), dtype=np.int64),
        totals=np.zeros(ne, dtype=np.int64),
        pair_a=np.zeros((na, ne), dtype=np.int64),
        pair_b=np.zeros((nb, ne), dtype=np.int64),
        overflow={"electrons": 0, "pair_a": 0, "pair_b": 0, "triples": 0},
    )
    for counts, totals, pa, pb, ov in results:
        cube.counts += counts
        cube.totals += totals
        cube.pair_a += pa
        cube.pair_b += pb
        for k, v in ov.items():
            cube.overflow[k] += v
    return cube


# ---------------------------------------------------------------------------
# projections

@dataclass
class Histogram:
    """N-dimensional counts with named uniform axes."""

    counts: np.ndarray
    axes: list[tuple[str, np.ndarray]]

    def centers(self, i: int = 0) -> np.ndarray:
        edges = self.axes[i][1]
        return 0.5 * (edges[:-1] + edges[1:])

    def to_csv(self, path) -> None:
        names = [name for name, _ in self.axes]
        with open(path, "w") as fh:
            fh.write(",".join([f"{n}_center" for n in names] + ["counts"]) + "\n")
            grids = np.meshgrid(*[self.centers(i) for i in range(len(self.axes))],
                                indexing="ij")
            flat = [g.ravel() for g in grids]
            vals = self.counts.ravel()
            for row in range(len(vals)):
                cols = [repr(float(f[row])) for f in flat] + [str(int(vals[row]))]
                fh.write(",".join(cols) + "\n")


_AXIS_ORDER = {"tau_a": 0, "tau_b": 1, "e": 2}


def project(cube: CoincidenceCube, keep: tuple[str, ...],
            ranges: dict[str, tuple[float, float]] | None = None) -> Histogram:
    """Integrate the cube down to the ``keep`` axes, restricted to ``ranges``.

    Axis names: ``tau_a``, ``tau_b``, ``e``, plus the derived difference axis
    ``tau_diff`` (= tau_A - tau_B) for the photon-photon view.
    """
    ranges = dict(ranges or {})
    axes_edges = {"tau_a": cube.axes.tau_a_edges, "tau_b": cube.axes.tau_b_edges,
                  "e": cube.axes.e_edges}
    for name in keep:
        if name not in axes_edges and name != "tau_diff":
            raise ValueError(f"unknown axis {name!r}")
    for name in ranges:
        if name not in axes_edges:
            raise ValueError(f"unknown range axis {name!r}")

    sub = cube.counts
    slices = []
    for name in ("tau_a", "tau_b", "e"):
        edges = axes_edges[name]
        if name in ranges:
            lo, hi = ranges[name]
            centers = 0.5 * (edges[:-1] + edges[1:])
            sel = np.nonzero((centers >= lo) & (centers <= hi))[0]
            if sel.size == 0:
                raise ValueError(f"range {ranges[name]} on {name} selects no bins")
            slices.append(slice(int(sel[0]), int(sel[-1] + 1)))
        else:
            slices.append(slice(None))
    sub = sub[tuple(slices)]
    kept_edges = {}
    for name, sl in zip(("tau_a", "tau_b", "e"), slices):
        edges = axes_edges[name]
        start = sl.start or 0
        stop = sl.stop if sl.stop is not None else len(edges) - 1
        kept_edges[name] = edges[start: stop + 1]

    if "tau_diff" in keep:
        base = [name for name in keep if name != "tau_diff"]
        na, nb = sub.shape[0], sub.shape[1]
        step = kept_edges["tau_a"][1] - kept_edges["tau_a"][0]
        step_b = kept_edges["tau_b"][1] - kept_edges["tau_b"][0]
        if not math.isclose(step, step_b, rel_tol=1e-9):
            raise ValueError("tau_diff requires equal tau_a/tau_b bin widths")
        n_diff = na + nb - 1
        lo = kept_edges["tau_a"][0] - kept_edges["tau_b"][-1]
        diff_edges = lo + step * np.arange(n_diff + 1)
        out = np.zeros((n_diff, sub.shape[2]), dtype=sub.dtype)
        for j in range(nb):
            out[nb - 1 - j: nb - 1 - j + na, :] += sub[:, j, :]
        if "e" in keep:
            axes_out = [("tau_diff", diff_edges), ("e", kept_edges["e"])]
            counts = out
        else:
            axes_out = [("tau_diff", diff_edges)]
            counts = out.sum(axis=1)
        if tuple(base) not in ((), ("e",)):
            raise ValueError("tau_diff combines only with the energy axis")
        return Histogram(counts, axes_out)

    keep_idx = sorted(_AXIS_ORDER[name] for name in keep)
    drop = tuple(i for i in range(3) if i not in keep_idx)
    counts = sub.sum(axis=drop) if drop else sub
    names = [("tau_a", "tau_b", "e")[i] for i in keep_idx]
    return Histogram(counts, [(n, kept_edges[n]) for n in names])


# ---------------------------------------------------------------------------
# cube serialization: JSON header + row-major little-endian count blocks

def write_cube(cube: CoincidenceCube, path) -> None:
    header = {
        "version": 1,
        "axes": {
            "tau_a": [float(v) for v in cube.axes.tau_a_edges],
            "tau_b": [float(v) for v in cube.axes.tau_b_edges],
            "e": [float(v) for v in cube.axes.e_edges],
        },
        "shape": list(cube.counts.shape),
        "dtype": "<i8",
        "overflow": cube.overflow,
        "blocks": ["counts", "totals", "pair_a", "pair_b"],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for block in (cube.counts, cube.totals, cube.pair_a, cube.pair_b):
            fh.write(np.ascontiguousarray(block, dtype="<i8").tobytes())


def read_cube(path) -> CoincidenceCube:
    with open(path, "rb") as fh:
        magic = fh.read(len(CUBE_MAGIC))
        if magic != CUBE_MAGIC:
            raise ValueError(f"bad cube magic {magic!r}")
        n = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(n).decode())
        axes = CubeAxes(
            np.array(header["axes"]["tau_a"]),
            np.array(header["axes"]["tau_b"]),
            np.array(header["axes"]["e"]),
        )
        na, nb, ne = header["shape"]
        def block(count):
            return np.frombuffer(fh.read(count * 8), dtype="<i8").copy()
        counts = block(na * nb * ne).reshape(na, nb, ne)
        totals = block(ne)
        pair_a = block(na * ne).reshape(na, ne)
        pair_b = block(nb * ne).reshape(nb, ne)
    return CoincidenceCube(axes=axes, counts=counts, totals=totals,
                           pair_a=pair_a, pair_b=pair_b,
                           overflow=header.get("overflow", {}))
