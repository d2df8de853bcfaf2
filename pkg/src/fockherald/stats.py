"""Quantitative estimators: the g2 family, CAR, heralding efficiency, CSI.

Conventions shared by the estimators:

* Correlations are normalized so that statistically independent streams give
  exactly 1; uncertainties are first-order Poisson counting errors.
* "True" coincidences (each photon assigned to exactly one electron) and a
  jitter-scale coincidence window select herald-photon pairs for the
  discrete correlators, the CAR analyses and the heralding efficiencies.
* Auto-correlation quantities entering the Cauchy-Schwarz ratio are
  normally ordered: photon g2(0) comes from the A-B cross product (no
  self-pairing) and the per-bin energy-loss variance excludes each
  electron's self term, so any classical (independent-loss) source is
  bounded by 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .correlate import ABSENT, CoincidenceCube, Histogram
from .events import CHANNEL_A, CHANNEL_B, EventStream

PS_PER_S = 1_000_000_000_000


# ---------------------------------------------------------------------------
# result containers


@dataclass
class CorrelationCurve:
    tau_ps: np.ndarray  # bin centers
    g2: np.ndarray
    stderr: np.ndarray
    baseline_window_ps: tuple[int, int]

    def at_zero(self) -> tuple[float, float]:
        i = int(np.argmin(np.abs(self.tau_ps)))
        return float(self.g2[i]), float(self.stderr[i])


@dataclass
class HeraldedG2Surface:
    tau_a_ps: np.ndarray
    tau_b_ps: np.ndarray
    values: np.ndarray  # (nA, nB), NaN where marginals are empty
    stderr: np.ndarray
    energy_window: tuple[float, float]

    def at_zero(self) -> tuple[float, float]:
        ia = int(np.argmin(np.abs(self.tau_a_ps)))
        ib = int(np.argmin(np.abs(self.tau_b_ps)))
        return float(self.values[ia, ib]), float(self.stderr[ia, ib])


@dataclass
class CarResult:
    car: float
    stderr: float
    signal_counts: int
    accidental_estimate: float
    background_counts: int = 0  # raw counts behind the accidental estimate
    infinite: bool = False


@dataclass
class EtaResult:
    eta: float
    stderr: float
    inconsistent: bool = False  # eta > 1: calibration inconsistency, reported


@dataclass
class GammaCurve:
    tau_ps: np.ndarray
    gamma: np.ndarray
    stderr: np.ndarray
    g_e2: float
    g2_zero: float


@dataclass
class CouplingEstimate:
    g0: float
    stderr: float
    n_single: int
    n_pair: int
    low_statistics: bool = False


# ---------------------------------------------------------------------------
# unheralded photon-photon correlation


def _pair_delays(t_a: np.ndarray, t_b: np.ndarray, span_ps: int,
                 max_pairs: int = 100_000_000) -> np.ndarray:
    """All (b - a) delays with |delay| <= span, via windowed binary search."""
    if len(t_a) == 0 or len(t_b) == 0:
        return np.empty(0, dtype=np.int64)
    lo = np.searchsorted(t_b, t_a - span_ps, side="left")
    hi = np.searchsorted(t_b, t_a + span_ps, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total > max_pairs:
        raise ValueError(f"{total} photon pairs exceed the {max_pairs} guard; "
                         "reduce the correlation span")
    starts = np.cumsum(counts) - counts
    flat = np.repeat(lo, counts) + (np.arange(total) - np.repeat(starts, counts))
    return t_b[flat] - np.repeat(t_a, counts)


def g2_unheralded(photons_a, photons_b, bin_width: float, span: float,
                  duration: float | None = None,
                  baseline_window: tuple[float, float] = (200e-9, 1e-6)) -> CorrelationCurve:
    """HBT cross-correlation histogram normalized to the accidental level.

    The accidental (uncorrelated) pair rate per bin is r_A * r_B * bin * T,
    computed from the stream totals, so independent Poisson streams give
    g2 = 1 at every delay.
    """
    t_a = np.asarray(photons_a, dtype=np.int64)
    t_b = np.asarray(photons_b, dtype=np.int64)
    if bin_width <= 0 or span <= bin_width:
        raise ValueError("need span >> bin_width > 0")
    if duration is None:
        if len(t_a) == 0 or len(t_b) == 0:
            raise ValueError("cannot infer duration from empty streams")
        duration = (max(t_a[-1], t_b[-1]) - min(t_a[0], t_b[0])) / PS_PER_S
    span_ps = int(round(span * PS_PER_S))
    bin_ps = int(round(bin_width * PS_PER_S))
    # odd bin count so that zero delay is a bin center, not an edge
    half = span_ps // bin_ps
    n_bins = 2 * half + 1
    edges = (np.arange(n_bins + 1) - half - 0.5) * bin_ps
    delays = _pair_delays(t_a, t_b, int(math.ceil(edges[-1])))
    counts, _ = np.histogram(delays, bins=edges)
    rate_a = len(t_a) / duration
    rate_b = len(t_b) / duration
    accidental = rate_a * rate_b * bin_width * duration
    if accidental <= 0:
        raise ValueError("zero accidental level: empty baseline, g2 undefined")
    centers = 0.5 * (edges[:-1] + edges[1:])
    g2 = counts / accidental
    stderr = np.sqrt(np.maximum(counts, 1)) / accidental
    bw = (int(round(baseline_window[0] * PS_PER_S)), int(round(baseline_window[1] * PS_PER_S)))
    return CorrelationCurve(centers, g2, stderr, bw)


# ---------------------------------------------------------------------------
# heralded correlations from the cube


def g2_heralded_surface(cube: CoincidenceCube, energy_window: tuple[float, float]) -> HeraldedG2Surface:
    """Triple-coincidence correlation normalized by the pair marginals.

    g2H(tau_A, tau_B) = N_eAB * N_e / (N_eA * N_eB), all restricted to the
    energy window.  A factorizable pairing (independent channels) gives 1
    everywhere; cells with empty marginals are masked NaN.
    """
    sel = cube.e_slice(energy_window)
    n3 = cube.counts[:, :, sel].sum(axis=2).astype(float)
    na = cube.pair_a[:, sel].sum(axis=1).astype(float)
    nb = cube.pair_b[:, sel].sum(axis=1).astype(float)
    ne = float(cube.totals[sel].sum())
    denom = np.outer(na, nb)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = n3 * ne / denom
        stderr = np.sqrt(np.maximum(n3, 1.0)) * ne / denom
    mask = denom == 0
    values[mask] = np.nan
    stderr[mask] = np.nan
    ta = 0.5 * (cube.axes.tau_a_edges[:-1] + cube.axes.tau_a_edges[1:])
    tb = 0.5 * (cube.axes.tau_b_edges[:-1] + cube.axes.tau_b_edges[1:])
    return HeraldedG2Surface(ta, tb, values, stderr, tuple(energy_window))


def g2_time_averaged(cube: CoincidenceCube, energy_window: tuple[float, float],
                     coincidence_halfwidth: float = 2.5e-9) -> CorrelationCurve:
    """Heralded correlation versus tau_B with tau_A pinned to coincidence.

    g2(tau) = N_eAB(tau_A~0, tau) * N_e / (N_eA(tau_A~0) * N_eB(tau)).
    """
    sel = cube.e_slice(energy_window)
    ta = 0.5 * (cube.axes.tau_a_edges[:-1] + cube.axes.tau_a_edges[1:])
    coinc = np.nonzero(np.abs(ta) <= coincidence_halfwidth * PS_PER_S)[0]
    if coinc.size == 0:
        raise ValueError("no tau_A bins inside the coincidence window")
    n3 = cube.counts[coinc][:, :, sel].sum(axis=(0, 2)).astype(float)
    na0 = float(cube.pair_a[coinc][:, sel].sum())
    nb = cube.pair_b[:, sel].sum(axis=1).astype(float)
    ne = float(cube.totals[sel].sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = n3 * ne / (na0 * nb)
        stderr = np.sqrt(np.maximum(n3, 1.0)) * ne / (na0 * nb)
    g2[nb == 0] = np.nan
    stderr[nb == 0] = np.nan
    tb = 0.5 * (cube.axes.tau_b_edges[:-1] + cube.axes.tau_b_edges[1:])
    return CorrelationCurve(tb, g2, stderr, (0, 0))


# ---------------------------------------------------------------------------
# discrete heralded correlation


def _herald_successes(records: np.ndarray, energy_window: tuple[float, float] | None,
                      coincidence_window: float):
    """Herald subsequence (energy-selected electrons) and per-channel success flags."""
    if energy_window is not None:
        sel = (records["e_el"] >= energy_window[0]) & (records["e_el"] <= energy_window[1])
        heralds = records[sel]
    else:
        heralds = records
    w = coincidence_window * PS_PER_S
    a = heralds["true_a"] & (records_abs(heralds["tau_a"]) <= w)
    b = heralds["true_b"] & (records_abs(heralds["tau_b"]) <= w)
    return heralds, a, b


def records_abs(tau: np.ndarray) -> np.ndarray:
    """|tau| with ABSENT mapped far out of any window."""
    out = np.abs(tau.astype(np.float64))
    out[tau == ABSENT] = np.inf
    return out


def g2_discrete(records: np.ndarray, energy_window: tuple[float, float] | None,
                coincidence_window: float = 5e-9, q_max: int = 20):
    """Photon-pair correlation versus intervening herald count q.

    Heralds are the energy-selected electrons in time order.  A herald
    "succeeds" on a channel when it owns a true coincidence within the
    window; N_AB[q] counts heralds whose channel-A success is followed,
    q heralds later, by a channel-B success (q = 0: the same electron fired
    both).  Normalization N_e/(N_eA*N_eB) makes independent channels read 1.

    Returns (q values, g2[q], stderr[q]).
    """
    heralds, a, b = _herald_successes(records, energy_window, coincidence_window)
    n_e = len(heralds)
    n_a = int(a.sum())
    n_b = int(b.sum())
    if n_e == 0 or n_a == 0 or n_b == 0:
        raise ValueError("no herald successes inside the window")
    qs = np.arange(q_max + 1)
    n_ab = np.array(
        [int(np.count_nonzero(a[: n_e - q] & b[q:])) for q in qs], dtype=np.int64
    )
    norm = n_e / (float(n_a) * float(n_b))
    g2 = n_ab * norm
    stderr = np.sqrt(np.maximum(n_ab, 1)) * norm
    return qs, g2, stderr


# ---------------------------------------------------------------------------
# coincidence-to-accidental ratio


def _box_counts(hist: Histogram, window: dict[str, tuple[float, float]]):
    sel = []
    for name, edges in hist.axes:
        centers = 0.5 * (edges[:-1] + edges[1:])
        if name in window:
            lo, hi = window[name]
            mask = (centers >= lo) & (centers <= hi)
            if not np.any(mask):
                raise ValueError(f"window {window[name]} on {name} selects no bins")
            sel.append(np.nonzero(mask)[0])
        else:
            sel.append(np.arange(len(centers)))
    grid = np.ix_(*sel)
    total = int(hist.counts[grid].sum())
    n_bins = int(np.prod([len(s) for s in sel]))
    return total, n_bins, [set(s.tolist()) for s in sel]


def car(tau_histogram: Histogram, signal_window: dict[str, tuple[float, float]],
        background_windows: list[dict[str, tuple[float, float]]]) -> CarResult:
    """Coincidence-to-accidental ratio: (R_sig - R_acc)/R_acc.

    Windows are per-axis center ranges on the histogram; the accidental rate
    is the mean background density scaled to the signal window size, with
    Poisson error propagation.  Background windows must not overlap the
    signal window.
    """
    if not background_windows:
        raise ValueError("need at least one background window")
    s_total, s_bins, s_sel = _box_counts(tau_histogram, signal_window)
    b_total = 0
    b_bins = 0
    for w in background_windows:
        total, nb, b_sel = _box_counts(tau_histogram, w)
        if all(sa & sb for sa, sb in zip(s_sel, b_sel)):
            raise ValueError("background window overlaps the signal window")
        b_total += total
        b_bins += nb
    scale = s_bins / b_bins
    acc = b_total * scale
    if acc == 0:
        return CarResult(math.inf, math.inf, s_total, 0.0, 0, infinite=True)
    carv = (s_total - acc) / acc
    var = s_total / acc**2 + (s_total**2 / acc**4) * (b_total * scale**2)
    return CarResult(float(carv), float(math.sqrt(var)), s_total, float(acc), int(b_total))


# ---------------------------------------------------------------------------
# heralding efficiency


def heralding_efficiency(n_coincident: int, n_heralds: int,
                         detector_eff: float, transmission: float = 1.0) -> EtaResult:
    """Intrinsic heralding efficiency: N_ij / (N_j * eff * transmission).

    The efficiency arguments refer to the heralded particle's detection
    chain; for photon pairs pass the per-channel product (the beamsplitter
    routing probability is part of the measured pair value, not corrected
    away).  Binomial counting error; eta > 1 is reported, flagged as a
    calibration inconsistency.
    """
    if n_heralds <= 0:
        raise ValueError("n_heralds must be positive")
    if not 0 < detector_eff <= 1 or not 0 < transmission <= 1:
        raise ValueError("efficiencies must be in (0, 1]")
    p = n_coincident / n_heralds
    eta = p / (detector_eff * transmission)
    sigma_p = math.sqrt(max(p * (1 - p), 1.0 / n_heralds) / n_heralds)
    stderr = sigma_p / (detector_eff * transmission)
    return EtaResult(float(eta), float(stderr), inconsistent=eta > 1.0)


# ---------------------------------------------------------------------------
# Cauchy-Schwarz ratio


def csi_gamma(stream: EventStream, bin_width: float, tau_range: float,
              duration: float | None = None,
              loss_threshold: float | None = None) -> GammaCurve:
    """Cross-correlation of binned energy loss and photon counts, bounded by
    1 for classical sources.

    gamma(tau) = g2_E,ph(tau) / (g_E2 * g2(0)) with
      g2_E,ph(tau) = <S(t) n(t+tau)> / (<S><n>)   (S: per-bin loss sum,
                                                   n: per-bin A-or-B counts),
      g_E2 = <S^2 - sum E_i^2> / <S>^2            (self-pairs removed),
      g2(0) = <n_A n_B> / (<n_A><n_B>)            (same-bin HBT cross).

    ``loss_threshold`` optionally zeroes losses below a floor before
    correlating (background suppression toggle).
    """
    el = stream.electrons()
    t_a = stream.photon_times(CHANNEL_A)
    t_b = stream.photon_times(CHANNEL_B)
    if len(el) == 0 or (len(t_a) + len(t_b)) == 0:
        raise ValueError("stream must contain electrons and photons")
    if duration is None:
        duration = float(stream.times[-1] - stream.times[0] + 1) / PS_PER_S
    bin_ps = int(round(bin_width * PS_PER_S))
    n_bins = int(math.ceil(duration * PS_PER_S / bin_ps))
    if n_bins < 8:
        raise ValueError("too few bins; reduce bin_width")

    loss = el["energy"].astype(float)
    if loss_threshold is not None:
        loss = np.where(loss >= loss_threshold, loss, 0.0)
    eb = np.clip(el["time"] // bin_ps, 0, n_bins - 1)
    s = np.bincount(eb, weights=loss, minlength=n_bins)
    q = np.bincount(eb, weights=loss * loss, minlength=n_bins)
    na = np.bincount(np.clip(t_a // bin_ps, 0, n_bins - 1), minlength=n_bins).astype(float)
    nb = np.bincount(np.clip(t_b // bin_ps, 0, n_bins - 1), minlength=n_bins).astype(float)
    n = na + nb

    mean_s = s.mean()
    mean_n = n.mean()
    if mean_s <= 0:
        raise ValueError("mean energy loss is zero: no inelastic signal")
    if mean_n <= 0:
        raise ValueError("no photons in range")

    auto = s * s - q  # per-bin pair sum with self-pairs removed
    g_e2 = float(auto.mean() / mean_s**2)
    mean_na = na.mean()
    mean_nb = nb.mean()
    cross_ab = na * nb
    g2_zero = float(cross_ab.mean() / (mean_na * mean_nb))
    if g2_zero <= 0:
        raise ValueError("empty photon cross product")

    # the two normalization factors are common to every lag; their sampling
    # error is folded into each bar (conservative per-bin, correlated across bins)
    rel_g2 = float(cross_ab.std(ddof=1)) / math.sqrt(n_bins) / max(cross_ab.mean(), 1e-300)
    rel_ge2 = float(auto.std(ddof=1)) / math.sqrt(n_bins) / max(auto.mean(), 1e-300)
    common_rel2 = rel_g2**2 + rel_ge2**2

    k_max = int(round(tau_range * PS_PER_S / bin_ps))
    lags = np.arange(-k_max, k_max + 1)
    gamma = np.empty(len(lags))
    stderr = np.empty(len(lags))
    denom = g_e2 * g2_zero
    for i, k in enumerate(lags):
        if k >= 0:
            prod = s[: n_bins - k] * n[k:]
        else:
            prod = s[-k:] * n[: n_bins + k]
        m = len(prod)
        cross = float(prod.mean()) / (mean_s * mean_n)
        gamma[i] = cross / denom
        num_err = float(prod.std(ddof=1)) / math.sqrt(m) / (mean_s * mean_n) / denom
        stderr[i] = math.sqrt(num_err**2 + (gamma[i] ** 2) * common_rel2)
    return GammaCurve(lags * bin_ps, gamma, stderr, g_e2, g2_zero)


# ---------------------------------------------------------------------------
# detected-mode coupling from coincidence counts


def coupling_from_coincidences(records: np.ndarray, eff_a: float, eff_b: float,
                               m1_window: tuple[float, float],
                               m2_window: tuple[float, float],
                               coincidence_window: float = 5e-9) -> CouplingEstimate:
    """Detected-mode coupling from single- and two-photon coincidence counts.

    With per-generated-photon detection probabilities eta_A/eta_B (splitter
    included), binomial thinning gives
      C1 = N * P1 * (eta_A + eta_B)        (one photon, either channel)
      C2 = N * P2 * 2 * eta_A * eta_B      (two photons, opposite channels)
    so the population ratio P2/P1 -- and with it g0 (P2/P1 = g0^2/2) --
    follows from the measured C2/C1, independent of window contamination.
    """
    if eff_a <= 0 or eff_b <= 0:
        raise ValueError("efficiencies must be positive (no-information limit)")
    w = coincidence_window * PS_PER_S
    e = records["e_el"]
    a = records["true_a"] & (records_abs(records["tau_a"]) <= w)
    b = records["true_b"] & (records_abs(records["tau_b"]) <= w)
    in1 = (e >= m1_window[0]) & (e <= m1_window[1])
    in2 = (e >= m2_window[0]) & (e <= m2_window[1])
    c1 = int(np.count_nonzero(in1 & (a | b)))
    c2 = int(np.count_nonzero(in2 & a & b))
    if c1 == 0:
        raise ValueError("no single coincidences in the m=1 window")
    thin = 2.0 * eff_a * eff_b / (eff_a + eff_b)
    ratio = (c2 / c1) / thin
    g0 = math.sqrt(2.0 * ratio) if ratio > 0 else 0.0
    rel = math.sqrt(1.0 / max(c2, 1) + 1.0 / c1)
    stderr = 0.5 * g0 * rel if g0 > 0 else float("nan")
    return CouplingEstimate(g0, stderr, c1, c2, low_statistics=c2 < 25)


# ---------------------------------------------------------------------------
# small helpers shared by analyses


def gaussian_peak_fwhm(counts: np.ndarray, centers: np.ndarray) -> tuple[float, float]:
    """(FWHM, center) of a peak over a flat floor via Gaussian least squares."""
    counts = np.asarray(counts, dtype=float)
    centers = np.asarray(centers, dtype=float)
    floor = float(np.median(counts))
    amp = float(counts.max() - floor)
    mu = float(centers[np.argmax(counts)])
    width = (centers[-1] - centers[0]) / 10 or 1.0

    def model(x, a, m, sig, c):
        return a * np.exp(-0.5 * ((x - m) / sig) ** 2) + c

    popt, _ = optimize.curve_fit(
        model, centers, counts, p0=[amp, mu, width, floor],
        bounds=([0, centers[0], 1e-12, 0], [np.inf, centers[-1], centers[-1] - centers[0], np.inf]),
        maxfev=20000,
    )
    sigma = abs(popt[2])
    return float(sigma / FWHM_SIGMA_RATIO), float(popt[1])


FWHM_SIGMA_RATIO = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


# ---------------------------------------------------------------------------
# report schema


SCHEMA_VERSION = 1


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


@dataclass
class Report:
    """Serializable estimator output: JSON with a CSV twin for plotting."""

    estimator: str
    params: dict
    axes: dict = field(default_factory=dict)  # name -> list of centers
    values: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "estimator": self.estimator,
            "params": self.params,
            "axes": self.axes,
            "values": self.values,
            "stderr": self.stderr,
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=1, default=_json_default)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def write_csv(self, path) -> None:
        axes = list(self.axes.items())
        with open(path, "w") as fh:
            names = [name for name, _ in axes]
            fh.write(",".join(names + ["value", "stderr"]) + "\n")
            values = np.asarray(self.values, dtype=float)
            errs = np.asarray(self.stderr, dtype=float) if self.stderr else np.full(values.size, np.nan)
            if axes:
                grids = np.meshgrid(*[np.asarray(c) for _, c in axes], indexing="ij")
                flat = [g.ravel() for g in grids]
            else:
                flat = []
            vals = values.ravel()
            errs = errs.ravel() if errs.size == vals.size else np.full(vals.size, np.nan)
            for i in range(len(vals)):
                row = [repr(float(f[i])) for f in flat] + [repr(float(vals[i])), repr(float(errs[i]))]
                fh.write(",".join(row) + "\n")

    @staticmethod
    def from_json(text: str) -> "Report":
        payload = json.loads(text)
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"schema version mismatch: file has {payload.get('schema_version')}, "
                f"tool expects {SCHEMA_VERSION}"
            )
        return Report(
            estimator=payload["estimator"],
            params=payload["params"],
            axes=payload["axes"],
            values=payload["values"],
            stderr=payload["stderr"],
            metadata=payload["metadata"],
        )
