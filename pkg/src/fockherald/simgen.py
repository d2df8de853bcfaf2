"""Seeded Monte Carlo generation of raw detection data.

Emulates the full measurement chain: Poisson electron arrivals, per-electron
photon emission into the guided mode, beamsplitter routing to two photon
detectors with efficiency, jitter, non-paralyzable dead time, dark counts and
timestamp quantization, plus theelectron side's transmission loss, detection
jitter, quantization and energy measurement (sideband loss + broadband
continuum + zero-loss noise, optional slow drift).

All random draws come from one ``numpy`` Generator in a fixed order, so a
given (config, seed) reproduces bit-identical streams.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .events import (
    CHANNEL_A,
    CHANNEL_B,
    EVENT_DTYPE,
    KIND_ELECTRON,
    KIND_PHOTON,
    PIXEL_DTYPE,
    EventStream,
    PixelHitStream,
)
from .model import FWHM_TO_SIGMA, SpectrumParams

PS_PER_S = 1_000_000_000_000


@dataclass(frozen=True)
class ChannelConfig:
    """One photon detector chain (end-to-end, after the splitter)."""

    efficiency: float = 0.02
    jitter_fwhm: float = 0.3e-9  # s
    dead_time: float = 20e-6  # s, non-paralyzable
    dark_rate: float = 250.0  # 1/s
    timestamp_quantum: float = 260e-12  # s

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be a probability")
        if self.jitter_fwhm < 0 or self.dead_time < 0 or self.dark_rate < 0:
            raise ValueError("jitter, dead time and dark rate must be non-negative")
        if self.timestamp_quantum <= 0:
            raise ValueError("timestamp_quantum must be positive")


@dataclass(frozen=True)
class ElectronChainConfig:
    transmission: float = 0.65
    jitter_fwhm: float = 2.9e-9  # s
    timestamp_quantum: float = 1.56e-9  # s
    pixel_dispersion: float = 0.03  # eV per pixel column
    mean_cluster_size: float = 3.4  # pixels
    pixel_time_jitter_sigma: float = 1.5e-9  # s, per-pixel response spread

    def __post_init__(self):
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError("transmission must be a probability")
        if self.jitter_fwhm < 0 or self.timestamp_quantum <= 0:
            raise ValueError("invalid electron timing parameters")
        if self.pixel_dispersion <= 0 or self.mean_cluster_size < 1:
            raise ValueError("invalid pixel parameters")


@dataclass(frozen=True)
class ExperimentConfig:
    electron_rate: float  # 1/s
    duration: float  # s
    physics: SpectrumParams
    splitter_ratio: float = 0.52  # probability photon -> channel A
    channel_a: ChannelConfig = field(default_factory=ChannelConfig)
    channel_b: ChannelConfig = field(default_factory=lambda: ChannelConfig(dark_rate=300.0))
    electron_chain: ElectronChainConfig = field(default_factory=ElectronChainConfig)
    seed: int = 0
    max_electrons: float = 1e9  # resource guard on rate * duration
    zlp_drift_ev_per_s: float = 0.0  # slow energy-scale drift ramp

    def __post_init__(self):
        if self.electron_rate < 0 or self.duration < 0:
            raise ValueError("electron_rate and duration must be non-negative")
        if not 0.0 <= self.splitter_ratio <= 1.0:
            raise ValueError("splitter_ratio must be a probability")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class GroundTruth:
    """Per-electron and per-photon ledger of what the simulator actually did.

    Enables oracle-grade checks impossible in the real experiment: every
    detected photon points back to its generating electron (or is marked as
    a dark count), and every electron knows its true photon number.
    """

    # per generated electron
    time_ps: np.ndarray
    g_squared: np.ndarray
    true_k: np.ndarray
    continuum_ev: np.ndarray
    loss_ev: np.ndarray  # true total loss (photons + continuum, no noise)
    measured_ev: np.ndarray  # loss + noise + drift, as recorded
    transmitted: np.ndarray  # bool, electron reached the detector
    detected_time_ps: np.ndarray  # quantized timestamp (only valid if transmitted)
    # per generated photon
    photon_parent: np.ndarray
    photon_channel: np.ndarray
    photon_survived: np.ndarray  # passed efficiency thinning
    photon_accepted: np.ndarray  # also survived dead time
    photon_time_ps: np.ndarray  # quantized timestamp (only valid if accepted)
    # dark counts per channel (quantized accepted timestamps)
    dark_times_ps: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_electrons(self) -> int:
        return len(self.time_ps)

    def detected_photon_counts(self) -> np.ndarray:
        """Accepted-photon count per generated electron."""
        counts = np.zeros(self.n_electrons, dtype=np.int64)
        if len(self.photon_parent):
            np.add.at(counts, self.photon_parent[self.photon_accepted], 1)
        return counts

    def write_jsonl(self, path) -> None:
        """One JSON object per electron (photon outcomes inlined)."""
        per_electron_photons: list[list] = [[] for _ in range(self.n_electrons)]
        for j in range(len(self.photon_parent)):
            per_electron_photons[int(self.photon_parent[j])].append(
                [int(self.photon_channel[j]), bool(self.photon_survived[j]),
                 bool(self.photon_accepted[j]),
                 int(self.photon_time_ps[j]) if self.photon_accepted[j] else None]
            )
        with open(path, "w") as fh:
            for i in range(self.n_electrons):
                obj = {
                    "t_ps": int(self.time_ps[i]),
                    "g2": float(self.g_squared[i]),
                    "k": int(self.true_k[i]),
                    "continuum_ev": float(self.continuum_ev[i]),
                    "loss_ev": float(self.loss_ev[i]),
                    "measured_ev": float(self.measured_ev[i]),
                    "transmitted": bool(self.transmitted[i]),
                    "photons": per_electron_photons[i],
                }
                fh.write(json.dumps(obj, separators=(",", ":")))
                fh.write("\n")


def _truncated_normal(rng: np.random.Generator, sigma: float, n: int, bound: float = 3.0) -> np.ndarray:
    """N(0, sigma) restricted to +-bound*sigma (rejection redraw)."""
    x = rng.normal(0.0, sigma, n) if sigma > 0 else np.zeros(n)
    if sigma > 0:
        lim = bound * sigma
        bad = np.abs(x) > lim
        while np.any(bad):
            x[bad] = rng.normal(0.0, sigma, int(bad.sum()))
            bad = np.abs(x) > lim
    return x


def _dead_time_filter(times_ps: np.ndarray, dead_ps: float) -> np.ndarray:
    """Accept mask for sorted arrival times under non-paralyzable dead time."""
    n = len(times_ps)
    accepted = np.ones(n, dtype=bool)
    if dead_ps <= 0 or n == 0:
        return accepted
    last = -math.inf
    for i in range(n):
        t = times_ps[i]
        if t - last < dead_ps:
            accepted[i] = False
        else:
            last = t
    return accepted


def _quantize(times_ps: np.ndarray, quantum_s: float) -> np.ndarray:
    q = int(round(quantum_s * PS_PER_S))
    t = times_ps.astype(np.int64)
    return (t // q) * q


def _guard(config: ExperimentConfig) -> None:
    expected = config.electron_rate * config.duration
    if expected > config.max_electrons:
        raise ValueError(
            f"rate*duration = {expected:.3g} electrons exceeds the resource guard "
            f"({config.max_electrons:.3g}); raise max_electrons to override"
        )


def _electron_arrivals(rng: np.random.Generator, config: ExperimentConfig) -> np.ndarray:
    duration_ps = config.duration * PS_PER_S
    n = rng.poisson(config.electron_rate * config.duration)
    t = np.sort(rng.uniform(0.0, duration_ps, n)).astype(np.int64)
    return t


def _detect_channel(rng, cfg: ChannelConfig, true_times_ps: np.ndarray, duration_ps: float):
    """Run one photon chain: jitter, darks, dead time, quantization.

    Returns (accepted mask over the signal photons, accepted signal times,
    accepted dark times), timestamps quantized.
    """
    sigma = cfg.jitter_fwhm * FWHM_TO_SIGMA * PS_PER_S
    times = true_times_ps.astype(float)
    if sigma > 0:
        times = times + rng.normal(0.0, sigma, len(times))
    n_dark = rng.poisson(cfg.dark_rate * duration_ps / PS_PER_S)
    dark = rng.uniform(0.0, duration_ps, n_dark)

    merged = np.concatenate([times, dark])
    is_signal = np.concatenate([np.ones(len(times), bool), np.zeros(n_dark, bool)])
    src = np.concatenate([np.arange(len(times)), np.full(n_dark, -1)])
    inside = (merged >= 0) & (merged < duration_ps)
    merged, is_signal, src = merged[inside], is_signal[inside], src[inside]
    order = np.argsort(merged, kind="stable")
    merged, is_signal, src = merged[order], is_signal[order], src[order]

    live = _dead_time_filter(merged, cfg.dead_time * PS_PER_S)
    merged, is_signal, src = merged[live], is_signal[live], src[live]
    stamped = _quantize(merged, cfg.timestamp_quantum)

    accepted_mask = np.zeros(len(true_times_ps), dtype=bool)
    accepted_times = np.full(len(true_times_ps), -1, dtype=np.int64)
    sig_src = src[is_signal]
    accepted_mask[sig_src] = True
    accepted_times[sig_src] = stamped[is_signal]
    return accepted_mask, accepted_times, stamped[~is_signal]


def generate(config: ExperimentConfig,
             pixels: bool = True) -> tuple[EventStream, PixelHitStream, GroundTruth]:
    """Simulate one acquisition; deterministic for a fixed (config, seed).

    ``pixels=False`` skips the camera-level cluster emission (returns an
    empty PixelHitStream); the event stream and ground truth are unchanged.
    """
    _guard(config)
    rng = np.random.default_rng(config.seed)
    phys = config.physics
    duration_ps = config.duration * PS_PER_S

    t_e = _electron_arrivals(rng, config)
    n_e = len(t_e)

    g2 = phys.coupling.sample_g_squared(rng, n_e)
    k = rng.poisson(g2)

    cont_hit = rng.random(n_e) < phys.continuum_prob
    cont = np.where(cont_hit, rng.exponential(phys.continuum_decay, n_e), 0.0)
    noise = _truncated_normal(rng, phys.zlp_sigma, n_e)

    n_ph = int(k.sum())
    parent = np.repeat(np.arange(n_e), k)
    sigma_pm = phys.pm_bandwidth * FWHM_TO_SIGMA
    e_ph = rng.normal(phys.photon_energy, sigma_pm, n_ph)
    photon_loss = np.bincount(parent, weights=e_ph, minlength=n_e) if n_ph else np.zeros(n_e)

    loss = photon_loss + cont
    measured = loss + noise
    if config.zlp_drift_ev_per_s:
        measured = measured + config.zlp_drift_ev_per_s * (t_e / PS_PER_S)

    # photon routing and per-channel chains
    to_a = rng.random(n_ph) < config.splitter_ratio
    channel = np.where(to_a, CHANNEL_A, CHANNEL_B).astype(np.int8)
    survived = np.zeros(n_ph, dtype=bool)
    accepted = np.zeros(n_ph, dtype=bool)
    ph_times = np.full(n_ph, -1, dtype=np.int64)
    dark_times: dict[int, np.ndarray] = {}
    for ch, cfg in ((CHANNEL_A, config.channel_a), (CHANNEL_B, config.channel_b)):
        on_ch = np.nonzero(channel == ch)[0]
        surv = on_ch[rng.random(len(on_ch)) < cfg.efficiency]
        survived[surv] = True
        acc_mask, acc_times, darks = _detect_channel(rng, cfg, t_e[parent[surv]], duration_ps)
        accepted[surv] = acc_mask
        ph_times[surv] = acc_times
        dark_times[ch] = darks

    # electron chain
    chain = config.electron_chain
    transmitted = rng.random(n_e) < chain.transmission
    sigma_e = chain.jitter_fwhm * FWHM_TO_SIGMA * PS_PER_S
    t_det = t_e.astype(float)
    if sigma_e > 0:
        t_det = t_det + rng.normal(0.0, sigma_e, n_e)
    in_range = (t_det >= 0) & (t_det < duration_ps)
    transmitted = transmitted & in_range
    det_times = np.full(n_e, -1, dtype=np.int64)
    det_times[transmitted] = _quantize(t_det[transmitted], chain.timestamp_quantum)

    truth = GroundTruth(
        time_ps=t_e,
        g_squared=g2,
        true_k=k,
        continuum_ev=cont,
        loss_ev=loss,
        measured_ev=measured,
        transmitted=transmitted,
        detected_time_ps=det_times,
        photon_parent=parent,
        photon_channel=channel,
        photon_survived=survived,
        photon_accepted=accepted,
        photon_time_ps=ph_times,
        dark_times_ps=dark_times,
    )

    stream = _assemble_stream(truth)
    if pixels:
        hits = emit_pixel_hits(
            det_times[transmitted], measured[transmitted], config,
            rng=np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0]),
        )
    else:
        hits = PixelHitStream()
    return stream, hits, truth


def _assemble_stream(truth: GroundTruth) -> EventStream:
    parts = []
    n_det = int(truth.transmitted.sum())
    el = np.zeros(n_det, dtype=EVENT_DTYPE)
    el["kind"] = KIND_ELECTRON
    el["time"] = truth.detected_time_ps[truth.transmitted]
    el["energy"] = truth.measured_ev[truth.transmitted]
    parts.append(el)
    for ch in (CHANNEL_A, CHANNEL_B):
        sel = truth.photon_accepted & (truth.photon_channel == ch)
        t_sig = truth.photon_time_ps[sel]
        t_all = np.concatenate([t_sig, truth.dark_times_ps.get(ch, np.empty(0, np.int64))])
        ph = np.zeros(len(t_all), dtype=EVENT_DTYPE)
        ph["kind"] = KIND_PHOTON
        ph["channel"] = ch
        ph["time"] = t_all
        parts.append(ph)
    merged = np.concatenate(parts)
    order = np.lexsort((merged["channel"], merged["kind"], merged["time"]))
    return EventStream(merged[order])


def emit_pixel_hits(times_ps: np.ndarray, energies_ev: np.ndarray,
                    config: ExperimentConfig,
                    rng: np.random.Generator | None = None,
                    zlp_reference: int = 257) -> PixelHitStream:
    """Spread detected electrons into camera pixel clusters.

    Cluster size is 1 + Poisson(mean - 1) capped at 10; pixels grow
    8-connected around the energy-mapped column; per-pixel times add an
    independent response jitter.  Energies outside the 514-pixel range are
    clipped (count reported on the returned stream).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    chain = config.electron_chain
    n = len(times_ps)
    cols = zlp_reference - np.rint(np.asarray(energies_ev) / chain.pixel_dispersion).astype(int)
    clipped = int(np.sum((cols < 0) | (cols > 513)))
    cols = np.clip(cols, 0, 513)
    sizes = 1 + rng.poisson(max(chain.mean_cluster_size - 1.0, 0.0), n)
    sizes = np.minimum(sizes, 10)
    total = int(sizes.sum())

    xs = np.empty(total, dtype=np.int64)
    ys = np.empty(total, dtype=np.int64)
    ts = np.empty(total, dtype=float)
    sigma_px = chain.pixel_time_jitter_sigma * PS_PER_S
    neighbors = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    pos = 0
    y0 = 257
    for i in range(n):
        size = int(sizes[i])
        seed_px = (int(cols[i]), y0)
        cluster = {seed_px}
        frontier = [seed_px]
        while len(cluster) < size and frontier:
            cx, cy = frontier[rng.integers(len(frontier))]
            options = [
                (cx + dx, cy + dy)
                for dx, dy in neighbors
                if 0 <= cx + dx <= 513 and 0 <= cy + dy <= 513 and (cx + dx, cy + dy) not in cluster
            ]
            if not options:
                frontier.remove((cx, cy))
                continue
            nxt = options[rng.integers(len(options))]
            cluster.add(nxt)
            frontier.append(nxt)
        pts = sorted(cluster)
        m = len(pts)
        for j, (px, py) in enumerate(pts):
            xs[pos + j] = px
            ys[pos + j] = py
        jitter = rng.normal(0.0, sigma_px, m) if sigma_px > 0 else np.zeros(m)
        ts[pos: pos + m] = float(times_ps[i]) + jitter
        pos += m
    xs, ys, ts = xs[:pos], ys[:pos], ts[:pos]

    order = np.argsort(ts, kind="stable")
    recs = np.zeros(pos, dtype=PIXEL_DTYPE)
    recs["x"] = xs[order]
    recs["y"] = ys[order]
    recs["time"] = np.maximum(ts[order], 0.0).astype(np.int64)
    out = PixelHitStream(recs)
    out.n_clipped = clipped
    return out


def classical_control(config: ExperimentConfig) -> EventStream:
    """Control source: photon arrivals are Poisson processes with the same
    mean rates as ``generate`` but statistically independent of the electron
    losses; electron spectrum machinery is unchanged.  Any cross-correlation
    estimator must stay within classical bounds on this stream."""
    _guard(config)
    rng = np.random.default_rng(config.seed)
    phys = config.physics
    duration_ps = config.duration * PS_PER_S

    t_e = _electron_arrivals(rng, config)
    n_e = len(t_e)
    g2 = phys.coupling.sample_g_squared(rng, n_e)
    k = rng.poisson(g2)
    cont_hit = rng.random(n_e) < phys.continuum_prob
    cont = np.where(cont_hit, rng.exponential(phys.continuum_decay, n_e), 0.0)
    noise = _truncated_normal(rng, phys.zlp_sigma, n_e)
    loss = k * phys.photon_energy + cont  # photons themselves are decoupled
    measured = loss + noise
    if config.zlp_drift_ev_per_s:
        measured = measured + config.zlp_drift_ev_per_s * (t_e / PS_PER_S)

    mean_k = phys.coupling.mean_g_squared
    parts = []
    chain = config.electron_chain
    transmitted = rng.random(n_e) < chain.transmission
    sigma_e = chain.jitter_fwhm * FWHM_TO_SIGMA * PS_PER_S
    t_det = t_e.astype(float)
    if sigma_e > 0:
        t_det = t_det + rng.normal(0.0, sigma_e, n_e)
    keep = transmitted & (t_det >= 0) & (t_det < duration_ps)
    el = np.zeros(int(keep.sum()), dtype=EVENT_DTYPE)
    el["kind"] = KIND_ELECTRON
    el["time"] = _quantize(t_det[keep], chain.timestamp_quantum)
    el["energy"] = measured[keep]
    parts.append(el)

    for ch, cfg, share in (
        (CHANNEL_A, config.channel_a, config.splitter_ratio),
        (CHANNEL_B, config.channel_b, 1.0 - config.splitter_ratio),
    ):
        rate = config.electron_rate * mean_k * share * cfg.efficiency
        n_sig = rng.poisson(rate * config.duration)
        t_sig = rng.uniform(0.0, duration_ps, n_sig)
        _, acc_times, darks = _detect_channel(rng, cfg, t_sig.astype(np.int64), duration_ps)
        t_all = np.concatenate([acc_times[acc_times >= 0], darks])
        ph = np.zeros(len(t_all), dtype=EVENT_DTYPE)
        ph["kind"] = KIND_PHOTON
        ph["channel"] = ch
        ph["time"] = t_all
        parts.append(ph)

    merged = np.concatenate(parts)
    order = np.lexsort((merged["channel"], merged["kind"], merged["time"]))
    return EventStream(merged[order])
