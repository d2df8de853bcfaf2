"""INI-style experiment configuration: flat key=value with sections.

Units are explicit in the key names (``dead_time_us``, ``photon_energy_ev``)
so configs stay diff-friendly and unit bugs stay impossible.  A config's
identity is the SHA-256 of its canonicalized (sorted, comment-free) content;
every derived output references that hash.
"""

from __future__ import annotations

import configparser
import hashlib
import io

from .model import CouplingSpec, SpectrumParams
from .simgen import ChannelConfig, ElectronChainConfig, ExperimentConfig


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "run": {"seed": "0", "duration_s": "1.0", "electron_rate_per_s": "1e6"},
    "physics": {
        "mean_g0": "0.247",
        "std_g0": "0.0",
        "photon_energy_ev": "0.9",
        "zlp_sigma_ev": "0.255",
        "pm_bandwidth_ev": "0.065",
        "continuum_prob": "0.0",
        "continuum_decay_ev": "2.0",
    },
    "splitter": {"ratio_a": "0.52"},
    "channel_a": {
        "efficiency": "0.02",
        "jitter_fwhm_ns": "0.3",
        "dead_time_us": "20.0",
        "dark_rate_per_s": "250",
        "timestamp_quantum_ps": "260",
    },
    "channel_b": {
        "efficiency": "0.02",
        "jitter_fwhm_ns": "0.3",
        "dead_time_us": "20.0",
        "dark_rate_per_s": "300",
        "timestamp_quantum_ps": "260",
    },
    "electron": {
        "transmission": "0.65",
        "jitter_fwhm_ns": "2.9",
        "timestamp_quantum_ns": "1.56",
        "pixel_dispersion_ev": "0.03",
        "mean_cluster_size": "3.4",
        "pixel_time_jitter_ns": "1.5",
    },
    "guards": {"max_electrons": "1e9", "zlp_drift_ev_per_s": "0.0"},
    "analysis": {
        "max_delay_ns": "100",
        "coincidence_window_ns": "5",
        "car_signal_halfwidth_ns": "2.5",
        "tau_bin_ns": "1.56",
        "e_bin_ev": "0.03",
        "csi_bin_us": "0.2",
        "csi_range_us": "3.0",
        "g2_bin_us": "0.25",
        "g2_span_us": "4.0",
    },
}

_KNOWN_KEYS = {(s, k) for s, kv in _DEFAULTS.items() for k in kv}


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    merged = {s: dict(kv) for s, kv in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if (section, key) not in _KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            merged[section][key] = value
    return merged


def _f(values, section, key) -> float:
    raw = values[section][key]
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from exc


def experiment_from_values(values: dict[str, dict[str, str]]) -> ExperimentConfig:
    def channel(section):
        return ChannelConfig(
            efficiency=_f(values, section, "efficiency"),
            jitter_fwhm=_f(values, section, "jitter_fwhm_ns") * 1e-9,
            dead_time=_f(values, section, "dead_time_us") * 1e-6,
            dark_rate=_f(values, section, "dark_rate_per_s"),
            timestamp_quantum=_f(values, section, "timestamp_quantum_ps") * 1e-12,
        )

    physics = SpectrumParams(
        zlp_sigma=_f(values, "physics", "zlp_sigma_ev"),
        photon_energy=_f(values, "physics", "photon_energy_ev"),
        coupling=CouplingSpec(_f(values, "physics", "mean_g0"), _f(values, "physics", "std_g0")),
        continuum_prob=_f(values, "physics", "continuum_prob"),
        continuum_decay=_f(values, "physics", "continuum_decay_ev"),
        pm_bandwidth=_f(values, "physics", "pm_bandwidth_ev"),
    )
    chain = ElectronChainConfig(
        transmission=_f(values, "electron", "transmission"),
        jitter_fwhm=_f(values, "electron", "jitter_fwhm_ns") * 1e-9,
        timestamp_quantum=_f(values, "electron", "timestamp_quantum_ns") * 1e-9,
        pixel_dispersion=_f(values, "electron", "pixel_dispersion_ev"),
        mean_cluster_size=_f(values, "electron", "mean_cluster_size"),
        pixel_time_jitter_sigma=_f(values, "electron", "pixel_time_jitter_ns") * 1e-9,
    )
    seed_raw = values["run"]["seed"]
    try:
        seed = int(float(seed_raw)) if "e" in seed_raw.lower() else int(seed_raw)
    except ValueError as exc:
        raise ConfigError(f"[run] seed = {seed_raw!r} is not an integer") from exc
    try:
        return ExperimentConfig(
            electron_rate=_f(values, "run", "electron_rate_per_s"),
            duration=_f(values, "run", "duration_s"),
            physics=physics,
            splitter_ratio=_f(values, "splitter", "ratio_a"),
            channel_a=channel("channel_a"),
            channel_b=channel("channel_b"),
            electron_chain=chain,
            seed=seed,
            max_electrons=_f(values, "guards", "max_electrons"),
            zlp_drift_ev_per_s=_f(values, "guards", "zlp_drift_ev_per_s"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ExperimentConfig, dict[str, dict[str, str]]]:
    with open(path) as fh:
        values = parse_config_text(fh.read())
    return experiment_from_values(values), values


def canonical_text(values: dict[str, dict[str, str]]) -> str:
    buf = io.StringIO()
    for section in sorted(values):
        buf.write(f"[{section}]\n")
        for key in sorted(values[section]):
            buf.write(f"{key} = {values[section][key]}\n")
    return buf.getvalue()


def config_hash(values: dict[str, dict[str, str]]) -> str:
    return hashlib.sha256(canonical_text(values).encode()).hexdigest()


def analysis_params(values: dict[str, dict[str, str]]) -> dict[str, float]:
    a = values["analysis"]
    return {
        "max_delay": float(a["max_delay_ns"]) * 1e-9,
        "coincidence_window": float(a["coincidence_window_ns"]) * 1e-9,
        "car_signal_halfwidth": float(a["car_signal_halfwidth_ns"]) * 1e-9,
        "tau_bin": float(a["tau_bin_ns"]) * 1e-9,
        "e_bin": float(a["e_bin_ev"]),
        "csi_bin": float(a["csi_bin_us"]) * 1e-6,
        "csi_range": float(a["csi_range_us"]) * 1e-6,
        "g2_bin": float(a["g2_bin_us"]) * 1e-6,
        "g2_span": float(a["g2_span_us"]) * 1e-6,
    }
