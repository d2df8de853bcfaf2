"""Command-line pipeline: ``simulate``, ``analyze``, ``report``.

Every run writes a manifest recording the config hash, seed, tool version
and produced files; report outputs embed the same hash so any figure can be
traced to the exact configuration that produced it.  Exit codes: 0 ok,
2 config error, 3 data error, 4 estimator failure.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import correlate, ingest, model, simgen, stats
from .events import (
    CHANNEL_A,
    CHANNEL_B,
    EventStream,
    ParseError,
    read_events,
    write_events,
    write_pixel_hits,
)

log = logging.getLogger("fockherald")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATOR = 4

MANIFEST_SCHEMA = 1


class DataError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("FOCKHERALD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(path_str: str) -> Path:
    path = Path(path_str)
    if path.exists():
        return path
    builtin = importlib.resources.files("fockherald").joinpath("presets", path_str)
    if builtin.is_file():
        return Path(str(builtin))
    raise cfgmod.ConfigError(f"config file not found: {path_str}")


def _write_manifest(out_dir: Path, command: str, values, seed: int,
                    inputs: list[str], outputs: list[str], timings: dict) -> None:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "tool": "fockherald",
        "version": __version__,
        "command": command,
        "config_hash": cfgmod.config_hash(values),
        "seed": seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "timings_s": timings,  # excluded from any determinism comparison
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_simulate(args) -> int:
    cfg_path = _resolve_config(args.config)
    experiment, values = cfgmod.load_config(cfg_path)
    if args.seed is not None:
        values["run"]["seed"] = str(args.seed)
        experiment = replace(experiment, seed=int(args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    stream, pixels, truth = simgen.generate(experiment, pixels=args.pixels)
    t_gen = time.time() - t0

    outputs = []
    events_path = out_dir / "events.bin"
    write_events(stream, events_path)
    outputs.append(events_path.name)
    if args.pixels:
        pixels_path = out_dir / "pixels.bin"
        write_pixel_hits(pixels, pixels_path)
        outputs.append(pixels_path.name)
    if args.ground_truth:
        gt_path = out_dir / "ground_truth.jsonl"
        truth.write_jsonl(gt_path)
        outputs.append(gt_path.name)
    config_copy = out_dir / "config.cfg"
    config_copy.write_text(cfg_path.read_text())
    outputs.append(config_copy.name)
    _write_manifest(out_dir, "simulate", values, experiment.seed,
                    [str(cfg_path)], outputs, {"generate": round(t_gen, 3)})
    log.info("simulated %d events in %.1fs", len(stream), t_gen)
    return EXIT_OK


def _meta(values, experiment) -> dict:
    return {"config_hash": cfgmod.config_hash(values), "seed": experiment.seed,
            "tool_version": __version__}


def _m_window(photon_energy: float, m: int, halfwidth: float = 0.45) -> tuple[float, float]:
    return (m * photon_energy - halfwidth, m * photon_energy + halfwidth)


class Analysis:
    """Shared state for the estimator registry (lazy matching/cube)."""

    def __init__(self, stream: EventStream, experiment, values, workers: int):
        self.stream = stream
        self.experiment = experiment
        self.values = values
        self.params = cfgmod.analysis_params(values)
        self.workers = workers
        self.meta = _meta(values, experiment)
        self._records = None
        self._cube = None
        self.duration = experiment.duration

    @property
    def records(self):
        if self._records is None:
            rec = correlate.match_stream(self.stream, self.params["max_delay"])
            self._records = correlate.dedupe_true_coincidences(rec)
        return self._records

    @property
    def cube(self):
        if self._cube is None:
            el = self.stream.electrons()
            axes = correlate.CubeAxes.default(tau_bin=self.params["tau_bin"],
                                              e_bin=self.params["e_bin"])
            self._cube = correlate.build_cube_sharded(
                el, self.stream.photon_times(CHANNEL_A), self.stream.photon_times(CHANNEL_B),
                max_delay=self.params["max_delay"], axes=axes,
                workers=self.workers)
        return self._cube

    def window(self, m: int) -> tuple[float, float]:
        return _m_window(self.experiment.physics.photon_energy, m)


def _est_spectrum(ana: Analysis) -> list[stats.Report]:
    el = ana.stream.electrons()
    step = ana.params["e_bin"]
    edges = np.arange(-2.0, 5.0 + step / 2, step)
    counts, _ = np.histogram(el["energy"], bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    init = ana.experiment.physics
    fit = model.fit_spectrum(counts, centers, init)
    density = counts / max(counts.sum() * step, 1)
    curve = model.spectrum_model(fit.params, centers, populations=fit.populations.p)
    rep = stats.Report(
        estimator="spectrum",
        params={
            "fit_mean_g0": fit.params.coupling.mean_g0,
            "fit_std_g0": fit.params.coupling.std_g0,
            "fit_zlp_sigma_ev": fit.params.zlp_sigma,
            "fit_photon_energy_ev": fit.params.photon_energy,
            "fit_continuum_prob": fit.params.continuum_prob,
            "fit_continuum_decay_ev": fit.params.continuum_decay,
            "populations": [float(p) for p in fit.populations.p],
            "reduced_chi2": fit.goodness,
            "sub_poissonian": fit.coupling_fit.sub_poissonian,
            "model_curve": [float(v) for v in curve],
        },
        axes={"energy_ev": [float(c) for c in centers]},
        values=[float(v) for v in density],
        stderr=[float(v) for v in np.sqrt(counts + 1) / max(counts.sum() * step, 1)],
        metadata=ana.meta,
    )
    return [rep]


def _hist2d_report(name, hist: correlate.Histogram, meta, params=None) -> stats.Report:
    axes = {f"{n}": [float(c) for c in hist.centers(i)] for i, (n, _) in enumerate(hist.axes)}
    return stats.Report(
        estimator=name, params=params or {}, axes=axes,
        values=np.asarray(hist.counts).ravel().tolist(),
        stderr=np.sqrt(np.clip(np.asarray(hist.counts, dtype=float), 1, None)).ravel().tolist(),
        metadata=meta,
    )


def _est_cube(ana: Analysis) -> list[stats.Report]:
    cube = ana.cube
    reports = []
    # electron-photon(A) pair histogram: no condition on the other channel
    fig2c = correlate.Histogram(cube.pair_a, [("tau_a", cube.axes.tau_a_edges),
                                              ("e", cube.axes.e_edges)])
    reports.append(_hist2d_report("fig2c", fig2c, ana.meta))
    rec_true = correlate.build_cube(ana.records, cube.axes, require_true="a")
    fig2d = correlate.project(rec_true, keep=("tau_diff", "e"))
    reports.append(_hist2d_report("fig2d", fig2d, ana.meta))
    for m, name in ((1, "fig4a"), (2, "fig4b")):
        proj = correlate.project(cube, keep=("tau_a", "tau_b"), ranges={"e": ana.window(m)})
        reports.append(_hist2d_report(name, proj, ana.meta, {"m": m, "energy_window": ana.window(m)}))
    return reports


def _est_heralded_spectra(ana: Analysis) -> list[stats.Report]:
    rec = ana.records
    w = ana.params["coincidence_window"] * 1e12
    a = rec["true_a"] & (stats.records_abs(rec["tau_a"]) <= w)
    b = rec["true_b"] & (stats.records_abs(rec["tau_b"]) <= w)
    step = ana.params["e_bin"]
    edges = np.arange(-1.5, 4.5 + step / 2, step)
    centers = 0.5 * (edges[:-1] + edges[1:])
    series = {
        "all": np.ones(len(rec), dtype=bool),
        "one_photon": (a | b) & ~(a & b),
        "two_photon": a & b,
    }
    rows = []
    for sel in series.values():
        counts, _ = np.histogram(rec["e_el"][sel], bins=edges)
        total = max(counts.sum() * step, 1)
        rows.append((counts / total).tolist())
    return [stats.Report(
        estimator="heralded_spectra",
        params={"series": list(series)},
        axes={"series": list(range(len(series))), "energy_ev": [float(c) for c in centers]},
        values=rows,
        stderr=[],
        metadata=ana.meta,
    )]


def _est_g2(ana: Analysis) -> list[stats.Report]:
    reports = []
    surface = stats.g2_heralded_surface(ana.cube, ana.window(1))
    reports.append(stats.Report(
        estimator="fig4e",
        params={"energy_window": ana.window(1)},
        axes={"tau_a_ps": surface.tau_a_ps.tolist(), "tau_b_ps": surface.tau_b_ps.tolist()},
        values=np.nan_to_num(surface.values, nan=-1.0).ravel().tolist(),
        stderr=np.nan_to_num(surface.stderr, nan=-1.0).ravel().tolist(),
        metadata=ana.meta,
    ))
    ta_curve = stats.g2_time_averaged(ana.cube, ana.window(1))
    reports.append(stats.Report(
        estimator="g2_time_averaged",
        params={"energy_window": ana.window(1)},
        axes={"tau_ps": ta_curve.tau_ps.tolist()},
        values=np.nan_to_num(ta_curve.g2, nan=-1.0).tolist(),
        stderr=np.nan_to_num(ta_curve.stderr, nan=-1.0).tolist(),
        metadata=ana.meta,
    ))
    wc = ana.params["coincidence_window"]
    rows, errs = [], []
    for window in (None, ana.window(1)):
        qs, g2q, g2e = stats.g2_discrete(ana.records, window, wc)
        rows.append(g2q.tolist())
        errs.append(g2e.tolist())
    reports.append(stats.Report(
        estimator="fig4f",
        params={"series": ["unfiltered", "m1"], "coincidence_window_s": wc},
        axes={"series": [0, 1], "q": qs.tolist()},
        values=rows,
        stderr=errs,
        metadata=ana.meta,
    ))
    return reports


def _car_histograms(ana: Analysis):
    rec = ana.records
    e = rec["e_el"]
    w1 = ana.window(1)
    w2 = ana.window(2)
    in1 = (e >= w1[0]) & (e <= w1[1])
    in2 = (e >= w2[0]) & (e <= w2[1])
    present_a = rec["tau_a"] != correlate.ABSENT
    present_b = rec["tau_b"] != correlate.ABSENT
    tau_au = np.concatenate([
        rec["tau_a"][in1 & present_a], rec["tau_b"][in1 & present_b]
    ]).astype(float)
    edges = np.arange(-100_000, 100_000 + 500, 500.0)
    h1 = correlate.Histogram(np.histogram(tau_au, bins=edges)[0], [("tau", edges)])
    both2 = in2 & present_a & present_b
    e2 = np.arange(-100_000, 100_000 + 2_500, 2_500.0)
    h2 = correlate.Histogram(
        np.histogram2d(rec["tau_a"][both2].astype(float),
                       rec["tau_b"][both2].astype(float), bins=(e2, e2))[0],
        [("tau_a", e2), ("tau_b", e2)],
    )
    return h1, h2


def _est_car(ana: Analysis) -> list[stats.Report]:
    h1, h2 = _car_histograms(ana)
    hw = ana.params["car_signal_halfwidth"] * 1e12
    car1 = stats.car(h1, {"tau": (-hw, hw)},
                     [{"tau": (-90_000, -30_000)}, {"tau": (30_000, 90_000)}])
    car2 = stats.car(h2, {"tau_a": (-hw, hw), "tau_b": (-hw, hw)},
                     [{"tau_a": (10_000, 95_000), "tau_b": (-95_000, -10_000)},
                      {"tau_a": (-95_000, -10_000), "tau_b": (10_000, 95_000)}])
    out = []
    for name, res, m in (("car_m1", car1, 1), ("car_m2", car2, 2)):
        out.append(stats.Report(
            estimator=name,
            params={"m": m, "signal_counts": res.signal_counts,
                    "accidental_estimate": res.accidental_estimate,
                    "infinite": res.infinite},
            axes={}, values=[res.car], stderr=[res.stderr], metadata=ana.meta,
        ))
    return out


def _est_csi(ana: Analysis) -> list[stats.Report]:
    curve = stats.csi_gamma(ana.stream, ana.params["csi_bin"], ana.params["csi_range"],
                            duration=ana.duration)
    return [stats.Report(
        estimator="fig4c",
        params={"bin_s": ana.params["csi_bin"], "g_e2": curve.g_e2, "g2_zero": curve.g2_zero},
        axes={"tau_ps": curve.tau_ps.tolist()},
        values=curve.gamma.tolist(),
        stderr=curve.stderr.tolist(),
        metadata=ana.meta,
    )]


def _est_hbt(ana: Analysis) -> list[stats.Report]:
    curve = stats.g2_unheralded(
        ana.stream.photon_times(CHANNEL_A), ana.stream.photon_times(CHANNEL_B),
        ana.params["g2_bin"], ana.params["g2_span"], duration=ana.duration)
    return [stats.Report(
        estimator="g2_unheralded",
        params={"bin_s": ana.params["g2_bin"]},
        axes={"tau_ps": curve.tau_ps.tolist()},
        values=curve.g2.tolist(), stderr=curve.stderr.tolist(), metadata=ana.meta,
    )]


def _est_efficiencies(ana: Analysis) -> list[stats.Report]:
    rec = ana.records
    exp = ana.experiment
    w = ana.params["coincidence_window"] * 1e12
    a = rec["true_a"] & (stats.records_abs(rec["tau_a"]) <= w)
    b = rec["true_b"] & (stats.records_abs(rec["tau_b"]) <= w)
    e = rec["e_el"]
    w1, w2 = ana.window(1), ana.window(2)
    in1 = (e >= w1[0]) & (e <= w1[1])
    in2 = (e >= w2[0]) & (e <= w2[1])
    p_a = exp.splitter_ratio * exp.channel_a.efficiency
    p_b = (1 - exp.splitter_ratio) * exp.channel_b.efficiency
    n_ph = len(ana.stream.photon_times(CHANNEL_A)) + len(ana.stream.photon_times(CHANNEL_B))
    c_e = int(np.count_nonzero((in1 | in2) & a)) + int(np.count_nonzero((in1 | in2) & b))
    eta_e = stats.heralding_efficiency(c_e, n_ph, 1.0, exp.electron_chain.transmission)
    c_aub = int(np.count_nonzero(in1 & (a | b)))
    eta_aub = stats.heralding_efficiency(c_aub, int(in1.sum()), p_a + p_b, 1.0)
    c_ab = int(np.count_nonzero(in2 & a & b))
    eta_ab = stats.heralding_efficiency(c_ab, int(in2.sum()), 2 * p_a * p_b, 1.0)
    out = []
    for name, res, extra in (
        ("eta_electron", eta_e, {"n_coincident": c_e, "n_heralds": n_ph}),
        ("eta_photon_either", eta_aub, {"n_coincident": c_aub, "n_heralds": int(in1.sum())}),
        ("eta_photon_pair", eta_ab, {"n_coincident": c_ab, "n_heralds": int(in2.sum())}),
    ):
        out.append(stats.Report(
            estimator=name,
            params={**extra, "inconsistent": res.inconsistent},
            axes={}, values=[res.eta], stderr=[res.stderr], metadata=ana.meta,
        ))
    return out


def _est_coupling(ana: Analysis) -> list[stats.Report]:
    exp = ana.experiment
    p_a = exp.splitter_ratio * exp.channel_a.efficiency
    p_b = (1 - exp.splitter_ratio) * exp.channel_b.efficiency
    est = stats.coupling_from_coincidences(
        ana.records, p_a, p_b, ana.window(1), ana.window(2),
        ana.params["coincidence_window"])
    return [stats.Report(
        estimator="coupling",
        params={"n_single": est.n_single, "n_pair": est.n_pair,
                "low_statistics": est.low_statistics},
        axes={}, values=[est.g0], stderr=[est.stderr], metadata=ana.meta,
    )]


ESTIMATORS = {
    "spectrum": _est_spectrum,
    "cube": _est_cube,
    "heralded_spectra": _est_heralded_spectra,
    "g2": _est_g2,
    "car": _est_car,
    "csi": _est_csi,
    "hbt": _est_hbt,
    "efficiencies": _est_efficiencies,
    "coupling": _est_coupling,
}


def cmd_analyze(args) -> int:
    cfg_path = _resolve_config(args.config)
    experiment, values = cfgmod.load_config(cfg_path)
    events_path = Path(args.events)
    if not events_path.exists():
        raise DataError(f"events file not found: {events_path}")
    try:
        stream = read_events(events_path)
    except ParseError as exc:
        raise DataError(f"cannot parse {events_path}: {exc}") from exc

    names = [n.strip() for n in args.estimators.split(",")] if args.estimators else list(ESTIMATORS)
    unknown = [n for n in names if n not in ESTIMATORS]
    if unknown:
        raise cfgmod.ConfigError(
            f"unknown estimator(s) {unknown}; valid names: {', '.join(sorted(ESTIMATORS))}"
        )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    ana = Analysis(stream, experiment, values, workers)

    outputs, timings = [], {}
    failures = []
    for name in names:
        t0 = time.time()
        try:
            reports = ESTIMATORS[name](ana)
        except Exception as exc:  # continue with the other estimators
            log.error("estimator %s failed: %s", name, exc)
            failures.append((name, str(exc)))
            continue
        timings[name] = round(time.time() - t0, 3)
        for rep in reports:
            json_path = out_dir / f"{rep.estimator}.json"
            rep.write_json(json_path)
            rep.write_csv(out_dir / f"{rep.estimator}.csv")
            outputs += [json_path.name, f"{rep.estimator}.csv"]
    if "cube" in names and ana._cube is not None:
        cube_path = out_dir / "cube.bin"
        correlate.write_cube(ana.cube, cube_path)
        outputs.append(cube_path.name)
    _write_manifest(out_dir, "analyze", values, experiment.seed,
                    [str(events_path), str(cfg_path)], outputs, timings)
    if failures:
        for name, msg in failures:
            print(f"estimator-failed: {name}: {msg}", file=sys.stderr)
        return EXIT_ESTIMATOR
    return EXIT_OK


FIGURE_SOURCES = {
    "fig2c": "fig2c",
    "fig2d": "fig2d",
    "fig3a": "spectrum",
    "fig3d": "heralded_spectra",
    "fig4a": "fig4a",
    "fig4b": "fig4b",
    "fig4c": "fig4c",
    "fig4e": "fig4e",
    "fig4f": "fig4f",
}


def cmd_report(args) -> int:
    paths: list[Path] = []
    for item in args.reports:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.json"))
        else:
            paths.append(p)
    paths = [p for p in paths if p.name != "manifest.json"]
    if not paths:
        raise DataError("no report files found")
    reports = {}
    for p in paths:
        try:
            rep = stats.Report.from_json(p.read_text())
        except ValueError as exc:
            raise DataError(f"{p}: {exc}") from exc
        reports[rep.estimator] = rep

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for fig, source in FIGURE_SOURCES.items():
        rep = reports.get(source)
        if rep is None:
            continue
        dest = out_dir / f"{fig}.csv"
        if fig == "fig3a":
            _write_fig3a(rep, dest)
        else:
            rep.write_csv(dest)
        outputs.append(dest.name)
    index = {
        "schema_version": stats.SCHEMA_VERSION,
        "figures": sorted(outputs),
        "sources": {fig: src for fig, src in FIGURE_SOURCES.items() if src in reports},
        "config_hashes": sorted({r.metadata.get("config_hash", "") for r in reports.values()}),
    }
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {len(outputs)} figure files to {out_dir}")
    return EXIT_OK


def _write_fig3a(rep: stats.Report, dest: Path) -> None:
    centers = rep.axes["energy_ev"]
    model_curve = rep.params.get("model_curve", [float("nan")] * len(centers))
    with open(dest, "w") as fh:
        fh.write("energy_ev,data_density,model_density\n")
        for c, d, m in zip(centers, rep.values, model_curve):
            fh.write(f"{c!r},{d!r},{m!r}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fockherald",
        description="Simulate and analyze electron-heralded photon detection streams.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate detection streams from a config")
    sim.add_argument("--config", required=True, help="config file or preset name (paper.cfg)")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--pixels", action="store_true", help="also write camera pixel hits")
    sim.add_argument("--ground-truth", action="store_true", help="also write ground_truth.jsonl")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="run estimators over an event file")
    ana.add_argument("--events", required=True)
    ana.add_argument("--config", required=True)
    ana.add_argument("--out", required=True)
    ana.add_argument("--estimators", default="",
                     help=f"comma list from: {', '.join(sorted(ESTIMATORS))} (default all)")
    ana.add_argument("--threads", type=int, default=1, help="worker processes (0 = auto)")
    ana.set_defaults(func=cmd_analyze)

    rep = sub.add_parser("report", help="bundle analysis reports into figure CSV files")
    rep.add_argument("--reports", nargs="+", required=True, help="report dirs or JSON files")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"config-error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError) as exc:
        print(f"data-error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"estimator-error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    raise SystemExit(main())
