import numpy as np
import pytest

from fockherald import config as cfgmod
from fockherald import correlate, simgen
from fockherald.cli import _resolve_config
from fockherald.events import CHANNEL_A, CHANNEL_B


@pytest.fixture(scope="session")
def paper_config():
    path = _resolve_config("paper.cfg")
    experiment, values = cfgmod.load_config(path)
    return experiment, values, path


@pytest.fixture(scope="session")
def paper_run(paper_config):
    """Full-scale preset acquisition (~1e7 electrons), shared by the
    acceptance criteria; ~15 s to generate."""
    experiment, values, _ = paper_config
    stream, _, truth = simgen.generate(experiment, pixels=False)
    return experiment, values, stream, truth


@pytest.fixture(scope="session")
def paper_records(paper_run):
    experiment, values, stream, truth = paper_run
    params = cfgmod.analysis_params(values)
    records = correlate.match_stream(stream, params["max_delay"])
    records = correlate.dedupe_true_coincidences(records)
    return records


@pytest.fixture(scope="session")
def paper_cube(paper_run):
    experiment, values, stream, truth = paper_run
    params = cfgmod.analysis_params(values)
    el = stream.electrons()
    return correlate.build_cube_sharded(
        el, stream.photon_times(CHANNEL_A), stream.photon_times(CHANNEL_B),
        max_delay=params["max_delay"], workers=1)


def make_rng_streams(rng, n_el, n_ph, horizon=10**9):
    t_el = np.sort(rng.integers(0, horizon, n_el))
    e_el = rng.normal(0.4, 0.6, n_el).astype(np.float32)
    t_a = np.sort(rng.integers(0, horizon, n_ph))
    t_b = np.sort(rng.integers(0, horizon, n_ph))
    return t_el, e_el, t_a, t_b
