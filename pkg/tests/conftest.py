import json

import pytest

from rrpcp import scene, subspace

# a 12x12 scene with one moving block: seconds per run instead of minutes
SMALL_CONFIG = {
    "name": "small",
    "image_dims": [12, 12],
    "horizon": 30,
    "q": 1e-4,
    "R": 1e-3,
    "seeds": [0, 1],
    "boundary": "reflect",
    "background": {
        "n_candidates": 21, "initial": 20, "f": 0.95, "stationary_stddev": 10.0,
        "growth_frames": 10, "initial_fraction": 0.1, "decay_rate": 0.9,
        "training_length": 2000,
        "schedule": [{"time": 5, "add": [20]}],
    },
    "objects": [
        {"half_width": 2, "intensity": 80, "position": [4.0, 4.0], "velocity": [0.0, 0.1],
         "bounds": [[3, 5], [3, 9]]},
    ],
    "pipeline": {"f": 0.95, "tau": 10, "buffer_size": 20, "eps_init": 1.0},
}


@pytest.fixture
def small_config():
    return json.loads(json.dumps(SMALL_CONFIG))


@pytest.fixture
def small_config_file(tmp_path, small_config):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config, indent=2))
    return path


@pytest.fixture(scope="session")
def small_scene():
    cfg = scene.parse_config(json.dumps(SMALL_CONFIG))
    seq, train = scene.build_scene(cfg, 0)
    return cfg, seq, subspace.estimate_initial_pc(train)


# one verdict line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
