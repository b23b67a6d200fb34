from __future__ import annotations

import sys

import pytest


# each test runs on cwd to its temp dir
@pytest.fixture(autouse=True)
def go_to_tmpdir(request):
    # Get the fixture dynamically by its name.
    tmpdir = request.getfixturevalue("tmpdir")
    # ensure local test created packages can be imported
    sys.path.insert(0, str(tmpdir))
    # Chdir only for the duration of the test.
    with tmpdir.as_cwd():
        yield


@pytest.fixture
def two_epoch_document():
    # Epoch 0 has states a, b; epoch 1 has c, d. Action sets differ per state.
    return {
        "horizon": 2,
        "r_star": 1.0,
        "epochs": [
            {
                "states": ["a", "b"],
                "actions": {"a": ["x", "y"], "b": ["x"]},
                "rewards": {"a": {"x": 1.0, "y": 0.5}, "b": {"x": 0.0}},
                "transitions": {
                    "a": {"x": {"c": 1.0}, "y": {"c": 0.5, "d": 0.5}},
                    "b": {"x": {"d": 1.0}},
                },
            },
            {
                "states": ["c", "d"],
                "actions": {"c": ["x"], "d": ["x", "y"]},
                "rewards": {"c": {"x": 1.0}, "d": {"y": 1.0}},
            },
        ],
    }
