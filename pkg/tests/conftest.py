"""Shared fixtures: a small synthetic corpus and a model trained on it.

The corpus covers all five parameter kinds and contains zero injected
anomalies, so detector tests start from a clean baseline and add their
own corruptions.  Everything is seeded; the trained model is reused
across modules because training is the expensive step.
"""

from __future__ import annotations

import copy

import pytest

from tplad.parser import RawLog
from tplad.pipeline import PipelineConfig, train_offline
from tplad.synth import generate

TINY_MANIFEST = {
    "name": "tiny",
    "lines": 700,
    "start_clock": "2024-03-01T08:00:00",
    "clock_step_seconds": [1, 3],
    "slot_defs": {
        "clock": {"kind": "time"},
        "uid": {"kind": "user", "pool": 24, "prefix": "u_"},
        "dur": {"kind": "numeric", "mean": 100.0, "sigma": 10.0, "round": 1},
        "cnt": {"kind": "numeric", "mean": 40.0, "sigma": 5.0},
        "st": {"kind": "state", "values": ["UP", "DOWN", "FLAKY"], "stay": 0.9},
        "res": {"kind": "resource",
                "pool": ["/var/a/x.log", "/var/a/y.log",
                         "/var/b/z.dat", "svc://core/q1"]},
    },
    "templates": [
        {"name": "alpha", "text": "alpha job {uid} started at {clock} took {dur} ms ok"},
        {"name": "beta", "text": "beta store flushed {cnt} rows"},
        {"name": "gamma", "text": "gamma link {st} on port fixed"},
        {"name": "delta", "text": "delta fetch {res} done"},
        {"name": "omega", "text": "omega heartbeat steady"},
    ],
    "process": {
        "start": "alpha",
        "transitions": {
            "alpha": [["beta", 0.6], ["gamma", 0.4]],
            "beta": [["gamma", 0.5], ["delta", 0.5]],
            "gamma": [["delta", 0.7], ["omega", 0.3]],
            "delta": [["omega", 0.5], ["alpha", 0.5]],
            "omega": [["alpha", 1.0]],
        },
    },
}

TINY_CONFIG_DICT = {
    "embedding": {"dim": 8, "epochs": 2},
    "seqmodel": {"hidden": 8, "window": 4, "epochs": 2, "batch_size": 16},
    "seed": 11,
}


@pytest.fixture()
def tiny_manifest():
    """A fresh deep copy so tests can mutate it freely."""
    return copy.deepcopy(TINY_MANIFEST)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate(copy.deepcopy(TINY_MANIFEST), seed=11)


@pytest.fixture(scope="session")
def tiny_raws(tiny_corpus):
    return [RawLog(i + 1, line) for i, line in enumerate(tiny_corpus.lines)]


@pytest.fixture(scope="session")
def tiny_config():
    return PipelineConfig.from_dict(copy.deepcopy(TINY_CONFIG_DICT))


@pytest.fixture(scope="session")
def tiny_model(tiny_raws, tiny_config):
    state, _ = train_offline(tiny_raws, tiny_config)
    return state
