"""Shared fixtures.

Trained fields are expensive, so they come from the experiment checkpoint
cache. Set ``MISHAPE_TEST_CACHE`` to a directory to keep them between
sessions; otherwise a fresh temporary cache is used and everything is trained
from scratch.
"""

import os
import time

import pytest

from mishape.experiment import ExperimentConfig, build_dataset, pretrained_field, shaped_field


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    env = os.environ.get("MISHAPE_TEST_CACHE")
    return env if env else str(tmp_path_factory.mktemp("field-cache"))


@pytest.fixture(scope="session")
def bench(cache_dir):
    """Benchmark configuration for scene seed 0."""
    return ExperimentConfig(experiment_id="bench", cache_dir=cache_dir, output_dir=cache_dir)


@pytest.fixture(scope="session")
def bench_data(bench):
    return build_dataset(bench)


# wall-clock seconds spent building the benchmark fields in this session (absent when loaded from cache)
TIMINGS = {}


def _cached(config, stage):
    from mishape.experiment import SHAPE_KEYS, TRAIN_KEYS, _cache_dir

    keys = TRAIN_KEYS if stage == "train" else SHAPE_KEYS
    return (_cache_dir(config) / f"{stage}-{config.digest(keys)[:16]}.jtna").exists()


@pytest.fixture(scope="session")
def trained(bench, bench_data):
    fresh = not _cached(bench, "train")
    start = time.perf_counter()
    params = pretrained_field(bench, bench_data)
    if fresh:
        TIMINGS["train"] = time.perf_counter() - start
    return params


@pytest.fixture(scope="session")
def shaped(bench, bench_data, trained):
    fresh = not _cached(bench, "shape")
    start = time.perf_counter()
    params, _ = shaped_field(bench, bench_data, trained)
    if fresh:
        TIMINGS["shape"] = time.perf_counter() - start
    return params


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
