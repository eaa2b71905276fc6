import functools
import time

import numpy as np
import pytest
from hypothesis import settings

from cannet.datasets import chain_spec, synth_scm_dataset, SyntheticScmSpec
from cannet.lgn import LgnModel, TrainConfig, train_lgn

settings.register_profile("cannet", deadline=None, max_examples=60)
settings.load_profile("cannet")

CHAIN_SEEDS = (0, 1, 2, 3, 4)

# wall-clock seconds of each cached training run, keyed by (kind, seed)
TRAIN_SECONDS: dict = {}

# acceptance results, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@functools.lru_cache(maxsize=None)
def chain_run(seed: int):
    """Default-config LGN on 5000 rows of the a -> b chain; cached for the session."""
    data = synth_scm_dataset(chain_spec(), 5000, seed=100 + seed)
    start = time.perf_counter()
    ckpt, history = train_lgn(data, TrainConfig(seed=seed))
    TRAIN_SECONDS[("chain", seed)] = time.perf_counter() - start
    return data, LgnModel.from_checkpoint(ckpt), history


@functools.lru_cache(maxsize=None)
def independent_run(seed: int):
    spec = SyntheticScmSpec.from_dict({"nodes": [{"name": n} for n in "xyz"], "edges": []})
    data = synth_scm_dataset(spec, 5000, seed=300 + seed)
    ckpt, history = train_lgn(data, TrainConfig(seed=seed))
    return data, LgnModel.from_checkpoint(ckpt), history


@pytest.fixture(scope="session")
def chain_runs():
    return [chain_run(s) for s in CHAIN_SEEDS]


@pytest.fixture(scope="session")
def chain_model():
    return chain_run(0)


def rng(seed=0):
    return np.random.default_rng(seed)
