import time

import numpy as np
import pytest

from srmm.data import MaskSpec, apply_mask, gen_synthetic, pair_banks, split
from srmm.models import ModelConfig, build_model, build_two_branch, train

# the benchmark used by the end-to-end checks
SYNTH = dict(num_classes=10, dim_a=32, dim_b=32, per_class=500, sigma_a=0.3, sigma_b=0.3,
             cross_modal_correlation=0.5, seed=7)
SEEDS = (0, 1, 2)
EPOCHS = 30
BATCH = 256

ACCEPTANCE_LINES = []
TIMINGS = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_split():
    bank_a, bank_b = gen_synthetic(**SYNTH)
    ds = pair_banks(bank_a, bank_b)
    return split(ds, 0.75, seed=7)


def _train(kind, train_ds, seed):
    cfg = ModelConfig(32, 32, 10, 0.5, seed=seed)
    if kind == "tbn-early":
        model = build_two_branch(cfg, "early")
    else:
        model = build_model(cfg)
    if kind == "srmm-uni-a":
        train_ds = apply_mask(train_ds, MaskSpec("B", 0.0, seed=seed, phase="train"))
    history = train(model, train_ds, "S1", EPOCHS, BATCH, seed=seed)
    return model, history


@pytest.fixture(scope="session")
def trained(synth_split):
    """Models keyed by (kind, seed), trained once per session."""
    train_ds, _ = synth_split
    start = time.perf_counter()
    out = {}
    for seed in SEEDS:
        for kind in ("srmm", "tbn-early", "srmm-uni-a"):
            out[kind, seed] = _train(kind, train_ds, seed)
    TIMINGS["train"] = time.perf_counter() - start
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_dataset(n=40, dim=6, classes=3, seed=0, avail_b=None):
    from srmm.data import PairedDataset

    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    avail_b = np.ones(n, bool) if avail_b is None else np.asarray(avail_b)
    x_b = r.standard_normal((n, dim))
    x_b[~avail_b] = 0.0
    return PairedDataset(
        ids=np.arange(100, 100 + n), labels=labels,
        x_a=r.standard_normal((n, dim)), x_b=x_b,
        avail_a=np.ones(n, bool), avail_b=avail_b, num_classes=classes,
    )
