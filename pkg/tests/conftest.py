"""Session fixtures for the long desk runs shared by acceptance and analysis tests."""
import time

import pytest

from msa2net import analysis as A
from msa2net import training as TR
from msa2net.network import NetworkConfig, build_model

DESK_SEED = 42
DESK_TRAIN_N = 200
DESK_EVAL_N = 50
DESK_EPOCHS = 200
# the six-row sweep uses a shorter schedule so it fits beside the main run
ABLATION_EPOCHS = 30


def desk_data(seed=DESK_SEED):
    cfg = NetworkConfig()
    train_set = TR.generate_synthetic_dataset(seed, DESK_TRAIN_N, cfg.image_size, cfg.num_classes)
    eval_set = TR.generate_synthetic_dataset(seed + 1, DESK_EVAL_N, cfg.image_size, cfg.num_classes)
    return train_set, eval_set


class DeskRun:
    def __init__(self, model, curve, report, seconds):
        self.model = model
        self.curve = curve
        self.report = report
        self.seconds = seconds


@pytest.fixture(scope="session")
def desk_run():
    train_set, eval_set = desk_data()
    model = build_model(NetworkConfig(seed=DESK_SEED))
    t0 = time.perf_counter()
    _, curve = TR.train(model, train_set, DESK_EPOCHS, TR.adam_state(1e-3), seed=DESK_SEED, batch_size=4)
    seconds = time.perf_counter() - t0
    return DeskRun(model, curve, TR.evaluate(model, eval_set), seconds)


def run_desk_ablation(seed, keep=None):
    train_set, eval_set = desk_data(seed)
    models = {}

    def grab(row, model):
        if keep and row in keep:
            models[row] = model

    rows = A.run_ablation(NetworkConfig(), train_set, eval_set, ABLATION_EPOCHS, seed=seed, on_model=grab)
    return rows, models


@pytest.fixture(scope="session")
def desk_ablation():
    """Sweep on the desk seed, keeping the full model (row 6) and its MASAG-off twin (row 3)."""
    return run_desk_ablation(DESK_SEED, keep=(3, 6))
