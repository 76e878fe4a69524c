from dataclasses import dataclass

import pytest

from unlearnlab.data import DatasetBundle, ForgetSpec, build_bundle, make_synthetic
from unlearnlab.nn import Checkpoint, ModelSpec, init_checkpoint, mlp_tiny
from unlearnlab.train import Evaluator, TrainConfig, train


@dataclass
class World:
    """A small trained model with its data split, shared by the fast unit tests."""

    spec: ModelSpec
    init: Checkpoint
    pretrained: Checkpoint
    bundle: DatasetBundle


@pytest.fixture(scope="session")
def world() -> World:
    ds, scores = make_synthetic(4, 250, 0.04, 12, seed=3)
    test, test_scores = make_synthetic(4, 60, 0.04, 12, seed=3, stream="test")
    pool, _ = make_synthetic(4, 30, 0.04, 12, seed=3, stream="pool")
    bundle = build_bundle(ds, scores, ForgetSpec(fraction=None, count=24, seed=3), 0, 3,
                          test=test, pool=pool, test_scores=test_scores)
    spec = mlp_tiny(12, 4, 64)
    init = init_checkpoint(spec, 3)
    pre, _ = train(init, ds.split("train"), TrainConfig(lr=3e-3, epochs=40, batch_size=64, seed=3),
                   evaluator=Evaluator.for_bundle(bundle))
    return World(spec, init, pre, bundle)


# PASS/FAIL lines appended by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
