import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

from decoupled_qc.artefacts import ARTEFACT_KINDS  # noqa: E402
from decoupled_qc.toytrain.evaluate import evaluate_cascade  # noqa: E402
from decoupled_qc.toytrain.phantoms import generate_phantoms  # noqa: E402
from decoupled_qc.toytrain.train import Frozen, TrainConfig, train_stage  # noqa: E402

# desk-scale experiment: 500 training phantoms, 100 artefacted + 50 clean test phantoms
N_TRAIN, N_TEST, N_CONTROL = 500, 150, 50
TRAIN_SEED, TEST_SEED, EVAL_SEED = 1, 2, 3


@dataclass
class Cascade:
    frozen: Frozen
    student: object
    logs: dict
    test: object
    rows: list
    reference: float
    seconds: float


@pytest.fixture(scope="session")
def cascade():
    """The full three-stage cascade, trained once per session at desk scale."""
    with threadpool_limits(1):
        start = time.perf_counter()
        data = generate_phantoms(N_TRAIN, TRAIN_SEED)
        frozen, logs = Frozen(), {}
        stages = ["task", *[f"teacher:{k.value}" for k in ARTEFACT_KINDS], "student"]
        for stage in stages:
            state = train_stage(TrainConfig(stage=stage), data, frozen)
            logs[stage] = state.log
            if stage == "task":
                frozen.task = state.model
            elif stage.startswith("teacher:"):
                frozen.teachers[stage.split(":")[1]] = state.model
            else:
                student = state.model
        test = generate_phantoms(N_TEST, TEST_SEED)
        rows, reference = evaluate_cascade(student, test, seed=EVAL_SEED, n_control=N_CONTROL)
        seconds = time.perf_counter() - start
    return Cascade(frozen, student, logs, test, rows, reference, seconds)


_ACCEPTANCE: dict[int, str] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc}".strip()
        line = f"[{status}] criterion {self.number:>2}: {self.title}"
        if detail:
            line += f" | {detail.splitlines()[0]}"
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


def pytest_collection_modifyitems(items):
    for item in items:
        if "cascade" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
