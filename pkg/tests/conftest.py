import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from robustkit.dataio import synth_dataset  # noqa: E402
from robustkit.model import TrainSchedule, make_classifier, train_backbone  # noqa: E402

# kernels are only bit-reproducible at a fixed intra-op thread count
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def data():
    return synth_dataset(0, 3000), synth_dataset(1, 400)


@pytest.fixture(scope="session")
def trained(data):
    """Plain CNN trained to ~98% on the synthetic task (about a minute)."""
    train, _ = data
    clf = make_classifier(10, None, seed=0)
    clf, trace = train_backbone(train, clf, TrainSchedule(epochs=8, lr=3e-3, batch_size=32))
    clf.eval()
    return clf, trace


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
