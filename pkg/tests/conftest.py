import importlib

import numpy as np
import pytest

from kefs import _pykernels

KERNEL_BACKENDS = ["python"]
try:
    importlib.import_module("kefs._ckernels")
    KERNEL_BACKENDS.append("cython")
except ImportError:
    pass


@pytest.fixture(params=KERNEL_BACKENDS)
def kernels(request, monkeypatch):
    """Run the evaluation code against each available kernel backend."""
    from kefs import _kernels, evaluation

    mod = _pykernels if request.param == "python" else importlib.import_module("kefs._ckernels")
    for name in ("iou_matrix", "greedy_match", "average_precision_from_hits", "silhouette_samples"):
        monkeypatch.setattr(_kernels, name, getattr(mod, name))
    monkeypatch.setattr(evaluation, "_kernels", _kernels)
    return mod


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
