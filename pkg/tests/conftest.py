import numpy as np
import pytest

from dagseg.gradcheck import gradcheck, numerical_grad
from dagseg.tensor import set_checked

GRAD_TOL = 1e-4


@pytest.fixture(autouse=True)
def _checked_mode():
    """NaN/Inf in any forward or backward value fails the test immediately."""
    set_checked(True)
    yield
    set_checked(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grads(f, inputs, tol=GRAD_TOL, max_coords=None, vanishing=()):
    """Relative FD check on ``inputs``; ``vanishing`` tensors must have ~0 gradient both ways.

    A relative error is meaningless when the true gradient is identically zero
    (e.g. a bias that a following batch norm subtracts out), so those are
    checked in absolute terms instead.
    """
    errors = gradcheck(f, inputs, max_coords=max_coords, rng=np.random.default_rng(7))
    assert max(errors) < tol, errors
    for t in vanishing:
        t.requires_grad = True
        t.grad = None
        f().backward()
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        assert np.abs(analytic).max() < 1e-10
        assert np.abs(numerical_grad(f, t)).max() < 1e-7
    return errors


def split_vanishing(module, suffixes=("key.bias",), block_biases=True):
    """Partition parameters into (checked, structurally zero-gradient)."""
    live, dead = [], []
    for name, p in module.named_parameters():
        zero = name.endswith(suffixes) or (block_biases and ".conv." in name and name.endswith(".bias"))
        (dead if zero else live).append(p)
    return live, dead


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}
_NOTES: dict[int, list[str]] = {}


def note(number: int, text: str) -> None:
    """Attach a measured value to a criterion's summary line."""
    _NOTES.setdefault(number, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        detail = "; ".join(_NOTES.get(number, []))
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {title}" + (f" [{detail}]" if detail else ""))
