import numpy as np
import pytest

from swinecat.data import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth90(tmp_path_factory):
    """Ten synthetic 64x64 images per class, split and normalized."""
    return synth_generate(tmp_path_factory.mktemp("synth90"), per_class=10, image_size=64, seed=0)


# ---------------------------------------------------------------- acceptance
# Tests marked ``acceptance(number, title)`` get one pass/fail line each in
# the terminal summary, with any "detail" recorded via ``record_property``.

_acceptance_lines = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(rep.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    _acceptance_lines.append((number, f"criterion {number:>2} {status}  {title} ({rep.duration:.1f}s) {detail}".rstrip()))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)
