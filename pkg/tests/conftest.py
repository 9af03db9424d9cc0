import pytest

from reqgate.datagen import SignalDatasetSpec, generate_signal_dataset
from reqgate.features import SpectrogramExtractor


@pytest.fixture(scope="session")
def small_signals():
    return generate_signal_dataset(
        SignalDatasetSpec(n_motion=90, n_easy_noise=1500, n_spurious_noise=60, seed=11)
    )


@pytest.fixture(scope="session")
def small_features(small_signals):
    F = SpectrogramExtractor(random_state=0).fit_transform(small_signals.samples)
    return F, small_signals.labels.copy(), small_signals.source_kinds.copy()


# -- acceptance reporting ----------------------------------------------------

_CRITERIA = {}


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
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        previous = _CRITERIA.get(number, (title, True))[1]
        _CRITERIA[number] = (title, previous and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
