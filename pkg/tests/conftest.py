import numpy as np
import pytest

from apcsmooth.dataset import ApcDataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when not in ("setup", "call"):
        return
    marker = next((m for m in getattr(report, "_criterion", ()) if m), None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "seconds": 0.0})
    # fixture time (the simulation study) belongs to the criterion too
    entry["seconds"] += report.duration
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report._criterion = [tuple(m.args) for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = all(o == "passed" for o in entry["outcomes"])
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"criterion {number}: {status}  {entry['title']}  ({len(entry['outcomes'])} checks, {entry['seconds']:.1f} s)"
        )


def make_dataset(counts, exposures=None, first_age=10, width=5, first_period=2000, step=1):
    counts = np.asarray(counts)
    I, J = counts.shape
    labels = [f"{first_age + width * i}-{first_age + width * i + width - 1}" if width > 1 else str(first_age + i) for i in range(I)]
    periods = first_period + step * np.arange(J)
    if exposures is None:
        exposures = np.full((I, J), 1e5)
    return ApcDataset(labels, periods, counts, exposures)


def synthetic_grid(I=15, J=21, rate_shift=0.0, seed=0, exposure=3.75e6, curvature=1.0):
    """Aggregated-looking grid with smooth age, period and cohort effects."""
    rng = np.random.default_rng(seed)
    mids = 12.5 + 5.0 * np.arange(I)
    years = 2000 + np.arange(J)
    A, P = np.meshgrid(mids, years, indexing="ij")
    eta = (
        np.log(1e-5) + rate_shift + 0.04 * (A - A.mean()) + 0.01 * (P - P.mean())
        + curvature * (1.2 * np.exp(-0.5 * ((A - 55.0) / 15.0) ** 2) + 0.3 * np.tanh((P - 2010.0) / 4.0)
                       + 0.15 * np.sin(2 * np.pi * (P - A - 1916.0) / 60.0))
    )
    N = np.full((I, J), exposure)
    y = rng.poisson(N * np.exp(eta))
    return make_dataset(y, N, first_period=2000), eta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
