import pytest

from mddreason.cohort import ParticipantRecord
from mddreason.toytask import make_task


@pytest.fixture
def worked_record():
    return ParticipantRecord("worked", dict(
        age=60.0, sex="female", bmi=24.5, sleeplessness="sometimes", sleep_duration=6.0,
        alcohol_frequency="3-4/week", self_harm="no", employment="paid employment", income=45000.0,
        work_hours=38.0, education="O-levels", longstanding_illness="no", hdl=2.08, ldl=2.61,
        total_cholesterol=4.78, triglycerides=1.33), "HC")


@pytest.fixture(scope="session")
def small_task():
    return make_task(300, 200, seed=11)


# --- acceptance reporting -------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))


@pytest.fixture
def detail(record_property):
    def note(text):
        record_property("detail", text)
        print(text)
    return note
