import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, cond, n)
    return (Q * ev) @ Q.T


# one summary line per acceptance criterion, built from the test reports

_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    if rep.when == "teardown" and rep.passed:
        return
    if hasattr(rep, "wasxfail"):
        status = "FAIL (xfail)"
    elif rep.passed:
        status = "PASS"
    elif rep.skipped:
        status = "SKIP"
    else:
        status = "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria.setdefault(marker.args[0], []).append((status, marker.kwargs.get("title", item.name), detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        entries = _criteria[k]
        statuses = {s for s, _, _ in entries}
        overall = "PASS" if statuses == {"PASS"} else next(s for s in ("FAIL", "FAIL (xfail)", "SKIP") if s in statuses)
        title = entries[0][1]
        details = " | ".join(d for _, _, d in entries if d)
        terminalreporter.write_line(f"{overall} criterion {k}: {title}" + (f" [{details}]" if details else ""))
