import pytest
import torch

torch.set_num_threads(1)

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    n, title = marker.args
    entry = _acceptance.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"] += [str(v) for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        e = _acceptance[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = f"  ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"{n:>2} {status}  {e['title']}{detail}")


@pytest.fixture
def g():
    gen = torch.Generator()
    gen.manual_seed(0)
    return gen
