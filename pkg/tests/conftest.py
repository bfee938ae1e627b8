"""Shared fixtures and the acceptance summary printed after every run."""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion implemented by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    cid, title = marker.args
    entry = CRITERIA.setdefault(cid, {"title": title, "passed": True, "details": []})
    if rep.failed:
        entry["passed"] = False
    if rep.when == "call":
        entry["details"].extend(dict(item.user_properties).get("detail", []))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: int(c[1:])):
        entry = CRITERIA[cid]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{cid:<4} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(request):
    """Append a short measurement to the acceptance summary line."""
    notes: list[str] = []
    request.node.user_properties.append(("detail", notes))
    return notes.append


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
