import datetime as dt
from collections import defaultdict

import numpy as np
import pytest

from ammfactors.ingest import RawSnapshotRow

_CRITERIA = defaultdict(list)
_TITLES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = getattr(report, "_criterion", None)
        if n is not None:
            _CRITERIA[n].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep = outcome.get_result()
        rep._criterion = marker.args[0]
        _TITLES[marker.args[0]] = marker.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  {_TITLES[n]}")


def make_rows(prices, start=dt.date(2025, 3, 1), startup=None, tau=None, mcap=None,
              emission=None, staked=None):
    """Snapshot rows from a ``{netuid: [price or None, ...]}`` mapping.

    ``None`` means no row that day; ``startup`` maps netuid -> set of day
    indices flagged as startup mode (price left as given).
    """
    startup = startup or {}
    rows = []
    for netuid, path in prices.items():
        for t, p in enumerate(path):
            if p is None:
                continue
            day = start + dt.timedelta(days=t)
            tau_t = tau[netuid][t] if tau else 100.0 * (netuid + 1)
            rows.append(RawSnapshotRow(
                date=day, netuid=netuid, price_tao=float(p),
                mcap_tao=float(mcap[netuid][t]) if mcap else float(p) * 1000.0 * (netuid + 1),
                tau_reserve=float(tau_t), alpha_reserve=float(tau_t) / float(p) if p else float("nan"),
                alpha_staked=float(staked[netuid][t]) if staked else 10.0 * (netuid + 1),
                emission_rao_per_day=float(emission[netuid][t]) if emission else 1e9,
                startup_mode=t in startup.get(netuid, set()),
            ))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
