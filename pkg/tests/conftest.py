import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mrfdip import acquisim, epg, quant, subspace  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _setup(grid, n_pulses, C, M, L, K, phantom_kw=None):
    seq = epg.SequenceParams.desk(n_pulses)
    d = epg.build_dictionary(epg.DESK_T1_GRID, epg.DESK_T2_GRID, seq)
    basis = subspace.compute_basis(d, K)
    ph = acquisim.make_phantom(acquisim.PhantomSpec(grid, **(phantom_kw or {})))
    traj = acquisim.make_spiral(M, L, grid)
    coils = acquisim.make_coils(C, grid)
    model = acquisim.build_model(traj, coils, basis, M)
    return SimpleNamespace(seq=seq, dictionary=d, basis=basis, cd=quant.compress_dictionary(d, basis),
                           phantom=ph, traj=traj, coils=coils, model=model)


@pytest.fixture(scope="session")
def small():
    """32x32 grid, C=2, T=24, K=3: cheap enough for per-test operator work."""
    return _setup((32, 32), 24, 2, 64, 6, 3)


@pytest.fixture(scope="session")
def desk():
    """The 64x64, C=4, T=200, K=5 desk configuration."""
    return _setup((64, 64), 200, 4, 256, 8, 5)


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    info = [v for k, v in report.user_properties if k == "criterion"]
    if not info:
        return
    n, title = info[0]
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if report.when == "call" or report.failed:
        entry["ran"] = True
        entry["ok"] &= report.passed
        entry["notes"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        line = f"criterion {n:>2}: {status}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
