import numpy as np
import pytest

from aicrn.synthetic import GeneratorConfig, generate_corpus


def leaf(a, dtype=np.float64):
    from aicrn.tensor import Tensor

    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def central_diff(f, x, step=1e-6):
    """Numerical gradient of scalar f at float64 array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


@pytest.fixture(scope="session")
def corpus64(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus64")
    generate_corpus(GeneratorConfig(n_records=64, seed=11), out)
    return out / "metadata.csv"


@pytest.fixture(scope="session")
def corpus16(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus16")
    generate_corpus(GeneratorConfig(n_records=16, seed=5), out)
    return out / "metadata.csv"


# --- acceptance reporting ---------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped by n; the
# terminal summary prints one PASS/FAIL line per criterion.

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["notes"].extend(v for k, v in item.user_properties if k == "detail")
    if not rep.passed:
        entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if e['ok'] else 'FAIL'} - {e['title']}" + (f" [{detail}]" if detail else "")
        )
