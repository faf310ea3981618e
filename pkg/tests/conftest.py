import numpy as np
import pytest

from detnas import diffcore as dc

_CRITERIA = pytest.StashKey[list]()


def rel_err(actual, expected) -> float:
    """max |a - e| / max |e|, in float64."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    return float(np.abs(a - e).max() / max(np.abs(e).max(), 1e-12))


def naive_conv2d(x, w, stride=1, padding=0, dilation=1, bias=None):
    """Direct-loop float64 convolution used as an independent oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (k - 1) + 1
    ho = (h + 2 * padding - span) // stride + 1
    wo = (wd + 2 * padding - span) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + span:dilation, j * stride:j * stride + span:dilation]
            out[:, :, i, j] = np.einsum("ncab,ocab->no", patch, w)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with dc.precision(np.float64):
        yield


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    props = dict(item.user_properties)
    if "criterion" in props:
        item.config.stash.setdefault(_CRITERIA, []).append(
            (props["criterion"], report.outcome, props.get("measured", ""))
        )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_CRITERIA, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in sorted(rows, key=lambda r: int(r[0].split(".")[0])):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {name}" + (f"  [{measured}]" if measured else ""))
