import numpy as np
import pytest

from ccnn import data


def naive_conv2d(x, weight, bias):
    """Direct zero-padded same convolution by explicit loops; independent of the library path."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    out = np.zeros((n, co, h, w))
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(w):
                    out[b, o, y, xx] = bias[o] + np.sum(weight[o] * xp[b, :, y:y + kh, xx:xx + kw])
    return out


def central_difference(f, arr, step=1e-3, indices=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * step)
    return out


def gradient_agreement(analytic, numeric, rel=1e-3, abs_=1e-4):
    """(fraction within relative tolerance, all remaining within absolute tolerance)."""
    analytic = np.ravel(analytic).astype(np.float64)
    numeric = np.ravel(numeric).astype(np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_ok = diff <= rel * scale
    rel_ok |= diff == 0
    rest_ok = bool(np.all(diff[~rel_ok] <= abs_))
    return float(rel_ok.mean()), rest_ok


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return data.SyntheticSceneSpec(image_size=(64, 64), head_count=(3, 12), cluster_spread=12.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
