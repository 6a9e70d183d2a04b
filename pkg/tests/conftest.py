import numpy as np
import pytest

from did2lab import _backend
from did2lab.numerics import make_rng

BACKENDS = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    monkeypatch.setattr(_backend, "USE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def rng():
    return make_rng(1234)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for i in range(n):
        for o in range(k):
            for y in range(oh):
                for z in range(ow):
                    patch = xp[i, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[i, o, y, z] = np.sum(patch * w[o]) + b[o]
    return out


def naive_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for j in range(c):
            for y in range(h // 2):
                for z in range(w // 2):
                    out[i, j, y, z] = x[i, j, 2 * y:2 * y + 2, 2 * z:2 * z + 2].max()
    return out


def smooth_fd_check(objective, pattern, tensors, grads, n, rng, eps=1e-3, max_tries=2000):
    """finite_diff_check on ``n`` random coordinates whose +-eps interval
    keeps ``pattern(tensors)`` (the ReLU masks and pooling argmaxes)
    unchanged. Returns ``(max_error, n_checked)``."""
    from did2lab.numerics import finite_diff_check

    sizes = np.array([t.size for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, done = 0.0, 0
    for _ in range(max_tries):
        if done == n:
            break
        flat = int(rng.integers(offsets[-1]))
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        view = tensors[k].reshape(-1)[flat - offsets[k]:flat - offsets[k] + 1]
        base = pattern(tensors)
        orig = view[0]
        view[0] = orig + eps
        up = pattern(tensors)
        view[0] = orig - eps
        down = pattern(tensors)
        view[0] = orig
        if up != base or down != base:
            continue
        g = grads[k].reshape(-1)[flat - offsets[k]:flat - offsets[k] + 1]
        worst = max(worst, finite_diff_check(lambda _: objective(tensors), [view], [g], eps=eps, samples=1))
        done += 1
    return worst, done


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
