import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def direct_circular_convolve(x, k):
    """Double-sum oracle: out[i, j] = sum_{p, q} x[p, q] k[(i - p) % H, (j - q) % W]."""
    H, W = x.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for p in range(H):
                for q in range(W):
                    acc += x[p, q] * k[(i - p) % H, (j - q) % W]
            out[i, j] = acc
    return out


def circulant_matrix(k):
    """Matrix C with C @ x.ravel() == circular_convolve(x, k).ravel()."""
    H, W = k.shape
    n = H * W
    C = np.zeros((n, n))
    for p in range(H):
        for q in range(W):
            e = np.zeros((H, W))
            e[p, q] = 1.0
            C[:, p * W + q] = np.roll(np.roll(k, p, axis=0), q, axis=1).ravel()
    return C


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable recording one PASS/FAIL line per acceptance criterion."""
    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
