import numpy as np
import pytest

from stainmtl.synthetic import make_patch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def he_patch():
    rgb, W, H = make_patch((32, 32), 7)
    return rgb, W, H


def white_image(shape=(16, 16)):
    return np.full((*shape, 3), 255, dtype=np.uint8)


def cosine_match(W_true, W_est):
    """Best column-wise cosine over both permutations of a 2-column matrix."""
    A = W_true / np.linalg.norm(W_true, axis=0)
    B = W_est / np.linalg.norm(W_est, axis=0)
    c = A.T @ B
    if A.shape[1] == 1:
        return float(c[0, 0])
    return float(max(min(c[0, 0], c[1, 1]), min(c[0, 1], c[1, 0])))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
