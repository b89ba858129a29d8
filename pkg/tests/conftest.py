import itertools
import math

import numpy as np
import pytest

from kbrn.cells import GATES, KBRNCell, LSTMCell, Readout, TanhRNNCell
from kbrn.kernel import KernelDictionary, build_dictionary_uniform
from kbrn.mathcore import make_rng
from kbrn.model import ModelConfig, SequenceClassifier

# One "criterion N: PASS/FAIL" line per acceptance criterion, printed at the end of the session.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def brute_force_kmeans(samples, K):
    """Best objective over all contiguous K-partitions of the sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float))
    best = math.inf
    for cuts in itertools.combinations(range(1, x.size), K - 1):
        parts = np.split(x, cuts)
        best = min(best, sum(float(((p - p.mean()) ** 2).sum()) for p in parts))
    return best


def scalar_kbrn(w_rec, w_in=0.0, b=0.0, dictionary=None, coeffs=(1.0,)):
    d = dictionary or KernelDictionary([0.0], 1.0)
    return KBRNCell([[w_in]], [[w_rec]], [b], d, [list(coeffs)])


def expansive_kbrn():
    """Scalar KBRN with alternating coefficients and recurrent weight 1.5."""
    d = build_dictionary_uniform(-2.0, 2.0, 5, 0.5)
    cell = KBRNCell([[1.0]], [[1.5]], [0.0], d, [[1.0, -1.0, 1.0, -1.0, 1.0]])
    return SequenceClassifier(cell, Readout([[1.0], [-1.0]], [0.0, 0.0]),
                              ModelConfig(cell="kbrn", hidden=1, K=5))


def scalar_tanh_model(w_rec, w_in=1.0):
    cell = TanhRNNCell([[w_in]], [[w_rec]], [0.0])
    return SequenceClassifier(cell, Readout([[1.0], [-1.0]], [0.0, 0.0]),
                              ModelConfig(cell="tanh", hidden=1))


def random_model(cell, rng, d=3, h=4, K=5, C=2, learn_centers=False):
    def u(*s):
        return rng.uniform(-1, 1, size=s)

    if cell == "kbrn":
        dic = build_dictionary_uniform(-2, 2, K, 4 / (K - 1))
        c = KBRNCell(u(h, d), u(h, h), u(h), dic, u(h, K), learn_centers=learn_centers)
    elif cell == "tanh":
        c = TanhRNNCell(u(h, d), u(h, h), u(h))
    else:
        c = LSTMCell({g: u(h, d + h) for g in GATES}, {g: u(h) for g in GATES})
    return SequenceClassifier(c, Readout(u(C, h), u(C)),
                              ModelConfig(cell=cell, hidden=h, K=K, learn_centers=learn_centers))


@pytest.fixture
def rng():
    return make_rng(1234)
