"""Randomised finite-difference checks of the analytic BPTT gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import GATES, KBRNCell, LSTMCell, Readout, TanhRNNCell
from .kernel import KernelDictionary
from .mathcore import make_rng
from .model import ModelConfig, SequenceClassifier
from .training import bptt, finite_diff_grad, max_relative_error

TOLERANCE = 1e-4


@dataclass
class Instance:
    model: SequenceClassifier
    X: np.ndarray
    labels: np.ndarray
    lambda_smooth: float
    lambda_w: float


def random_instance(cell: str, rng: np.random.Generator, max_T=6, max_h=4, max_K=5,
                    max_d=3, batch=2) -> Instance:
    """Small model with every parameter and input drawn from [-1, 1]."""
    T = int(rng.integers(1, max_T, endpoint=True))
    h = int(rng.integers(1, max_h, endpoint=True))
    d = int(rng.integers(1, max_d, endpoint=True))
    C = int(rng.integers(2, 3, endpoint=True))

    def u(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    config = ModelConfig(cell=cell, hidden=h)
    if cell == "kbrn":
        K = int(rng.integers(1, max_K, endpoint=True))
        centers = np.sort(rng.uniform(-2.0, 2.0, size=K))
        while K > 1 and np.min(np.diff(centers)) < 0.05:
            centers = np.sort(rng.uniform(-2.0, 2.0, size=K))
        d_ = KernelDictionary(centers, rng.uniform(0.5, 1.5))
        learn = bool(rng.integers(0, 1, endpoint=True))
        config.K, config.learn_centers = K, learn
        c = KBRNCell(u(h, d), u(h, h), u(h), d_, u(h, K), learn_centers=learn)
    elif cell == "tanh":
        c = TanhRNNCell(u(h, d), u(h, h), u(h))
    else:
        c = LSTMCell({g: u(h, d + h) for g in GATES}, {g: u(h) for g in GATES})
    model = SequenceClassifier(c, Readout(u(C, h), u(C)), config)
    X = u(batch, T, d)
    labels = rng.integers(0, C, size=batch)
    return Instance(model, X, labels, rng.uniform(0, 0.1), rng.uniform(0, 0.1))


def check_instance(inst: Instance, eps: float = 1e-5) -> float:
    args = (inst.X, inst.labels, inst.lambda_smooth, inst.lambda_w)
    _, analytic = bptt(inst.model, *args)
    numeric = finite_diff_grad(lambda: bptt(inst.model, *args)[0], inst.model.params(), eps,
                               names=list(analytic))
    return max_relative_error(analytic, numeric)


def gradcheck_suite(cell: str, seed: int = 0, instances: int = 20) -> list[float]:
    """Max relative error of each random instance for one cell type."""
    rng = make_rng(seed)
    return [check_instance(random_instance(cell, rng)) for _ in range(instances)]
