"""Network building blocks with analytic backward rules.

Every cell works on a batch: inputs are ``(B, d)`` arrays and states are
``(B, h)`` arrays (a 1-D vector is treated as a batch of one by the scalar
``*_step`` helpers). Parameters live in a plain ``dict`` of float64 arrays so
optimizers, gradient checks and serialization can treat all cells alike.

Recurrent cells share a small protocol:

* ``zero_state(batch)`` -> state tuple
* ``step(x, state)`` -> ``(new_state, cache)``
* ``step_backward(cache, d_state, grads)`` -> ``d_state_prev``, accumulating
  parameter gradients into ``grads`` in place
* ``output(state)`` -> hidden vector fed to the readout
"""
from __future__ import annotations

import numpy as np

from .kernel import (
    KernelActivation,
    KernelDictionary,
    center_grad_terms,
    gram_center_grad,
    gram_matrix,
    layer_forward,
)
from .mathcore import ShapeError


def init_weight(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_input(x: np.ndarray, d: int, name: str):
    if x.shape[-1] != d:
        raise ShapeError(f"{name}: input of shape {x.shape} does not match input size {d}")


def _as_batch(v) -> np.ndarray:
    return np.atleast_2d(np.asarray(v, dtype=np.float64))


class _KernelUnits:
    """Mixin for cells whose units carry kernel activations on one dictionary."""

    params: dict
    bandwidth: float
    learn_centers: bool

    @property
    def dictionary(self) -> KernelDictionary:
        return KernelDictionary(self.params["centers"], self.bandwidth)

    def activations(self) -> list[KernelActivation]:
        d = self.dictionary
        return [KernelActivation(d, row) for row in self.params["alpha"]]

    def set_dictionary(self, dictionary: KernelDictionary, coeffs: np.ndarray):
        self.params["centers"] = np.array(dictionary.centers, dtype=np.float64)
        self.bandwidth = dictionary.bandwidth
        self.params["alpha"] = np.array(coeffs, dtype=np.float64)

    def trainable(self) -> list[str]:
        names = [n for n in self.params if n != "centers"]
        if self.learn_centers:
            names.append("centers")
        return names

    def smoothness(self) -> float:
        """Sum over units of the RKHS penalty ``alpha^T G alpha``."""
        alpha = self.params["alpha"]
        g = gram_matrix(self.dictionary)
        return float(np.einsum("hj,jk,hk->", alpha, g, alpha))

    def smoothness_grads(self, grads: dict, scale: float):
        alpha = self.params["alpha"]
        g = gram_matrix(self.dictionary)
        grads["alpha"] += scale * 2.0 * alpha @ g
        if self.learn_centers:
            grads["centers"] += scale * gram_center_grad(self.dictionary, alpha)

    def resort_centers(self) -> np.ndarray | None:
        """Restore increasing centers after a center update.

        Returns the permutation applied to the center axis, or ``None``.
        """
        c = self.params["centers"]
        if np.all(np.diff(c) > 0):
            return None
        order = np.argsort(c, kind="stable")
        self.params["centers"] = c[order]
        self.params["alpha"] = self.params["alpha"][:, order]
        if np.any(np.diff(self.params["centers"]) <= 0):
            raise ValueError("learned centers collided; dictionary no longer valid")
        return order


class FeedforwardLayer(_KernelUnits):
    kind = "ff"

    def __init__(self, W, b, dictionary: KernelDictionary, coeffs, learn_centers=False):
        W = np.array(W, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        coeffs = np.array(coeffs, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],) or coeffs.shape != (W.shape[0], dictionary.size):
            raise ShapeError(
                f"inconsistent layer shapes W{W.shape} b{b.shape} alpha{coeffs.shape}"
            )
        self.params = {"W": W, "b": b, "alpha": coeffs,
                       "centers": np.array(dictionary.centers)}
        self.bandwidth = dictionary.bandwidth
        self.learn_centers = learn_centers

    def weight_names(self):
        return ["W"]


def ff_forward(layer: FeedforwardLayer, x):
    p = layer.params
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, p["W"].shape[1], "ff_forward")
    a = x @ p["W"].T + p["b"]
    h, slope, phi = layer_forward(a, layer.dictionary, p["alpha"])
    return a, h, (x, a, slope, phi)


def ff_backward(layer: FeedforwardLayer, cache, grad_h):
    """Returns ``(grad_x, grads)`` with ``grads`` keyed like ``layer.params``."""
    x, a, slope, phi = cache
    p = layer.params
    grad_h = np.asarray(grad_h, dtype=np.float64)
    if grad_h.shape != a.shape:
        raise ShapeError(f"grad_h shape {grad_h.shape} != output shape {a.shape}")
    da = grad_h * slope
    xb, dab, gb, phib = _as_batch(x), _as_batch(da), _as_batch(grad_h), phi.reshape(-1, *phi.shape[-2:])
    grads = {
        "W": dab.T @ xb,
        "b": dab.sum(axis=0),
        "alpha": np.einsum("bh,bhk->hk", gb, phib),
    }
    if layer.learn_centers:
        terms = center_grad_terms(_as_batch(a), layer.dictionary, p["alpha"], phib)
        grads["centers"] = np.einsum("bh,bhk->k", gb, terms)
    return da @ p["W"], grads


class _ElmanCell:
    """Shared parameter layout for cells computing ``a = W_in x + W_rec h + b``."""

    def _init_params(self, W_in, W_rec, b):
        W_in = np.array(W_in, dtype=np.float64)
        W_rec = np.array(W_rec, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        h = W_rec.shape[0]
        if W_rec.shape != (h, h) or W_in.ndim != 2 or W_in.shape[0] != h or b.shape != (h,):
            raise ShapeError(
                f"inconsistent cell shapes W_in{W_in.shape} W_rec{W_rec.shape} b{b.shape}"
            )
        self.params = {"W_in": W_in, "W_rec": W_rec, "b": b}

    @property
    def input_size(self) -> int:
        return self.params["W_in"].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.params["W_rec"].shape[0]

    def zero_state(self, batch: int):
        return (np.zeros((batch, self.hidden_size)),)

    def output(self, state):
        return state[0]

    def weight_names(self):
        return ["W_in", "W_rec"]

    def preactivation(self, x, h_prev):
        p = self.params
        _check_input(x, self.input_size, type(self).__name__)
        if h_prev.shape[-1] != self.hidden_size:
            raise ShapeError(f"state shape {h_prev.shape} does not match hidden size {self.hidden_size}")
        return x @ p["W_in"].T + h_prev @ p["W_rec"].T + p["b"]

    def _linear_backward(self, x, h_prev, da, grads):
        grads["W_in"] += da.T @ x
        grads["W_rec"] += da.T @ h_prev
        grads["b"] += da.sum(axis=0)
        return da @ self.params["W_rec"]


class TanhRNNCell(_ElmanCell):
    kind = "tanh"

    def __init__(self, W_in, W_rec, b):
        self._init_params(W_in, W_rec, b)

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator):
        return cls(init_weight(rng, hidden_size, input_size),
                   init_weight(rng, hidden_size, hidden_size), np.zeros(hidden_size))

    def trainable(self):
        return list(self.params)

    def step(self, x, state):
        (h_prev,) = state
        a = self.preactivation(x, h_prev)
        h = np.tanh(a)
        return (h,), (x, h_prev, a, 1.0 - h * h)

    def step_backward(self, cache, d_state, grads):
        x, h_prev, a, slope = cache
        da = d_state[0] * slope
        return (self._linear_backward(x, h_prev, da, grads),)

    def slopes(self, cache):
        return cache[3]


class KBRNCell(_KernelUnits, _ElmanCell):
    kind = "kbrn"

    def __init__(self, W_in, W_rec, b, dictionary: KernelDictionary, coeffs, learn_centers=False):
        self._init_params(W_in, W_rec, b)
        coeffs = np.array(coeffs, dtype=np.float64)
        if coeffs.shape != (self.hidden_size, dictionary.size):
            raise ShapeError(
                f"coefficients shape {coeffs.shape} != ({self.hidden_size}, {dictionary.size})"
            )
        self.params["alpha"] = coeffs
        self.params["centers"] = np.array(dictionary.centers, dtype=np.float64)
        self.bandwidth = dictionary.bandwidth
        self.learn_centers = learn_centers

    @classmethod
    def initialize(cls, input_size, hidden_size, rng, dictionary, coeffs_row, learn_centers=False):
        """Gaussian weights; every unit starts from the same coefficient row."""
        coeffs = np.tile(np.asarray(coeffs_row, dtype=np.float64), (hidden_size, 1))
        return cls(init_weight(rng, hidden_size, input_size),
                   init_weight(rng, hidden_size, hidden_size), np.zeros(hidden_size),
                   dictionary, coeffs, learn_centers)

    def step(self, x, state, dictionary=None):
        (h_prev,) = state
        a = self.preactivation(x, h_prev)
        h, slope, phi = layer_forward(a, dictionary or self.dictionary, self.params["alpha"])
        return (h,), (x, h_prev, a, slope, phi)

    def step_backward(self, cache, d_state, grads):
        x, h_prev, a, slope, phi = cache
        dh = d_state[0]
        grads["alpha"] += np.einsum("bh,bhk->hk", dh, phi)
        if self.learn_centers:
            terms = center_grad_terms(a, self.dictionary, self.params["alpha"], phi)
            grads["centers"] += np.einsum("bh,bhk->k", dh, terms)
        return (self._linear_backward(x, h_prev, dh * slope, grads),)

    def slopes(self, cache):
        return cache[3]


GATES = ("i", "f", "o", "g")


class LSTMCell:
    kind = "lstm"

    def __init__(self, weights: dict, biases: dict):
        shapes = {weights[g].shape for g in GATES}
        if len(shapes) != 1:
            raise ShapeError(f"gate weight shapes differ: {sorted(shapes)}")
        (h, dh), = shapes
        if dh <= h:
            raise ShapeError("gate weights must act on [x; h] with positive input size")
        self.params = {}
        for g in GATES:
            self.params[f"W_{g}"] = np.array(weights[g], dtype=np.float64)
            self.params[f"b_{g}"] = np.array(biases[g], dtype=np.float64)
            if self.params[f"b_{g}"].shape != (h,):
                raise ShapeError(f"bias b_{g} must have shape ({h},)")

    @classmethod
    def initialize(cls, input_size, hidden_size, rng, forget_bias=1.0):
        weights = {g: init_weight(rng, hidden_size, input_size + hidden_size) for g in GATES}
        biases = {g: np.zeros(hidden_size) for g in GATES}
        biases["f"] += forget_bias
        return cls(weights, biases)

    @property
    def hidden_size(self):
        return self.params["W_i"].shape[0]

    @property
    def input_size(self):
        return self.params["W_i"].shape[1] - self.hidden_size

    def trainable(self):
        return list(self.params)

    def weight_names(self):
        return [f"W_{g}" for g in GATES]

    def zero_state(self, batch):
        return (np.zeros((batch, self.hidden_size)), np.zeros((batch, self.hidden_size)))

    def output(self, state):
        return state[0]

    def step(self, x, state):
        h_prev, c_prev = state
        _check_input(x, self.input_size, "LSTMCell")
        if h_prev.shape[-1] != self.hidden_size:
            raise ShapeError(f"state shape {h_prev.shape} does not match hidden size {self.hidden_size}")
        p = self.params
        z = np.concatenate([x, h_prev], axis=-1)
        i = sigmoid(z @ p["W_i"].T + p["b_i"])
        f = sigmoid(z @ p["W_f"].T + p["b_f"])
        o = sigmoid(z @ p["W_o"].T + p["b_o"])
        g = np.tanh(z @ p["W_g"].T + p["b_g"])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return (h, c), (z, c_prev, i, f, o, g, tc)

    def step_backward(self, cache, d_state, grads):
        z, c_prev, i, f, o, g, tc = cache
        dh, dc = d_state
        dc = dc + dh * o * (1.0 - tc * tc)
        pre = {
            "i": dc * g * i * (1.0 - i),
            "f": dc * c_prev * f * (1.0 - f),
            "o": dh * tc * o * (1.0 - o),
            "g": dc * i * (1.0 - g * g),
        }
        dz = 0.0
        for k in GATES:
            grads[f"W_{k}"] += pre[k].T @ z
            grads[f"b_{k}"] += pre[k].sum(axis=0)
            dz = dz + pre[k] @ self.params[f"W_{k}"]
        d = self.input_size
        return dz[:, d:], dc * f

    def slopes(self, cache):
        """Sensitivity of ``h_t`` to the cell state, ``o * tanh'(c_t)``."""
        z, c_prev, i, f, o, g, tc = cache
        return o * (1.0 - tc * tc)


class Readout:
    def __init__(self, W_out, b_out):
        W_out = np.array(W_out, dtype=np.float64)
        b_out = np.array(b_out, dtype=np.float64)
        if W_out.ndim != 2 or b_out.shape != (W_out.shape[0],):
            raise ShapeError(f"inconsistent readout shapes W_out{W_out.shape} b_out{b_out.shape}")
        if W_out.shape[0] < 2:
            raise ValueError("readout needs at least 2 classes")
        self.params = {"W_out": W_out, "b_out": b_out}

    @classmethod
    def initialize(cls, hidden_size, num_classes, rng):
        return cls(init_weight(rng, num_classes, hidden_size), np.zeros(num_classes))

    def weight_names(self):
        return ["W_out"]


def readout_logits(r: Readout, h):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != r.params["W_out"].shape[1]:
        raise ShapeError(f"hidden shape {h.shape} does not match readout {r.params['W_out'].shape}")
    return h @ r.params["W_out"].T + r.params["b_out"]


def _single_step(cell, x_t, state):
    x = _as_batch(x_t)
    state = tuple(_as_batch(s) for s in state)
    new, cache = cell.step(x, state)
    return new, cache


def kbrn_step(cell: KBRNCell, x_t, h_prev):
    """One KBRN transition on vectors; returns ``(a_t, h_t, cache)``."""
    (h,), cache = _single_step(cell, x_t, (h_prev,))
    return cache[2][0], h[0], cache


def tanh_step(cell: TanhRNNCell, x_t, h_prev):
    (h,), cache = _single_step(cell, x_t, (h_prev,))
    return cache[2][0], h[0], cache


def lstm_step(cell: LSTMCell, x_t, h_prev, c_prev):
    """One LSTM transition on vectors; returns ``(h_t, c_t, cache)``."""
    (h, c), cache = _single_step(cell, x_t, (h_prev, c_prev))
    return h[0], c[0], cache
