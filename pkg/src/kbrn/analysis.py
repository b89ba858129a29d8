"""Contraction/expansion diagnostics for recurrent cells.

The per-step Jacobian ``dh_t/dh_{t-1}`` decides whether a backward signal
shrinks or grows as it crosses one transition: spectral norm below one is
locally contractive, above one locally expansive.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .cells import KBRNCell, LSTMCell, TanhRNNCell
from .kernel import layer_forward
from .mathcore import ShapeError, make_rng
from .training import bptt, fmt, unroll

TRACE_COLUMNS = ("t", "grad_norm", "jacobian_norm", "max_slope")
SHAPE_COLUMNS = ("unit", "input", "output", "derivative")


def _lstm_jacobian(cell: LSTMCell, cache) -> np.ndarray:
    """``dh_t/dh_{t-1}`` for a batch of LSTM caches, holding ``c_{t-1}`` fixed."""
    z, c_prev, i, f, o, g, tc = cache
    d = cell.input_size
    p = cell.params
    U = {k: p[f"W_{k}"][:, d:] for k in "ifog"}
    dc_dh = ((c_prev * f * (1 - f))[..., None] * U["f"]
             + (g * i * (1 - i))[..., None] * U["i"]
             + (i * (1 - g * g))[..., None] * U["g"])
    return ((tc * o * (1 - o))[..., None] * U["o"]
            + (o * (1 - tc * tc))[..., None] * dc_dh)


def _step_jacobians(cell, caches) -> np.ndarray:
    """Jacobians of every cached step, shape ``(T, B, h, h)``."""
    if isinstance(cell, LSTMCell):
        return np.stack([_lstm_jacobian(cell, c) for c in caches])
    slopes = np.stack([cell.slopes(c) for c in caches])
    return slopes[..., None] * cell.params["W_rec"]


def recurrent_jacobian(cell, h_prev, x_t, c_prev=None) -> np.ndarray:
    """Exact ``dh_t / dh_{t-1}`` at one state.

    For the Elman-type cells this is ``diag(sigma'(a_t)) @ W_rec``. For the
    LSTM the previous cell state (default zero) is held fixed.
    """
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if h_prev.shape[0] != 1 or x_t.shape[0] != 1:
        raise ShapeError("recurrent_jacobian takes a single state and input")
    if isinstance(cell, LSTMCell):
        c = np.zeros_like(h_prev) if c_prev is None else np.atleast_2d(c_prev)
        _, cache = cell.step(x_t, (h_prev, c))
        return _lstm_jacobian(cell, cache)[0]
    if isinstance(cell, (KBRNCell, TanhRNNCell)):
        _, cache = cell.step(x_t, (h_prev,))
        return cell.slopes(cache)[0][:, None] * cell.params["W_rec"]
    raise TypeError(f"unsupported cell {type(cell).__name__}")


def spectral_norm(M, iters: int = 100, tol: float = 1e-9, rng=None) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"spectral_norm expects a square matrix, got {M.shape}")
    return float(spectral_norms(M[None], iters, tol, rng)[0])


def spectral_norms(stack, iters: int = 100, tol: float = 1e-9, rng=None) -> np.ndarray:
    """Vectorised power iteration over a stack of square matrices ``(..., n, n)``."""
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[-1]
    flat = stack.reshape(-1, n, n)
    rng = rng if rng is not None else make_rng(0)
    v = rng.normal(size=n)
    v = np.broadcast_to(v / np.linalg.norm(v), (flat.shape[0], n)).copy()
    gram = np.einsum("bji,bjk->bik", flat, flat)
    est = np.zeros(flat.shape[0])
    for _ in range(iters):
        w = np.einsum("bij,bj->bi", gram, v)
        norm = np.linalg.norm(w, axis=1)
        live = norm > 0
        new_est = norm  # Rayleigh quotient with a unit v
        v[live] = w[live] / norm[live, None]
        done = np.all(np.abs(new_est - est) <= tol * np.maximum(new_est, 1e-300))
        est = new_est
        if done:
            break
    return np.sqrt(est).reshape(stack.shape[:-2])


@dataclass
class GradientTrace:
    """Per-timestep backward diagnostics; index ``t-1`` holds step ``t``.

    ``jacobian_norm[t-1]`` and ``max_slope[t-1]`` describe the transition
    that produced ``h_t`` from ``h_{t-1}``.
    """

    grad_norm: np.ndarray
    jacobian_norm: np.ndarray
    max_slope: np.ndarray

    def __len__(self):
        return self.grad_norm.size

    def backward_ratios(self) -> np.ndarray:
        """``|dL/dh_{t-1}| / |dL/dh_t|`` for t = T..2 (NaN where undefined)."""
        g = self.grad_norm
        with np.errstate(divide="ignore", invalid="ignore"):
            return g[:-1] / g[1:]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in range(len(self)):
            w.writerow([t + 1, fmt(self.grad_norm[t]), fmt(self.jacobian_norm[t]),
                        fmt(self.max_slope[t])])
        return buf.getvalue()


def gradient_norm_traces(model, X, labels, rng=None) -> GradientTrace:
    """Traces for a batch of sequences, returned with a leading batch axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    labels = np.atleast_1d(labels)
    B, T = X.shape[:2]
    norms = np.zeros((B, T))

    def record(t, dh):
        # bptt averages the loss over the batch; undo that per sequence
        norms[:, t - 1] = np.linalg.norm(dh, axis=1) * B

    bptt(model, X, labels, record=record)
    _, caches, _ = unroll(model, X)
    jac = _step_jacobians(model.cell, caches)  # (T, B, h, h)
    jn = spectral_norms(jac, rng=rng).T
    slopes = np.stack([np.abs(model.cell.slopes(c)).max(axis=1) for c in caches]).T
    return GradientTrace(norms, jn, slopes)


def gradient_norm_trace(model, sequence, label, rng=None) -> GradientTrace:
    tr = gradient_norm_traces(model, np.asarray(sequence)[None], [label], rng)
    return GradientTrace(tr.grad_norm[0], tr.jacobian_norm[0], tr.max_slope[0])


def mean_trace(model, X, labels, batch_size: int = 250, rng=None) -> GradientTrace:
    """Trace averaged over a dataset, in dataset order."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    parts = [gradient_norm_traces(model, X[s:s + batch_size], labels[s:s + batch_size], rng)
             for s in range(0, X.shape[0], batch_size)]
    cat = {k: np.concatenate([getattr(p, k) for p in parts]) for k in
           ("grad_norm", "jacobian_norm", "max_slope")}
    return GradientTrace(*(cat[k].mean(axis=0) for k in ("grad_norm", "jacobian_norm", "max_slope")))


def activation_shapes(model, lo: float, hi: float, n: int):
    """Rows ``(unit, input, output, derivative)`` on ``n`` grid points per unit."""
    if n < 2:
        raise ValueError("need at least 2 grid points")
    grid = np.linspace(lo, hi, n)
    cell = model.cell
    h = cell.hidden_size
    a = np.broadcast_to(grid[:, None], (n, h))
    if isinstance(cell, KBRNCell):
        out, slope, _ = layer_forward(np.ascontiguousarray(a), cell.dictionary, cell.params["alpha"])
    else:
        out = np.tanh(a)
        slope = 1.0 - out * out
    return [(u, grid[k], out[k, u], slope[k, u]) for u in range(h) for k in range(n)]


def export_activation_shapes(model, lo: float, hi: float, n: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SHAPE_COLUMNS)
    for u, x, y, dy in activation_shapes(model, lo, hi, n):
        w.writerow([u, fmt(x), fmt(y), fmt(dy)])
    return buf.getvalue()
