"""Loss, backpropagation through time, optimizers and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cells import readout_logits
from .kernel import dictionary_from_samples, init_coeffs_mimic
from .mathcore import ShapeError, make_rng
from .model import ModelConfig, SequenceClassifier

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a loss or gradient."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history, last_good_epoch):
        super().__init__(message)
        self.history = history
        self.last_good_epoch = last_good_epoch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    epochs: int = 300
    lambda_smooth: float = 1e-4
    lambda_w: float = 0.0
    clip: float | None = None
    seed: int = 0
    early_stop_acc: float | None = None
    target_acc: float = 0.95
    coeff_lr_scale: float = 1.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lambda_smooth < 0 or self.lambda_w < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip threshold must be positive")
        if not self.coeff_lr_scale > 0:
            raise ValueError("coeff_lr_scale must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def epochs_to(self, acc: float) -> int:
        """First epoch whose validation accuracy reaches ``acc``, else -1."""
        for r in self.records:
            if r.val_acc >= acc:
                return r.epoch
        return -1

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "train_loss", "train_acc", "val_acc"] + (["seconds"] if timings else [])
        w.writerow(cols)
        for r in self.records:
            row = [r.epoch, fmt(r.train_loss), fmt(r.train_acc), fmt(r.val_acc)]
            if timings:
                row.append(fmt(r.seconds))
            w.writerow(row)
        return buf.getvalue()


def fmt(x: float) -> str:
    return f"{x:.9g}"


def softmax_cross_entropy(logits, label: int):
    """Loss and gradient for one example; the max logit is subtracted first."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    z = logits - logits.max()
    logsum = math.log(np.exp(z).sum())
    p = np.exp(z - logsum)
    grad = p.copy()
    grad[label] -= 1.0
    return float(logsum - z[label]), grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. ``logits``."""
    B, C = logits.shape
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels out of range for {C} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / B


def _as_batch_sequences(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] == 0:
        raise ShapeError(f"expected sequences of shape (B, T, d) with T > 0, got {X.shape}")
    return X


def unroll(model: SequenceClassifier, X):
    """Forward pass over a batch of sequences; returns ``(logits, caches, states)``."""
    X = _as_batch_sequences(X)
    cell = model.cell
    state = cell.zero_state(X.shape[0])
    caches, states = [], []
    kwargs = {"dictionary": cell.dictionary} if cell.kind == "kbrn" else {}
    for t in range(X.shape[1]):
        state, cache = cell.step(X[:, t], state, **kwargs)
        caches.append(cache)
        states.append(state)
    return readout_logits(model.readout, cell.output(state)), caches, states


def predict(model: SequenceClassifier, X, batch_size: int = 500) -> np.ndarray:
    X = _as_batch_sequences(X)
    out = []
    for s in range(0, X.shape[0], batch_size):
        logits, _, _ = unroll(model, X[s:s + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def accuracy(model, X, y) -> float:
    return float(np.mean(predict(model, X) == np.asarray(y)))


def bptt(model: SequenceClassifier, X, labels, lambda_smooth: float = 0.0,
         lambda_w: float = 0.0, record=None):
    """Loss and gradients of every trainable parameter over a batch.

    The loss is the mean cross-entropy of the final-state readout plus
    ``lambda_smooth`` times the summed activation penalties and
    ``lambda_w`` times the squared norm of the weight matrices. ``record``,
    if given, is called as ``record(t, dL/dh_t)`` while walking backward.
    """
    X = _as_batch_sequences(X)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (X.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {X.shape[0]} sequences")
    cell, readout = model.cell, model.readout
    params = model.params()
    grads = {n: np.zeros_like(params[n]) for n in model.trainable()}

    logits, caches, states = unroll(model, X)
    loss, dlogits = batch_cross_entropy(logits, labels)
    h_T = cell.output(states[-1])
    grads["W_out"] += dlogits.T @ h_T
    grads["b_out"] += dlogits.sum(axis=0)
    dh = dlogits @ readout.params["W_out"]
    d_state = (dh,) + tuple(np.zeros_like(s) for s in states[-1][1:])
    T = X.shape[1]
    for t in range(T - 1, -1, -1):
        if record is not None:
            record(t + 1, d_state[0])
        d_state = cell.step_backward(caches[t], d_state, grads)
        if not all(np.all(np.isfinite(d)) for d in d_state):
            raise NumericalError(f"non-finite gradient at timestep {t + 1}")

    if lambda_smooth and hasattr(cell, "smoothness"):
        loss += lambda_smooth * cell.smoothness()
        cell.smoothness_grads(grads, lambda_smooth)
    if lambda_w:
        for n in model.weight_names():
            loss += lambda_w * float(np.sum(params[n] ** 2))
            grads[n] += 2.0 * lambda_w * params[n]
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {n}")
    return loss, grads


def finite_diff_grad(loss_fn, params: dict, eps: float = 1e-5, names=None) -> dict:
    """Central differences of ``loss_fn()`` w.r.t. arrays in ``params``.

    Arrays are perturbed in place and restored, so ``loss_fn`` should read
    the live parameters.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    out = {}
    for n in names or list(params):
        arr = params[n]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = loss_fn()
            flat[k] = orig - eps
            fm = loss_fn()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * eps)
        out[n] = g
    return out


def _lr_for(lr, name):
    return lr[name] if isinstance(lr, dict) else lr


def sgd_step(params: dict, grads: dict, lr) -> dict:
    """In-place ``theta -= lr * g``; ``lr`` may be a per-name dict."""
    for n, g in grads.items():
        params[n] -= _lr_for(lr, n) * g
    return params


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    state.t += 1
    for n, g in grads.items():
        if n not in state.m:
            state.m[n] = np.zeros_like(g)
            state.v[n] = np.zeros_like(g)
        m, v = state.m[n], state.v[n]
        if m.shape != g.shape:
            raise ShapeError(f"optimizer state for {n} has shape {m.shape}, gradient {g.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**state.t)
        v_hat = v / (1 - beta2**state.t)
        params[n] -= _lr_for(lr, n) * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def clip_global_norm(grads: dict, threshold: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


def build_kbrn_dictionary(model: SequenceClassifier, X, rng, max_samples=10_000,
                          batch_size: int = 500):
    """Warm-up pass: pool pre-activations, cluster them, re-fit the initial shape."""
    cell = model.cell
    pooled = []
    for s in range(0, X.shape[0], batch_size):
        _, caches, _ = unroll(model, X[s:s + batch_size])
        pooled.append(np.concatenate([c[2].ravel() for c in caches]))
    samples = np.concatenate(pooled)
    if samples.size > max_samples:
        samples = rng.choice(samples, size=max_samples, replace=False)
    cfg = model.config
    d = dictionary_from_samples(samples, cfg.K, spread=cfg.spread, rng=rng)
    window = (d.centers[0], d.centers[-1]) if d.size > 1 else None
    row = cfg.init_gain * init_coeffs_mimic(d, cfg.init_target, grid_n=max(200, d.size),
                                            window=window)
    cell.set_dictionary(d, np.tile(row, (cell.hidden_size, 1)))
    log.info("dictionary: %d centers in [%.3f, %.3f], bandwidth %.4f",
             d.size, d.centers[0], d.centers[-1], d.bandwidth)
    return d


def _resort(model: SequenceClassifier, opt_state: AdamState | None):
    order = model.cell.resort_centers()
    if order is None or opt_state is None:
        return
    for store in (opt_state.m, opt_state.v):
        if "centers" in store:
            store["centers"] = store["centers"][order]
        if "alpha" in store:
            store["alpha"] = store["alpha"][:, order]


def train(model_config: ModelConfig, train_data, config: TrainConfig, val_data=None,
          callback=None):
    """Train a fresh model; returns ``(model, history)``.

    ``train_data`` and ``val_data`` are objects exposing ``inputs``
    (``(N, T, d)`` array) and ``labels``. Batch gradients are means over
    sequences. Raises :class:`TrainingDiverged` if the loss becomes
    non-finite.
    """
    X = np.asarray(train_data.inputs, dtype=np.float64)
    y = np.asarray(train_data.labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    num_classes = int(getattr(train_data, "num_classes", y.max() + 1))
    rng = make_rng(config.seed)
    model = SequenceClassifier.initialize(model_config, X.shape[2], num_classes, rng)
    if model_config.cell == "kbrn":
        build_kbrn_dictionary(model, X, rng)

    history = TrainHistory()
    opt_state = AdamState()
    names = model.trainable()
    lr = {n: config.lr * (config.coeff_lr_scale if n in ("alpha", "centers") else 1.0)
          for n in names}
    N = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(N)
        loss_sum, correct = 0.0, 0
        for s in range(0, N, config.batch_size):
            idx = perm[s:s + config.batch_size]
            try:
                loss, grads = bptt(model, X[idx], y[idx], config.lambda_smooth, config.lambda_w)
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), history, epoch - 1) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", history, epoch - 1)
            if config.clip is not None:
                clip_global_norm(grads, config.clip)
            params = model.params()
            live = {n: params[n] for n in names}
            if config.optimizer == "adam":
                adam_step(live, grads, opt_state, lr)
            else:
                sgd_step(live, grads, lr)
            bad = [n for n in names if not np.all(np.isfinite(params[n]))]
            if bad:
                raise TrainingDiverged(f"non-finite parameters {bad} in epoch {epoch}",
                                       history, epoch - 1)
            if model_config.cell == "kbrn" and model_config.learn_centers:
                _resort(model, opt_state)
            loss_sum += loss * idx.size
        train_pred = predict(model, X)
        correct = int(np.sum(train_pred == y))
        val_acc = accuracy(model, val_data.inputs, val_data.labels) if val_data is not None else math.nan
        rec = EpochRecord(epoch, loss_sum / N, correct / N, val_acc, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, rec.train_loss,
                 rec.train_acc, rec.val_acc)
        if callback is not None:
            callback(model, rec)
        if config.early_stop_acc is not None and val_acc >= config.early_stop_acc:
            break
    return model, history


def gradient_check(model: SequenceClassifier, X, labels, lambda_smooth=0.0, lambda_w=0.0,
                   eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between :func:`bptt` and central differences."""
    _, analytic = bptt(model, X, labels, lambda_smooth, lambda_w)
    params = model.params()

    def loss_fn():
        return bptt(model, X, labels, lambda_smooth, lambda_w)[0]

    numeric = finite_diff_grad(loss_fn, params, eps, names=list(analytic))
    return max_relative_error(analytic, numeric, floor)


def max_relative_error(a: dict, b: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for n in a:
        x, y = a[n], b[n]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
