"""Learnable activation functions written as Gaussian kernel expansions.

A layer shares one :class:`KernelDictionary` (sorted 1-D centers plus a
bandwidth); each neuron owns a coefficient vector ``alpha`` so that

    sigma(a) = sum_k alpha_k * exp(-(a - c_k)**2 / (2 * gamma**2))

Scalar helpers (``activate`` and friends) mirror the vectorised
:func:`layer_forward` used by the cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mathcore import ShapeError, as_vector

TARGETS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "sin": np.sin,
    "zero": np.zeros_like,
    "identity": lambda a: np.asarray(a, dtype=np.float64).copy(),
}


@dataclass(frozen=True)
class KernelDictionary:
    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        c = as_vector(self.centers).copy()
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        if c.size < 1:
            raise ValueError("dictionary needs at least one center")
        if np.any(np.diff(c) <= 0):
            raise ValueError("centers must be strictly increasing")
        g = float(self.bandwidth)
        if not (math.isfinite(g) and g > 0):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        object.__setattr__(self, "bandwidth", g)

    @property
    def size(self) -> int:
        return self.centers.size

    def features(self, a) -> np.ndarray:
        """Kernel values ``kappa(a, c_k)``; shape ``a.shape + (K,)``."""
        d = np.asarray(a, dtype=np.float64)[..., None] - self.centers
        return np.exp(-0.5 * (d / self.bandwidth) ** 2)


@dataclass
class KernelActivation:
    dictionary: KernelDictionary
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = as_vector(self.coeffs).copy()
        if self.coeffs.size != self.dictionary.size:
            raise ShapeError(
                f"coefficient length {self.coeffs.size} != dictionary size {self.dictionary.size}"
            )

    def __call__(self, a):
        return activate(self, a)


def gaussian_kernel(a: float, c: float, gamma: float) -> float:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return math.exp(-((a - c) ** 2) / (2.0 * gamma * gamma))


def activate(act: KernelActivation, a):
    return act.dictionary.features(a) @ act.coeffs


def activate_grad_input(act: KernelActivation, a):
    d = act.dictionary
    diff = d.centers - np.asarray(a, dtype=np.float64)[..., None]
    return (d.features(a) * diff) @ act.coeffs / d.bandwidth**2


def activate_grad_coeffs(act: KernelActivation, a) -> np.ndarray:
    return act.dictionary.features(a)


def layer_forward(a: np.ndarray, dictionary: KernelDictionary, coeffs: np.ndarray):
    """Evaluate one activation per unit over a batch of pre-activations.

    ``a`` has shape ``(..., h)`` and ``coeffs`` shape ``(h, K)``. Returns
    ``(out, slope, phi)``: the activations, their input derivatives, and
    the kernel features (the coefficient gradients), shape ``(..., h, K)``.
    """
    diff = dictionary.centers - a[..., None]
    phi = np.exp(-0.5 * (diff / dictionary.bandwidth) ** 2)
    weighted = phi * coeffs
    out = weighted.sum(axis=-1)
    slope = (weighted * diff).sum(axis=-1) / dictionary.bandwidth**2
    return out, slope, phi


def center_grad_terms(a: np.ndarray, dictionary: KernelDictionary, coeffs: np.ndarray, phi):
    """d sigma_i(a) / d c_k for every unit and center, shape ``(..., h, K)``."""
    diff = a[..., None] - dictionary.centers
    return coeffs * phi * diff / dictionary.bandwidth**2


def gram_matrix(dictionary: KernelDictionary) -> np.ndarray:
    return dictionary.features(dictionary.centers)


def smoothness_penalty(act: KernelActivation, gram: np.ndarray) -> float:
    """RKHS norm ``alpha^T G alpha`` of the activation."""
    gram = np.asarray(gram, dtype=np.float64)
    k = act.coeffs.size
    if gram.shape != (k, k):
        raise ShapeError(f"gram shape {gram.shape} does not match {k} coefficients")
    return float(act.coeffs @ gram @ act.coeffs)


def smoothness_penalty_grad(act: KernelActivation, gram: np.ndarray) -> np.ndarray:
    gram = np.asarray(gram, dtype=np.float64)
    k = act.coeffs.size
    if gram.shape != (k, k):
        raise ShapeError(f"gram shape {gram.shape} does not match {k} coefficients")
    return 2.0 * gram @ act.coeffs


def gram_center_grad(dictionary: KernelDictionary, coeffs: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_units alpha^T G alpha`` with respect to the centers.

    ``coeffs`` is ``(h, K)``.
    """
    c = dictionary.centers
    g = gram_matrix(dictionary)
    diff = c[:, None] - c[None, :]
    outer = coeffs.T @ coeffs  # sum over units of alpha_j alpha_k
    return -2.0 * (outer * g * diff).sum(axis=1) / dictionary.bandwidth**2


def build_dictionary_uniform(lo: float, hi: float, K: int, gamma: float) -> KernelDictionary:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if K < 2:
        raise ValueError(f"need at least 2 centers, got {K}")
    return KernelDictionary(np.linspace(lo, hi, K), gamma)


def kmeans_objective(samples, centers) -> float:
    x = np.asarray(samples, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    return float((np.min((x[:, None] - c[None, :]) ** 2, axis=1)).sum())


def _optimal_partition_centers(values: np.ndarray, weights: np.ndarray, K: int) -> np.ndarray:
    """Exact weighted 1-D k-means by dynamic programming over sorted values."""
    m = values.size
    cw = np.concatenate([[0.0], np.cumsum(weights)])
    cx = np.concatenate([[0.0], np.cumsum(weights * values)])
    cxx = np.concatenate([[0.0], np.cumsum(weights * values**2)])
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    w = cw[j + 1] - cw[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = cxx[j + 1] - cxx[i] - (cx[j + 1] - cx[i]) ** 2 / w
    cost = np.where(j >= i, np.maximum(cost, 0.0), np.inf)

    best = cost[0].copy()  # best[j]: one cluster over 0..j
    back = []
    for _ in range(1, K):
        prev = np.concatenate([[np.inf], best[:-1]])  # clusters end at i-1
        total = prev[:, None] + cost
        arg = np.argmin(total, axis=0)
        best = total[arg, np.arange(m)]
        back.append(arg)
    bounds = [m]
    end = m - 1
    for arg in reversed(back):
        start = int(arg[end])
        bounds.append(start)
        end = start - 1
    bounds.append(0)
    bounds = bounds[::-1]
    return np.array([
        (cx[b] - cx[a]) / (cw[b] - cw[a]) for a, b in zip(bounds[:-1], bounds[1:])
    ])


def fit_centers_kmeans_1d(
    samples,
    K: int,
    max_iter: int = 100,
    tol: float = 1e-9,
    rng: np.random.Generator | None = None,
    max_samples: int = 10_000,
    max_seed_points: int = 512,
) -> np.ndarray:
    """Lloyd's algorithm on scalar samples; returns sorted centers.

    Centers are seeded with the exact optimum of a weighted, compressed copy
    of the data (the distinct values themselves when there are at most
    ``max_seed_points`` of them), so small problems start, and stay, at the
    global optimum. Samples beyond ``max_samples`` are subsampled with
    ``rng``.
    """
    x = as_vector(samples)
    if x.size == 0:
        raise ValueError("no samples to cluster")
    if K < 1:
        raise ValueError("K must be at least 1")
    if x.size > max_samples:
        if rng is None:
            raise ValueError("rng required to subsample")
        x = rng.choice(x, size=max_samples, replace=False)
    x = np.sort(x)
    values, counts = np.unique(x, return_counts=True)
    if K > values.size:
        raise ValueError(f"K={K} exceeds the {values.size} distinct sample values")

    if values.size > max_seed_points:
        groups = np.array_split(np.arange(x.size), max_seed_points)
        seed_vals = np.array([x[g].mean() for g in groups])
        seed_w = np.array([float(g.size) for g in groups], dtype=np.float64)
    else:
        seed_vals, seed_w = values, counts.astype(np.float64)
    centers = _optimal_partition_centers(seed_vals, seed_w, K)

    prev_obj = math.inf
    for _ in range(max_iter):
        dist = (x[:, None] - centers[None, :]) ** 2
        assign = np.argmin(dist, axis=1)
        obj = float(dist[np.arange(x.size), assign].sum())
        assert obj <= prev_obj * (1 + 1e-12) + 1e-12, "k-means objective increased"
        prev_obj = obj
        new = centers.copy()
        for k in range(K):
            members = x[assign == k]
            if members.size:
                new[k] = members.mean()
            else:
                far = np.argmax(dist[np.arange(x.size), assign])
                new[k] = x[far]
                assign[far] = k
        moved = np.max(np.abs(new - centers))
        centers = new
        if moved < tol:
            break
    return np.sort(centers)


def dictionary_from_samples(
    samples,
    K: int,
    spread: float = 1.0,
    rng: np.random.Generator | None = None,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> KernelDictionary:
    """Cluster pooled pre-activations into a dictionary.

    Bandwidth is the mean adjacent-center spacing times ``spread``. Falls
    back to a uniform grid over the sample range when the samples have fewer
    than ``K`` distinct values.
    """
    x = as_vector(samples)
    if K == 1:
        c = np.array([x.mean()])
        span = x.max() - x.min()
        return KernelDictionary(c, spread * (span if span > 0 else 1.0))
    if np.unique(x).size < K:
        lo, hi = float(x.min()), float(x.max())
        if lo == hi:
            lo, hi = -1.0, 1.0
        return build_dictionary_uniform(lo, hi, K, spread * (hi - lo) / (K - 1))
    c = fit_centers_kmeans_1d(x, K, max_iter=max_iter, tol=tol, rng=rng)
    return KernelDictionary(c, spread * float(np.mean(np.diff(c))))


def init_coeffs_mimic(
    dictionary: KernelDictionary,
    target: str | Callable = "tanh",
    grid_n: int = 200,
    ridge: float = 1e-6,
    window: tuple[float, float] | None = None,
) -> np.ndarray:
    """Ridge fit of ``alpha`` so that the expansion approximates ``target``.

    Least squares over ``grid_n`` uniform points of ``window``, solved by
    the normal equations. The default window is the fully supported
    interior ``[c_1 + 2 gamma, c_K - 2 gamma]`` (the center range itself
    when that interval is empty).
    """
    fn = TARGETS[target] if isinstance(target, str) else target
    K = dictionary.size
    if grid_n < K:
        raise ValueError(f"grid_n={grid_n} must be at least K={K}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    grid = mimic_grid(dictionary, grid_n, window)
    phi = dictionary.features(grid)
    y = np.asarray(fn(grid), dtype=np.float64)
    normal = phi.T @ phi + ridge * np.eye(K)
    rhs = phi.T @ y
    if ridge == 0 and np.linalg.cond(normal) > 1.0 / np.finfo(float).eps:
        raise np.linalg.LinAlgError(
            "normal equations are singular with ridge=0; pass a positive ridge"
        )
    return np.linalg.solve(normal, rhs)


def mimic_grid(dictionary: KernelDictionary, grid_n: int, window=None) -> np.ndarray:
    if window is None:
        c, g = dictionary.centers, dictionary.bandwidth
        lo, hi = c[0] + 2 * g, c[-1] - 2 * g
        if not lo < hi:
            lo, hi = c[0], c[-1]
        if lo == hi:
            lo, hi = lo - g, hi + g
        window = (lo, hi)
    return np.linspace(window[0], window[1], grid_n)


def covering_dictionary(lo: float, hi: float, K: int) -> KernelDictionary:
    """Uniform dictionary whose supported interior is exactly ``[lo, hi]``.

    Centers extend two bandwidths past each end, with bandwidth equal to
    the center spacing (requires ``K > 5``).
    """
    if K <= 5:
        raise ValueError("covering dictionary needs K > 5")
    gamma = (hi - lo) / (K - 5)
    return build_dictionary_uniform(lo - 2 * gamma, hi + 2 * gamma, K, gamma)
