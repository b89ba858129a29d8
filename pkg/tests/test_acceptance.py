"""Acceptance criteria, one test per criterion.

Every test appends a ``criterion N: PASS|FAIL`` line to the session report
(printed in the terminal summary) before asserting, so a failing criterion
still shows its measured numbers.
"""
import json
import math
import time

import numpy as np
import pytest

from kbrn.analysis import gradient_norm_trace
from kbrn.benchmarks import gen_prefix_task
from kbrn.cells import Readout, TanhRNNCell
from kbrn.cli import main
from kbrn.kernel import (
    KernelActivation,
    KernelDictionary,
    activate,
    covering_dictionary,
    fit_centers_kmeans_1d,
    gram_matrix,
    init_coeffs_mimic,
    kmeans_objective,
    mimic_grid,
)
from kbrn.mathcore import make_rng
from kbrn.model import ModelConfig, SequenceClassifier
from kbrn.training import TrainConfig, batch_cross_entropy, softmax_cross_entropy, train

from conftest import ACCEPTANCE, brute_force_kmeans, expansive_kbrn


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def test_criterion_1_gradient_oracle(capsys):
    t0 = time.perf_counter()
    codes, lines = {}, []
    for cell in ("kbrn", "tanh", "lstm"):
        codes[cell] = main(["gradcheck", "--cell", cell, "--seed", "0", "--instances", "20"])
        lines.append(capsys.readouterr().out.strip())
    seconds = time.perf_counter() - t0
    ok = all(c == 0 for c in codes.values()) and seconds < 120
    report(1, ok, f"exit codes {codes}, {seconds:.1f}s; " + "; ".join(lines))
    assert ok


def test_criterion_2_activation_expressiveness():
    d_sin = covering_dictionary(-math.pi, math.pi, 15)
    grid = mimic_grid(d_sin, 200)
    sin_mse = float(np.mean((activate(KernelActivation(d_sin, init_coeffs_mimic(d_sin, "sin", 200, 1e-6)),
                                      grid) - np.sin(grid)) ** 2))
    d_tanh = covering_dictionary(-3.0, 3.0, 15)
    grid = mimic_grid(d_tanh, 200)
    tanh_dev = float(np.max(np.abs(activate(KernelActivation(d_tanh, init_coeffs_mimic(d_tanh, "tanh", 200, 1e-6)),
                                            grid) - np.tanh(grid))))
    ok = sin_mse < 1e-3 and tanh_dev < 0.01 and grid[0] <= -3 + 1e-12 and grid[-1] >= 3 - 1e-12
    report(2, ok, f"sin grid MSE {sin_mse:.2e} (< 1e-3), tanh max deviation {tanh_dev:.2e} (< 0.01)")
    assert ok


def test_criterion_3_kmeans_oracle():
    rng = make_rng(2024)
    worst, failures = 0.0, 0
    for _ in range(100):
        K = int(rng.integers(1, 3, endpoint=True))
        n = int(rng.integers(K, 8, endpoint=True))
        x = rng.normal(0.0, 3.0, n)
        if rng.random() < 0.3:  # exercise tied samples too
            x[rng.integers(n)] = x[0]
        if np.unique(x).size < K:
            x = x + np.arange(n)
        gap = abs(kmeans_objective(x, fit_centers_kmeans_1d(x, K, rng=rng)) - brute_force_kmeans(x, K))
        worst = max(worst, gap)
        failures += gap > 1e-9
    ok = failures == 0
    report(3, ok, f"100 trials, {failures} mismatches, worst objective gap {worst:.1e} (<= 1e-9)")
    assert ok


BENCH_T = 50
ESCALATION = (75, 100, 150)


def _bench_run(cell, T, seed=0):
    train_set, test_set = gen_prefix_task(T, 1, 2, 5, 2000, 500, seed)
    config = TrainConfig(lr=1e-3, optimizer="adam", epochs=300, seed=seed, early_stop_acc=0.99)
    _, history = train(ModelConfig(cell=cell, hidden=10), train_set, config, test_set)
    accs = [r.val_acc for r in history.records]
    return max(accs), accs[-1], history.epochs_to(0.95), len(accs)


@pytest.mark.slow
def test_criterion_4_long_dependency_benchmark():
    t0 = time.perf_counter()
    runs = {cell: _bench_run(cell, BENCH_T) for cell in ("kbrn", "lstm", "tanh")}
    seconds = time.perf_counter() - t0

    def desc(cell):
        best, final, e95, n = runs[cell]
        return f"{cell} best {best:.3f} final {final:.3f} epochs_to_95 {e95} ({n} epochs)"

    ok_a = runs["kbrn"][0] >= 0.95
    ok_b = runs["lstm"][0] >= 0.95
    ok_c = runs["tanh"][0] <= 0.70
    report("4a", ok_a, f"T={BENCH_T}: {desc('kbrn')} (need >= 0.95)")
    report("4b", ok_b, f"T={BENCH_T}: {desc('lstm')} (need >= 0.95)")
    detail = f"T={BENCH_T}: {desc('tanh')} (need <= 0.70); three runs took {seconds:.0f}s"
    if not ok_c:
        crossover = next((T for T in ESCALATION if _bench_run("tanh", T)[0] <= 0.70), None)
        detail += f"; tanh separation first appears at T={crossover}"
    report("4c", ok_c, detail)
    assert ok_a and ok_b and ok_c


def test_criterion_5_dynamics_mechanism():
    rng = make_rng(5)
    trace = gradient_norm_trace(expansive_kbrn(), rng.uniform(-1, 1, (20, 1)), 0)
    pump = float(np.nanmax(trace.backward_ratios()))
    ok_pump = pump > 1 and trace.jacobian_norm.max() > 1

    contractive = True
    worst_ratio, worst_jac = 0.0, 0.0
    for i in range(50):
        h = 1 if i < 25 else 4
        W = rng.uniform(-1, 1, (h, h))
        # scale so both the row- and column-sum norms are <= 0.9 (hence the 2-norm too)
        W *= 0.9 / max(np.abs(W).sum(axis=1).max(), np.abs(W).sum(axis=0).max())
        cell = TanhRNNCell(rng.normal(size=(h, 2)), W, rng.normal(size=h))
        model = SequenceClassifier(cell, Readout(rng.normal(size=(2, h)), np.zeros(2)))
        tr = gradient_norm_trace(model, rng.normal(size=(30, 2)), int(rng.integers(2)))
        ratios = tr.backward_ratios()
        worst_ratio = max(worst_ratio, float(np.nanmax(ratios)))
        worst_jac = max(worst_jac, float(tr.jacobian_norm.max()))
        contractive &= bool(np.all(tr.grad_norm[:-1] <= tr.grad_norm[1:])) and worst_jac <= 1
    ok = ok_pump and contractive
    report(5, ok, f"expansive KBRN max backward ratio {pump:.3f} (> 1), max Jacobian norm "
                  f"{trace.jacobian_norm.max():.3f}; tanh ||W|| <= 0.9 over 50 cells: max ratio "
                  f"{worst_ratio:.3f}, max Jacobian norm {worst_jac:.3f}, monotone={contractive}")
    assert ok


def _cli_csv_bodies(base):
    cfg = {
        "model": {"cell": "kbrn", "hidden": 4, "K": 9},
        "train": {"epochs": 3, "batch_size": 16},
        "data": {"T": 8, "n_train": 60, "n_test": 30},
        "sweep": {"lengths": [6, 8], "cells": ["kbrn", "tanh", "lstm"]},
    }
    base.mkdir()
    path = base / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = str(base / "runs")
    codes = [main(["genbench", "--config", str(path), "--out", out]),
             main(["train", "--config", str(path), "--out", out]),
             main(["sweep", "--config", str(path), "--out", out])]
    run = next((base / "runs").glob("train-*"))
    bench = next((base / "runs").glob("bench-*"))
    codes.append(main(["analyze", "--model", str(run / "model.json"),
                       "--data", str(bench / "test.jsonl")]))
    files = sorted(p for p in (base / "runs").rglob("*")
                   if p.suffix in (".csv", ".jsonl") or p.name == "model.json")
    return codes, {str(p.relative_to(base)): p.read_bytes() for p in files}


def test_criterion_6_numerical_hygiene(tmp_path, capsys):
    ce_gap = 0.0
    for C in (2, 3, 5, 10, 1000):
        for z in (0.0, -7.5, 123.0):
            ce_gap = max(ce_gap, abs(softmax_cross_entropy(np.full(C, z), 0)[0] - math.log(C)))
        loss, _ = batch_cross_entropy(np.zeros((4, C)), np.arange(4) % C)
        ce_gap = max(ce_gap, abs(loss - math.log(C)))

    rng = make_rng(6)
    min_eig = math.inf
    for _ in range(200):
        K = int(rng.integers(1, 30, endpoint=True))
        d = covering_dictionary(-1, 1, K) if K > 5 and rng.random() < 0.5 else None
        if d is None:
            centers = np.unique(rng.uniform(-3, 3, K))
            d = KernelDictionary(centers, rng.uniform(0.05, 3.0))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(gram_matrix(d)).min()))

    codes_a, bodies_a = _cli_csv_bodies(tmp_path / "a")
    codes_b, bodies_b = _cli_csv_bodies(tmp_path / "b")
    capsys.readouterr()
    identical = bodies_a.keys() == bodies_b.keys() and all(
        bodies_a[k] == bodies_b[k] for k in bodies_a)
    n_csv = sum(k.endswith(".csv") for k in bodies_a)
    ok = (ce_gap <= 1e-12 and min_eig >= -1e-10 and identical
          and codes_a == [0, 0, 0, 0] and codes_b == codes_a and n_csv >= 4)
    report(6, ok, f"|CE(uniform) - ln C| max {ce_gap:.1e} (<= 1e-12); min Gram eigenvalue "
                  f"{min_eig:.1e} (>= -1e-10); {len(bodies_a)} CLI output files ({n_csv} CSV) "
                  f"byte-identical across reruns: {identical}; exit codes {codes_a}")
    assert ok
