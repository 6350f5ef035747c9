"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the synthetic ablation
and the sweep dominate the runtime (a few minutes on one core).
"""

import csv
import math
import time

import numpy as np
import pytest

from timekernel import cli
from timekernel.autodiff import Tape
from timekernel.data import GapRuleTask, bayes_rates, generate
from timekernel.embeddings import BochnerInvCdf, BochnerNonParam, BochnerNormal, kernel_estimate
from timekernel.kernels import (
    claim1_bound,
    cosine_spec,
    eigenfunction_residual,
    eigenvalue,
    gaussian_spec,
    mc_approximation_study,
    triangle_spec,
    truncation_decay,
)
from timekernel.model import ModelConfig, make_examples
from timekernel.training import (
    OptimConfig,
    Trainer,
    build_model,
    load_checkpoint,
    masked_next_event_loss,
    save_checkpoint,
    train,
)

from test_model import FAMILIES, _grad_error, tiny_model, tiny_sequences


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_1_self_kernel_and_translation_invariance(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_self = worst_shift = 0.0
    for i in range(100):
        d = int(rng.integers(1, 65))
        family = i % 3
        if family == 0:
            emb = BochnerNormal(d=d, mu=rng.normal(), sigma=rng.uniform(0.1, 3.0), random_state=i)
        elif family == 1:
            emb = BochnerNonParam(d=d, omega=rng.uniform(-5, 5, d))
        else:
            lo = rng.uniform(0.1, 2.0)
            emb = BochnerInvCdf(d=d, hidden=int(rng.integers(2, 17)), tau_min=lo, tau_max=lo + rng.uniform(1, 50),
                                random_state=i)
        emb.fit()
        t = rng.uniform(0, 100, 8)
        u = rng.uniform(0, 100, 8)
        s = rng.uniform(-50, 50)
        worst_self = max(worst_self, np.max(np.abs(kernel_estimate(emb, t, t).data - 1.0)))
        shifted = kernel_estimate(emb, t + s + 50, u + s + 50).data
        worst_shift = max(worst_shift, np.max(np.abs(shifted - kernel_estimate(emb, t, u).data)))
    elapsed = time.perf_counter() - start
    ok = worst_self <= 1e-12 and worst_shift <= 1e-10 and elapsed < 1.0
    report(capsys, 1, ok, f"max|K(t,t)-1|={worst_self:.2e} (<=1e-12), max shift error={worst_shift:.2e} "
                          f"(<=1e-10), {elapsed:.2f}s (<1s)")


def test_criterion_2_monte_carlo_convergence(capsys):
    start = time.perf_counter()
    rows = mc_approximation_study(gaussian_spec(t_max=4.0), [64, 256, 1024, 4096], seeds=20, grid_step=0.05)
    means = [r["mean_sup_error"] for r in rows]
    bound = claim1_bound(1.0, 1.0, 0.5, 512).value
    elapsed = time.perf_counter() - start
    ok = (
        all(a >= b for a, b in zip(means, means[1:]))
        and means[-1] < 0.05
        and abs(bound - 0.10361) <= 1e-4
        and elapsed < 30
    )
    report(capsys, 2, ok, f"mean sup errors {[round(m, 5) for m in means]} (non-increasing, last <0.05), "
                          f"bound={bound:.5f} (0.10361+-1e-4), {elapsed:.1f}s (<30s)")


def test_criterion_3_eigenfunctions(capsys):
    start = time.perf_counter()
    cos_res = eigenfunction_residual(cosine_spec(), 1)
    tri_res = [eigenfunction_residual(triangle_spec(), j) for j in (1, 2, 3)]
    c1 = eigenvalue(triangle_spec(), 1)
    elapsed = time.perf_counter() - start
    ok = cos_res < 1e-8 and max(tri_res) < 1e-6 and abs(c1 - 4 / math.pi**2) <= 1e-6 and elapsed < 10
    report(capsys, 3, ok, f"cosine j=1 residual={cos_res:.2e} (<1e-8), triangle residuals "
                          f"{[f'{r:.2e}' for r in tri_res]} (<1e-6), c1={c1:.8f} vs 4/pi^2={4 / math.pi**2:.8f}, "
                          f"{elapsed:.2f}s (<10s)")


def test_criterion_4_truncation_decay(capsys):
    start = time.perf_counter()
    rows = truncation_decay(triangle_spec(), [1, 3, 7, 15, 31])
    errs = [r["sup_error"] for r in rows]
    elapsed = time.perf_counter() - start
    ok = all(a > b for a, b in zip(errs, errs[1:])) and abs(errs[0] - 0.0947) <= 1e-3 and elapsed < 5
    report(capsys, 4, ok, f"sup errors {[round(e, 5) for e in errs]} (strictly decreasing, d=1 0.0947+-1e-3), "
                          f"{elapsed:.2f}s (<5s)")


def test_criterion_5_gradient_integrity(capsys):
    start = time.perf_counter()
    worst, groups = {}, 0
    h = 1e-5
    for family in sorted(FAMILIES):
        model = tiny_model(family, num_blocks=2, num_heads=2, seed=1)
        batch = make_examples(tiny_sequences(), 4, 5)
        tape = Tape()
        with tape:
            loss = masked_next_event_loss(model, batch)
        tape.backward(loss)
        errs = []
        for name, p in model.trainable().items():
            numeric = np.zeros_like(p.data)
            flat, grad = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(masked_next_event_loss(model, batch).data)
                flat[i] = orig - h
                down = float(masked_next_event_loss(model, batch).data)
                flat[i] = orig
                grad[i] = (up - down) / (2 * h)
            errs.append(_grad_error(p.grad, numeric))
            groups += 1
        worst[family] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-3 and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 5, ok, f"{groups} parameter groups at V=5, L=4; worst relative error per family: {detail} "
                          f"(<=1e-3), {elapsed:.1f}s (<60s)")


@pytest.mark.slow
def test_criterion_6_synthetic_ablation(capsys):
    start = time.perf_counter()
    task = GapRuleTask()
    ds = generate(task, seed=0)
    optim = OptimConfig(max_epochs=30, patience=3)
    acc = {}
    for name, params in [("posenc", {}), ("mercer", {"k": 5, "jmax": 8}), ("bochner-nonparam", {})]:
        cfg = ModelConfig(vocab_size=task.vocab_size, embedder=name, embedder_params=params)
        acc[name] = train(cfg, optim, ds.train, ds.valid, ds.test, seed=0).test_report.accuracy
    elapsed = time.perf_counter() - start
    best = max(acc["mercer"], acc["bochner-nonparam"])
    ok = (
        acc["posenc"] <= 0.65
        and acc["mercer"] >= 0.85
        and acc["bochner-nonparam"] >= 0.85
        and best - acc["posenc"] >= 0.15
        and elapsed < 900
    )
    ceiling = bayes_rates(task)[1]
    report(capsys, 6, ok, f"test accuracy posenc={acc['posenc']:.4f} (<=0.65, no-gap ceiling {ceiling:.4f}), "
                          f"mercer={acc['mercer']:.4f}, nonparam={acc['bochner-nonparam']:.4f} (>=0.85), "
                          f"gap={best - acc['posenc']:.4f} (>=0.15), {elapsed:.0f}s (<900s)")


@pytest.mark.slow
def test_criterion_7_sensitivity_sweep(capsys, tmp_path):
    start = time.perf_counter()
    common = ["--n-train", "400", "--epochs", "30", "--patience", "3"]
    runs = {
        "k": ["--param", "k", "--values", "1,5,10"],
        "mercer_d": ["--param", "d", "--values", "8,32,64", "--k", "1", "--no-intercept"],
        "nonparam_d": ["--param", "d", "--values", "8,32,64", "--embedder", "bochner-nonparam"],
    }
    summaries = {}
    for key, flags in runs.items():
        rc = cli.main(["sweep", *common, *flags, "--out-dir", str(tmp_path / key)])
        assert rc == 0, key
        summaries[key] = {int(r["value"]): float(r["accuracy_mean"]) for r in read_csv(tmp_path / key / "sweep_summary.csv")}
    diffs = {d: abs(summaries["mercer_d"][d] - summaries["nonparam_d"][d]) for d in (8, 32, 64)}
    elapsed = time.perf_counter() - start
    ok = set(summaries["k"]) == {1, 5, 10} and max(diffs.values()) <= 0.03
    report(capsys, 7, ok, f"k sweep accuracy {summaries['k']}; mercer k=1 no intercept {summaries['mercer_d']} vs "
                          f"nonparam {summaries['nonparam_d']}; max |diff|={max(diffs.values()):.4f} (<=0.03), "
                          f"{elapsed:.0f}s")


def test_criterion_8_determinism_and_round_trip(capsys, tmp_path):
    flags = ["train", "--task", "gap-rule", "--n-train", "60", "--n-valid", "15", "--n-test", "15", "--epochs", "3",
             "--batch-size", "128", "--dropout", "0.1", "--seed", "11"]
    logs = []
    for run in ("a", "b"):
        assert cli.main([*flags, "--out-dir", str(tmp_path / run)]) == 0
        rows = read_csv(tmp_path / run / "epochs.csv")
        logs.append([{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    same_log = logs[0] == logs[1]
    same_ckpt = (tmp_path / "a" / "checkpoint.tkc").read_bytes() == (tmp_path / "b" / "checkpoint.tkc").read_bytes()

    ds = generate(GapRuleTask(n_train=40, n_valid=5, n_test=5, seq_len=32), seed=1)
    cfg = ModelConfig(vocab_size=20, embedder="bochner-invcdf", embedder_params={"d": 8}, dropout=0.1)
    trainer = Trainer(build_model(cfg, 3, ds.train), OptimConfig(batch_size=64), seed=3)
    ex = make_examples(ds.train, 8, 20)
    trainer.run_epoch(ex.take(np.arange(256)))
    save_checkpoint(tmp_path / "mid.tkc", trainer.checkpoint())
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "mid.tkc"))
    batch = ex.take(np.arange(300, 364))
    same_loss = trainer.step(batch) == resumed.step(batch)
    same_params = all(np.array_equal(p.data, resumed.model.params[n].data) for n, p in trainer.model.params.items())
    ok = same_log and same_ckpt and same_loss and same_params
    report(capsys, 8, ok, f"epoch logs identical={same_log}, checkpoints identical={same_ckpt}, "
                          f"resumed step loss identical={same_loss}, parameters identical={same_params}")
