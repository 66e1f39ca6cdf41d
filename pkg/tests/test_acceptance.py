"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in the "acceptance criteria" section of the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from covla.cli import main
from covla.datagen import DatasetSpec, MultimodalPost, generate_dataset
from covla.evaluation import ablation_suite, evaluate, robustness_sweep
from covla.metrics import compute_metrics, confusion_matrix
from covla.model import Dims, build_model, forward
from covla.numkernel import Tensor
from covla.training import (TrainConfig, batch_objective, check_gradients, cross_entropy,
                            snapshot_reference, total_loss, train)

GRAD_DIMS = Dims(vocab_size=20, d_raw=4, d_T=6, d_V=5, d=8, d_c=8, n_categories=5)


def default_dims(spec):
    return Dims(vocab_size=spec.vocab_size, d_raw=spec.d_raw, n_categories=spec.n_categories)


@pytest.fixture(scope="module")
def default_data():
    return generate_dataset(DatasetSpec(n_samples=2000, n_categories=5, ambiguity_rate=0.5,
                                        dominance=0.5, conflict_rate=0.1))


@pytest.fixture(scope="module")
def default_run(default_data):
    model = build_model("full", default_dims(default_data.spec), 0)
    return train(model, default_data, TrainConfig())


def test_gradient_oracle(acceptance):
    start = time.perf_counter()
    errors = [check_gradients(GRAD_DIMS, seed, n_tokens=3, n_regions=4).max_rel_error for seed in range(10)]
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    assert acceptance("gradient oracle", ok,
                      f"max rel error {max(errors):.2e} (< 1e-4) over 10 seeds in {elapsed:.1f}s (< 60s)")


def test_normalization_suite(acceptance):
    rng = np.random.default_rng(2024)
    worst_attn = worst_probs = 0.0
    gates_ok = True
    for i in range(1000):
        c = int(rng.integers(2, 9))
        dims = Dims(vocab_size=20, d_raw=4, d_T=6, d_V=5, d=8, d_c=8, n_categories=c)
        model = build_model("full", dims, seed=i)
        tensors = {k: Tensor(v + 0.5 * rng.standard_normal(v.shape)) for k, v in model.params.items()}
        post = MultimodalPost(id="r", tokens=rng.integers(0, 20, int(rng.integers(1, 10))),
                              regions=2.0 * rng.standard_normal((int(rng.integers(1, 9)), 4)), label=0)
        s = forward(model, [post], tensors).sample(0)
        worst_attn = max(worst_attn, np.abs(s["A"].sum(axis=1) - 1).max())
        worst_probs = max(worst_probs, abs(s["probs"].sum() - 1))
        for g in (s["alpha_T"], s["alpha_V"]):
            gates_ok &= bool(((g > 0) & (g < 1)).all())
    ok = worst_attn <= 1e-12 and worst_probs <= 1e-12 and gates_ok
    assert acceptance("normalization suite", ok,
                      f"1000 instances: attention row dev {worst_attn:.1e}, class dist dev "
                      f"{worst_probs:.1e} (<= 1e-12), gates in (0,1): {gates_ok}")


def test_loss_identities(acceptance, default_data):
    ce_dev = max(abs(float(cross_entropy(np.full((7, c), 1.0 / c), np.arange(7) % c).data) - math.log(c))
                 for c in range(2, 11))
    model = build_model("full", default_dims(default_data.spec), 0)
    ref = snapshot_reference(model)
    posts = default_data.split("train")[:64]
    total, ce, kd = batch_objective(model, posts, ref.features(posts), lam=0.1)
    kd0 = float(kd.data)
    same = float(total_loss(ce, kd, 0.0).data) == float(ce.data)
    ok = ce_dev <= 1e-12 and kd0 == 0.0 and same
    assert acceptance("loss identities", ok,
                      f"uniform CE - ln C {ce_dev:.1e} (<= 1e-12); KD at snapshot {kd0!r}; "
                      f"total(lambda=0) == CE: {same}")


def test_ablation_ordering(acceptance, default_data):
    start = time.perf_counter()
    table = ablation_suite(default_data, default_dims(default_data.spec), [1, 2, 3, 4, 5])
    elapsed = time.perf_counter() - start
    means = {r["variant"]: r["macro_f1_mean"] for r in table.rows()}
    sds = {r["variant"]: r["macro_f1_sd"] for r in table.rows()}
    ok = means["full"] > means["no_cam"] and means["full"] > means["no_cmf"] and elapsed < 900
    detail = ", ".join(f"{v} {means[v]:.4f}+-{sds[v]:.4f}" for v in means)
    margins = f"margins {100 * (means['full'] - means['no_cam']):.1f} / {100 * (means['full'] - means['no_cmf']):.1f} pts"
    assert acceptance("ablation ordering", ok, f"{detail}; {margins}; {elapsed:.0f}s (< 900s)")


def test_learnability(acceptance, default_run):
    easy = generate_dataset(DatasetSpec(n_samples=2000, ambiguity_rate=0.0, conflict_rate=0.0))
    trained, _ = train(build_model("full", default_dims(easy.spec), 0), easy, TrainConfig())
    easy_f1 = evaluate(trained, easy.split("test")).macro_f1
    _, history = default_run
    ratio = history[-1].total / history[0].total
    ok = easy_f1 >= 0.80 and ratio <= 0.8
    assert acceptance("learnability", ok,
                      f"easy-data test macro-F1 {easy_f1:.4f} (>= 0.80); default-data final/first "
                      f"train loss {ratio:.3f} (<= 0.8)")


def test_robustness(acceptance, default_data, default_run):
    model, _ = default_run
    test = default_data.split("test")
    sigmas, drops = [0.0, 0.5, 1.0, 2.0, 4.0], [0.0, 0.25, 0.5, 0.75, 0.95]
    curves = robustness_sweep(model, test, sigmas, drops, seed=0)
    clean = evaluate(model, test).macro_f1
    level0 = all(points[0][1].macro_f1 == clean for points in curves.curves.values())
    worst_ok = all(points[-1][1].macro_f1 <= clean for points in curves.curves.values())
    curve = "; ".join(f"{kind} " + " ".join(f"{lvl:g}:{r.macro_f1:.3f}" for lvl, r in points)
                      for kind, points in curves.curves.items())
    assert acceptance("robustness", level0 and worst_ok,
                      f"clean {clean:.4f}; level 0 bit-equal: {level0}; max level <= clean: {worst_ok}; {curve}")


def test_cli_determinism(acceptance, tmp_path):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("gen-data", "train", "eval"):
            assert main([cmd, "--out-dir", str(out), "--seed", "7"]) == 0
        outputs.append([(out / name).read_bytes() for name in ("dataset.jsonl", "loss_log.csv", "metrics.csv")])
    same = [a == b for a, b in zip(*outputs)]
    assert acceptance("CLI determinism", all(same),
                      f"dataset / loss log / metrics CSV identical across two runs: {same}")


def test_metric_oracle(acceptance):
    rng = np.random.default_rng(99)
    count_ok, worst = True, 0.0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        n = int(rng.integers(1, 300))
        labels, preds = rng.integers(0, c, n), rng.integers(0, c, n)
        tally = [[0] * c for _ in range(c)]
        for y, p in zip(labels, preds):
            tally[y][p] += 1
        cm = confusion_matrix(preds, labels, c)
        count_ok &= cm.tolist() == tally
        r = compute_metrics(cm)
        for k in range(c):
            tp = tally[k][k]
            col = sum(tally[i][k] for i in range(c))
            row = sum(tally[k])
            p = tp / col if col else 0.0
            rc = tp / row if row else 0.0
            f = 2 * p * rc / (p + rc) if p + rc else 0.0
            worst = max(worst, abs(p - r.precision[k]), abs(rc - r.recall[k]), abs(f - r.f1[k]))
        acc = sum(tally[k][k] for k in range(c)) / n
        worst = max(worst, abs(acc - r.accuracy))
    ok = count_ok and worst <= 1e-12
    assert acceptance("metric oracle", ok,
                      f"100 matrices: counts exact: {count_ok}; max rate deviation {worst:.1e} (<= 1e-12)")
