"""Test-set evaluation, ablations, robustness curves, timing and error analysis."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datagen import Dataset, MultimodalPost, perturb
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .model import VARIANTS, Dims, ModelParams, build_model, forward, predict
from .training import TrainConfig, train

log = logging.getLogger(__name__)

PERTURBATIONS = ("gaussian_visual", "token_dropout")


def eval_threads() -> int:
    """Worker cap from COVLA_THREADS; 0 or unset means sequential."""
    raw = os.environ.get("COVLA_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        raise ValueError(f"COVLA_THREADS must be an integer, got {raw!r}") from None


def predict_posts(model: ModelParams, posts: Sequence[MultimodalPost], chunk: int = 128,
                  threads: int | None = None) -> np.ndarray:
    threads = eval_threads() if threads is None else threads
    if threads <= 1 or len(posts) <= chunk:
        return predict(model, posts, chunk)[0]
    chunks = [posts[i:i + chunk] for i in range(0, len(posts), chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map preserves input order, so the reduction is worker-count independent
        parts = list(pool.map(lambda c: predict(model, c, chunk)[0], chunks))
    return np.concatenate(parts)


def evaluate(model: ModelParams, posts: Sequence[MultimodalPost], threads: int | None = None) -> MetricsReport:
    if not posts:
        raise ValueError("cannot evaluate an empty split")
    preds = predict_posts(model, posts, threads=threads)
    labels = [p.label for p in posts]
    return compute_metrics(confusion_matrix(preds, labels, model.dims.n_categories))


def error_analysis(model: ModelParams, posts: Sequence[MultimodalPost], chunk: int = 128) -> dict:
    """Misclassified conflict posts with their mean modality gates, plus error
    rates split by whether the generator planted a text/vision conflict."""
    rows, wrong = [], {True: 0, False: 0}
    total = {True: 0, False: 0}
    for start in range(0, len(posts), chunk):
        trace = forward(model, posts[start:start + chunk])
        preds = np.argmax(trace.probs.data, axis=1)
        for i in range(len(trace.batch)):
            p = posts[start + i]
            miss = int(preds[i]) != p.label
            total[p.conflict] += 1
            wrong[p.conflict] += miss
            if miss and p.conflict:
                s = trace.sample(i)
                rows.append({
                    "id": p.id, "label": p.label, "predicted": int(preds[i]),
                    "text_label": p.text_label, "vision_label": p.vision_label,
                    "alpha_T_mean": float(s["alpha_T"].mean()),
                    "alpha_V_mean": float(s["alpha_V"].mean()),
                })

    def rate(flag):
        return wrong[flag] / total[flag] if total[flag] else 0.0

    return {
        "conflict_error_rate": rate(True), "clean_error_rate": rate(False),
        "n_conflict": total[True], "n_clean": total[False],
        "misclassified_conflict": rows,
    }


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass
class AblationTable:
    seeds: list[int]
    per_seed: dict[str, list[MetricsReport]]
    train_logs: dict[str, list] = field(default_factory=dict)

    def summary(self, variant: str) -> dict:
        out = {"variant": variant, "n_seeds": len(self.seeds)}
        for m in METRIC_FIELDS:
            vals = np.array([getattr(r, m) for r in self.per_seed[variant]])
            out[f"{m}_mean"] = float(vals.mean())
            out[f"{m}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return out

    def rows(self) -> list[dict]:
        return [self.summary(v) for v in self.per_seed]

    def orderings(self) -> dict[str, bool]:
        means = {v: self.summary(v)["macro_f1_mean"] for v in self.per_seed}
        names = list(means)
        return {f"{a}>{b}": means[a] > means[b] for a in names for b in names if a != b}


def ablation_suite(dataset: Dataset, dims: Dims, seeds: Sequence[int],
                   config: TrainConfig | None = None,
                   variants: Sequence[str] = VARIANTS) -> AblationTable:
    """Train every variant once per seed with otherwise identical settings and
    score each on the test split."""
    if not seeds:
        raise ValueError("need at least one seed")
    if len(seeds) < 3:
        log.warning("ablation with %d seed(s); at least 3 are recommended", len(seeds))
    config = config or TrainConfig()
    test = dataset.split("test")
    per_seed = {v: [] for v in variants}
    logs = {v: [] for v in variants}
    for seed in seeds:
        for variant in variants:
            model = build_model(variant, dims, seed, freeze_encoders=config.freeze_encoders)
            trained, history = train(model, dataset, replace(config, seed=seed))
            report = evaluate(trained, test)
            per_seed[variant].append(report)
            logs[variant].append(history)
            log.info("seed %d %s test macro-F1 %.4f", seed, variant, report.macro_f1)
    return AblationTable(list(seeds), per_seed, logs)


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------

@dataclass
class RobustnessCurves:
    clean: MetricsReport
    curves: dict[str, list[tuple[float, MetricsReport]]]

    def rows(self) -> list[dict]:
        return [{"perturbation": kind, "level": float(level), "accuracy": r.accuracy,
                 "macro_f1": r.macro_f1}
                for kind, points in self.curves.items() for level, r in points]


def robustness_sweep(model: ModelParams, posts: Sequence[MultimodalPost], sigmas: Sequence[float],
                     drop_probs: Sequence[float], seed: int) -> RobustnessCurves:
    if 0 not in sigmas or 0 not in drop_probs:
        raise ValueError("perturbation level lists must include 0")
    clean = evaluate(model, posts)
    curves = {}
    for kind, levels in zip(PERTURBATIONS, (sigmas, drop_probs)):
        points = []
        for level in levels:
            noisy = [perturb(p, kind, float(level), seed) for p in posts]
            points.append((float(level), evaluate(model, noisy)))
        curves[kind] = points
    return RobustnessCurves(clean, curves)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def flop_estimate(dims: Dims, n_tokens: int, n_regions: int, variant: str = "full") -> int:
    """Approximate floating-point operations for one post's forward pass."""
    t, v, d, dc, c = n_tokens, n_regions, dims.d, dims.d_c, dims.n_categories
    flops = t * dims.d_T                                  # positional offsets
    flops += 2 * v * dims.d_raw * dims.d_V + 2 * v * dims.d_V   # vision affine + relu
    flops += 2 * t * dims.d_T * d + 2 * v * dims.d_V * d        # projections
    if variant == "no_cam":
        flops += 2 * t * v * d
    else:
        flops += 3 * (t + v) * d                          # row norms
        flops += 2 * t * v * d                            # similarities
        flops += 4 * t * v                                # softmax
        flops += 2 * t * v * d                            # attended visual
    flops += 2 * t * 2 * d * dc + 2 * t * dc              # contextual layer
    if variant != "no_cmf":
        flops += 2 * 2 * t * dc + 2 * 4 * t               # gates
    flops += 3 * t * d + t * d                            # fuse + pool
    flops += 2 * d * c + 4 * c                            # classifier
    return int(flops)


def timing_report(model: ModelParams, posts: Sequence[MultimodalPost], repetitions: int = 3,
                  train_time_s: float | None = None) -> dict:
    """Mean wall-clock inference time per post, one post per forward pass."""
    if not posts:
        raise ValueError("cannot time an empty split")
    repetitions = max(3, int(repetitions))
    per_rep = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for p in posts:
            forward(model, [p])
        per_rep.append((time.perf_counter() - start) / len(posts))
    per_rep = np.array(per_rep) * 1e3
    flops = [flop_estimate(model.dims, len(p.tokens), p.regions.shape[0], model.variant) for p in posts]
    return {
        "variant": model.variant, "n_samples": len(posts), "repetitions": repetitions,
        "ms_per_sample_mean": float(per_rep.mean()), "ms_per_sample_sd": float(per_rep.std(ddof=1)),
        "flops_per_sample_mean": float(np.mean(flops)), "train_time_s": train_time_s,
    }
