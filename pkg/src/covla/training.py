"""Cross-entropy plus feature-distillation objective and the SGD loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .datagen import Dataset, MultimodalPost
from .metrics import compute_metrics, confusion_matrix
from .model import Batch, Dims, ModelParams, build_model, forward, predict  # noqa: F401  (re-export)
from .numkernel import (GradCheckResult, Tensor, add, as_tensor, backward, grad_check, log, mean_all,
                        mul, pick, square, sub, sum_all)
from .rng import generator

log_ = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    freeze_encoders: bool = False

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    ce: float
    kd: float
    val_macro_f1: float


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-probability of the true class (probabilities floored)."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label outside [0, {probs.shape[1]})")
    return mul(mean_all(log(pick(probs, labels), PROB_FLOOR)), -1.0)


def kd_loss(pooled, reference) -> Tensor:
    """Squared distance to the reference features, averaged over the batch."""
    pooled, reference = as_tensor(pooled), as_tensor(reference)
    if pooled.shape != reference.shape:
        raise ValueError(f"feature shape {pooled.shape} != reference shape {reference.shape}")
    return mul(sum_all(square(sub(pooled, reference))), 1.0 / pooled.shape[0])


def total_loss(ce, kd, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return add(ce, mul(kd, float(lam)))


class KdReference:
    """Frozen copy of a model; supplies the pooled fused features to anchor to."""

    def __init__(self, model: ModelParams):
        snap = model.copy()
        for arr in snap.params.values():
            arr.flags.writeable = False
        self.model = snap
        self._cache: dict[str, np.ndarray] = {}

    def features(self, posts: Sequence[MultimodalPost]) -> np.ndarray:
        missing = [p for p in posts if p.id not in self._cache]
        if missing:
            for start in range(0, len(missing), 256):
                chunk = missing[start:start + 256]
                pooled = forward(self.model, chunk).pooled.data
                for p, row in zip(chunk, pooled):
                    self._cache[p.id] = row
        return np.stack([self._cache[p.id] for p in posts])


def snapshot_reference(model: ModelParams) -> KdReference:
    return KdReference(model)


def sgd_step(model: ModelParams, gradients: dict[str, np.ndarray], lr: float) -> ModelParams:
    """theta <- theta - lr * grad for trainable tensors; returns a new model."""
    unknown = set(gradients) - set(model.params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    new = {}
    for name, value in model.params.items():
        g = gradients.get(name)
        if g is None or name in model.frozen:
            new[name] = value
            continue
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {value.shape}")
        new[name] = value - lr * g
    return ModelParams(model.variant, model.dims, model.seed, new, model.frozen)


def batch_objective(model: ModelParams, posts: Sequence[MultimodalPost], reference: np.ndarray,
                    lam: float, tensors: dict[str, Tensor] | None = None):
    """(total, ce, kd) tensors for one batch."""
    trace = forward(model, posts, tensors if tensors is not None else model.tensors())
    ce = cross_entropy(trace.probs, trace.batch.labels)
    kd = kd_loss(trace.pooled, reference)
    return total_loss(ce, kd, lam), ce, kd


def macro_f1(model: ModelParams, posts: Sequence[MultimodalPost]) -> float:
    preds, _ = predict(model, posts)
    labels = [p.label for p in posts]
    return compute_metrics(confusion_matrix(preds, labels, model.dims.n_categories)).macro_f1


def train(model: ModelParams, dataset: Dataset, config: TrainConfig):
    """Mini-batch SGD on the train split; keeps the best-validation epoch.

    Returns ``(best_model, log)`` where ``log`` holds one EpochRecord per
    epoch with sample-weighted mean losses.
    """
    config.validate()
    train_posts, val_posts = dataset.split("train"), dataset.split("val")
    if not train_posts or not val_posts:
        raise ValueError("training needs non-empty train and val splits")
    reference = snapshot_reference(model)
    best, best_f1 = model, -1.0
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = generator(config.seed, "shuffle", epoch).permutation(len(train_posts))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            posts = [train_posts[i] for i in order[start:start + config.batch_size]]
            tensors = model.tensors()
            total, ce, kd = batch_objective(model, posts, reference.features(posts), config.lam, tensors)
            grads = backward(total)
            model = sgd_step(model, grads, config.learning_rate)
            sums += len(posts) * np.array([float(total.data), float(ce.data), float(kd.data)])
        means = sums / len(train_posts)
        val_f1 = macro_f1(model, val_posts)
        history.append(EpochRecord(epoch, *map(float, means), val_f1))
        log_.info("epoch %d total=%.4f ce=%.4f kd=%.4f val_f1=%.4f", epoch, *means, val_f1)
        if val_f1 > best_f1:
            best, best_f1 = model, val_f1
    return best, history


def log_rows(history: Sequence[EpochRecord]) -> list[dict]:
    return [asdict(r) for r in history]


def check_gradients(dims: Dims, seed: int, variant: str = "full", n_tokens: int = 3,
                    n_regions: int = 4, n_posts: int = 2, lam: float = 0.5,
                    eps: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full objective (CE + lam * KD) on random
    posts, random KD targets and randomised biases, over every parameter."""
    rng = generator(seed, "gradcheck")
    model = build_model(variant, dims, seed)
    params = {k: v + 0.1 * rng.standard_normal(v.shape) if v.ndim == 1 else v
              for k, v in model.params.items()}
    posts = [MultimodalPost(id=f"g{i}", tokens=rng.integers(0, dims.vocab_size, n_tokens),
                            regions=rng.standard_normal((n_regions, dims.d_raw)),
                            label=int(rng.integers(dims.n_categories)))
             for i in range(n_posts)]
    reference = 0.5 * rng.standard_normal((n_posts, dims.d))

    def objective(tensors):
        return batch_objective(model, posts, reference, lam, tensors)[0]

    return grad_check(objective, params, eps)
