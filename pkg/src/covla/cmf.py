"""Gated cross-modal fusion and the softmax classification head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import (ShapeError, Tensor, add, as_tensor, matmul, mul, reshape, row_softmax,
                        sigmoid)


@dataclass
class FusionTrace:
    alpha_T: Tensor
    alpha_V: Tensor
    h_F: Tensor
    pooled: Tensor
    probs: Tensor


def modality_gates(h_C, params) -> tuple[Tensor, Tensor]:
    """One sigmoid gate per token for each modality, both N_T x 1."""
    h_C = as_tensor(h_C)
    w_t, w_v = params["cmf.W_T"], params["cmf.W_V"]
    if h_C.shape[1] != w_t.shape[0]:
        raise ShapeError(f"h_C width {h_C.shape[1]} != gate input width {w_t.shape[0]}")
    return sigmoid(matmul(h_C, w_t)), sigmoid(matmul(h_C, w_v))


def constant_gates(n_tokens: int, value: float = 0.5) -> tuple[Tensor, Tensor]:
    g = np.full((n_tokens, 1), value)
    return Tensor(g), Tensor(g)


def fuse(alpha_T, alpha_V, z_T, h_V_att) -> Tensor:
    alpha_T, alpha_V = as_tensor(alpha_T), as_tensor(alpha_V)
    z_T, h_V_att = as_tensor(z_T), as_tensor(h_V_att)
    if z_T.shape != h_V_att.shape:
        raise ShapeError(f"z_T {z_T.shape} and attended visual {h_V_att.shape} must match")
    n = z_T.shape[0]
    if alpha_T.shape != (n, 1) or alpha_V.shape != (n, 1):
        raise ShapeError(f"gates must be ({n}, 1), got {alpha_T.shape} and {alpha_V.shape}")
    return add(mul(z_T, alpha_T), mul(h_V_att, alpha_V))


def segment_mean_matrix(lengths) -> np.ndarray:
    """(B x sum(lengths)) matrix whose product with stacked rows averages each segment."""
    lengths = np.asarray(lengths, dtype=np.int64)
    out = np.zeros((len(lengths), int(lengths.sum())))
    start = 0
    for b, n in enumerate(lengths):
        out[b, start:start + n] = 1.0 / n
        start += n
    return out


def pool(h_F, lengths=None) -> Tensor:
    """Mean over token rows.  With ``lengths`` the rows are split into posts
    and the result is B x d; without, a single post gives a 1 x d row."""
    h_F = as_tensor(h_F)
    if h_F.shape[0] < 1:
        raise ShapeError("cannot pool zero rows")
    if lengths is None:
        lengths = [h_F.shape[0]]
    return matmul(Tensor(segment_mean_matrix(lengths)), h_F)


def classify(pooled, params) -> Tensor:
    """softmax(pooled W_F + b_F), one distribution per pooled row."""
    pooled = as_tensor(pooled)
    if pooled.data.ndim == 1:
        pooled = reshape(pooled, (1, -1))
    return row_softmax(add(matmul(pooled, params["cmf.W_F"]), params["cmf.b_F"]))


def predict_label(probs) -> int | np.ndarray:
    """Argmax with ties going to the lowest index; vectorised over rows."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)
