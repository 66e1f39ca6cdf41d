"""Contextual alignment: text tokens attend over visual regions.

Both modalities are first projected to a shared width ``d`` so that the
cosine similarity between a token and a region is defined.  Functions take
an optional boolean ``mask`` (N_T x N_V) so several posts can be stacked
into one block-diagonal problem; entries outside a post's block get zero
attention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import (ShapeError, Tensor, add, as_tensor, concat_features, matmul,
                        relu, row_normalize, row_softmax, transpose)


@dataclass
class CamTrace:
    z_T: Tensor
    z_V: Tensor
    S: Tensor | None
    A: Tensor | None
    h_V_att: Tensor
    h_C: Tensor


def project_common(h_T, h_V, params) -> tuple[Tensor, Tensor]:
    h_T, h_V = as_tensor(h_T), as_tensor(h_V)
    p_t, p_v = params["cam.P_T"], params["cam.P_V"]
    if h_T.shape[1] != p_t.shape[0]:
        raise ShapeError(f"text features have width {h_T.shape[1]}, projection expects {p_t.shape[0]}")
    if h_V.shape[1] != p_v.shape[0]:
        raise ShapeError(f"visual features have width {h_V.shape[1]}, projection expects {p_v.shape[0]}")
    return matmul(h_T, p_t), matmul(h_V, p_v)


def similarity_matrix(z_T, z_V) -> Tensor:
    """Cosine similarity of every token row with every region row.

    A zero-norm row has similarity 0 with everything.
    """
    z_T, z_V = as_tensor(z_T), as_tensor(z_V)
    if z_T.shape[1] != z_V.shape[1]:
        raise ShapeError(f"similarity needs equal widths, got {z_T.shape} and {z_V.shape}")
    return matmul(row_normalize(z_T), transpose(row_normalize(z_V)))


def attention_weights(S, mask: np.ndarray | None = None) -> Tensor:
    return row_softmax(S, mask)


def attend_visual(A, z_V) -> Tensor:
    A, z_V = as_tensor(A), as_tensor(z_V)
    if A.shape[1] != z_V.shape[0]:
        raise ShapeError(f"attention over {A.shape[1]} regions but {z_V.shape[0]} region rows given")
    return matmul(A, z_V)


def contextual_features(z_T, h_V_att, params) -> Tensor:
    z_T, h_V_att = as_tensor(z_T), as_tensor(h_V_att)
    if z_T.shape != h_V_att.shape:
        raise ShapeError(f"z_T {z_T.shape} and attended visual {h_V_att.shape} must match")
    return relu(add(matmul(concat_features(z_T, h_V_att), params["cam.W_c"]), params["cam.b_c"]))


def cam_forward(h_T, h_V, params, mask: np.ndarray | None = None) -> CamTrace:
    z_T, z_V = project_common(h_T, h_V, params)
    S = similarity_matrix(z_T, z_V)
    A = attention_weights(S, mask)
    h_V_att = attend_visual(A, z_V)
    h_C = contextual_features(z_T, h_V_att, params)
    return CamTrace(z_T, z_V, S, A, h_V_att, h_C)


def mean_visual_forward(h_T, h_V, params, mask: np.ndarray | None = None) -> CamTrace:
    """Ablated path: every token sees the plain mean of its post's regions."""
    z_T, z_V = project_common(h_T, h_V, params)
    if mask is None:
        mask = np.ones((z_T.shape[0], z_V.shape[0]), dtype=bool)
    averaging = mask / mask.sum(axis=1, keepdims=True)
    h_V_att = matmul(Tensor(averaging), z_V)
    h_C = contextual_features(z_T, h_V_att, params)
    return CamTrace(z_T, z_V, None, None, h_V_att, h_C)
