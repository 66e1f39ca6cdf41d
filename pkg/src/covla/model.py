"""Parameter container, ablation variants and the end-to-end forward pass.

A batch of posts is stacked into one graph: token rows of all posts are
concatenated, region rows likewise, and a block-diagonal mask keeps each
token's attention inside its own post.  The result is identical (to
rounding) to running the posts one at a time.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import cam, cmf
from .datagen import MultimodalPost, encode_text, encode_vision
from .numkernel import Tensor
from .rng import generator

VARIANTS = ("full", "no_cam", "no_cmf")
ENCODER_PARAMS = ("enc.embed", "enc.vis_W", "enc.vis_b")


@dataclass(frozen=True)
class Dims:
    vocab_size: int = 64
    d_raw: int = 16
    d_T: int = 32
    d_V: int = 24
    d: int = 32
    d_c: int = 32
    n_categories: int = 5

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"dimension {k} must be >= 1, got {v}")
        if self.n_categories < 2:
            raise ValueError("n_categories must be >= 2")


def param_shapes(variant: str, dims: Dims) -> dict[str, tuple[int, ...]]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    shapes = {
        "enc.embed": (dims.vocab_size, dims.d_T),
        "enc.vis_W": (dims.d_raw, dims.d_V),
        "enc.vis_b": (dims.d_V,),
        "cam.P_T": (dims.d_T, dims.d),
        "cam.P_V": (dims.d_V, dims.d),
        "cam.W_c": (2 * dims.d, dims.d_c),
        "cam.b_c": (dims.d_c,),
        "cmf.W_T": (dims.d_c, 1),
        "cmf.W_V": (dims.d_c, 1),
        "cmf.W_F": (dims.d, dims.n_categories),
        "cmf.b_F": (dims.n_categories,),
    }
    if variant == "no_cmf":
        del shapes["cmf.W_T"], shapes["cmf.W_V"]
    return shapes


@dataclass
class ModelParams:
    variant: str
    dims: Dims
    seed: int
    params: dict[str, np.ndarray]
    frozen: frozenset[str] = field(default_factory=frozenset)

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.dims, self.seed,
                           {k: v.copy() for k, v in self.params.items()}, self.frozen)

    def tensors(self, track: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=track and k not in self.frozen, name=k)
                for k, v in self.params.items()}

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def equals(self, other: "ModelParams") -> bool:
        return (self.variant == other.variant and self.params.keys() == other.params.keys()
                and all(np.array_equal(v, other.params[k]) for k, v in self.params.items()))


def build_model(variant: str, dims: Dims, seed: int, freeze_encoders: bool = False) -> ModelParams:
    """Glorot-uniform weights, zero biases.  Each tensor has its own seeded
    stream, so parameters shared between variants start out identical."""
    dims.validate()
    params = {}
    for name, shape in param_shapes(variant, dims).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        params[name] = generator(seed, "init", name).uniform(-bound, bound, size=shape)
    frozen = frozenset(ENCODER_PARAMS) if freeze_encoders else frozenset()
    return ModelParams(variant, dims, seed, params, frozen)


@dataclass
class Batch:
    ids: list[str]
    tokens: np.ndarray
    positions: np.ndarray
    regions: np.ndarray
    text_lengths: np.ndarray
    region_lengths: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_posts(cls, posts: Sequence[MultimodalPost]) -> "Batch":
        if not posts:
            raise ValueError("cannot build an empty batch")
        return cls(
            ids=[p.id for p in posts],
            tokens=np.concatenate([np.asarray(p.tokens, dtype=np.int64) for p in posts]),
            positions=np.concatenate([np.arange(len(p.tokens)) for p in posts]),
            regions=np.concatenate([p.regions for p in posts], axis=0),
            text_lengths=np.array([len(p.tokens) for p in posts]),
            region_lengths=np.array([p.regions.shape[0] for p in posts]),
            labels=np.array([p.label for p in posts], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def mask(self) -> np.ndarray:
        t_seg = np.repeat(np.arange(len(self)), self.text_lengths)
        v_seg = np.repeat(np.arange(len(self)), self.region_lengths)
        return t_seg[:, None] == v_seg[None, :]

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([[0], np.cumsum(self.text_lengths)]),
                np.concatenate([[0], np.cumsum(self.region_lengths)]))


@dataclass
class ForwardTrace:
    batch: Batch
    h_T: Tensor
    h_V: Tensor
    cam: cam.CamTrace
    fusion: cmf.FusionTrace

    @property
    def probs(self) -> Tensor:
        return self.fusion.probs

    @property
    def pooled(self) -> Tensor:
        return self.fusion.pooled

    def sample(self, i: int) -> dict[str, np.ndarray]:
        """Intermediates of the i-th post with the batch padding stripped."""
        t_off, v_off = self.batch.offsets()
        ts, te = t_off[i], t_off[i + 1]
        vs, ve = v_off[i], v_off[i + 1]
        out = {
            "h_T": self.h_T.data[ts:te], "h_V": self.h_V.data[vs:ve],
            "z_T": self.cam.z_T.data[ts:te], "z_V": self.cam.z_V.data[vs:ve],
            "h_V_att": self.cam.h_V_att.data[ts:te], "h_C": self.cam.h_C.data[ts:te],
            "alpha_T": self.fusion.alpha_T.data[ts:te], "alpha_V": self.fusion.alpha_V.data[ts:te],
            "h_F": self.fusion.h_F.data[ts:te], "pooled": self.fusion.pooled.data[i],
            "probs": self.fusion.probs.data[i],
        }
        if self.cam.S is not None:
            out["S"] = self.cam.S.data[ts:te, vs:ve]
            out["A"] = self.cam.A.data[ts:te, vs:ve]
        return out


def forward(model: ModelParams, posts, tensors: dict[str, Tensor] | None = None) -> ForwardTrace:
    """Run encoders, CAM, CMF and the classifier on a batch of posts."""
    batch = posts if isinstance(posts, Batch) else Batch.from_posts(posts)
    if tensors is None:
        tensors = model.tensors(track=False)
    h_T = encode_text(batch.tokens, tensors, batch.positions)
    h_V = encode_vision(batch.regions, tensors)
    mask = batch.mask()
    if model.variant == "no_cam":
        cam_trace = cam.mean_visual_forward(h_T, h_V, tensors, mask)
    else:
        cam_trace = cam.cam_forward(h_T, h_V, tensors, mask)
    if model.variant == "no_cmf":
        alpha_T, alpha_V = cmf.constant_gates(h_T.shape[0], 0.5)
    else:
        alpha_T, alpha_V = cmf.modality_gates(cam_trace.h_C, tensors)
    h_F = cmf.fuse(alpha_T, alpha_V, cam_trace.z_T, cam_trace.h_V_att)
    pooled = cmf.pool(h_F, batch.text_lengths)
    probs = cmf.classify(pooled, tensors)
    return ForwardTrace(batch, h_T, h_V, cam_trace,
                        cmf.FusionTrace(alpha_T, alpha_V, h_F, pooled, probs))


def predict(model: ModelParams, posts: Sequence[MultimodalPost],
            batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and class distributions, in input order."""
    preds, probs = [], []
    for start in range(0, len(posts), batch_size):
        trace = forward(model, posts[start:start + batch_size])
        probs.append(trace.probs.data)
        preds.append(cmf.predict_label(trace.probs))
    return np.concatenate(preds), np.concatenate(probs, axis=0)
