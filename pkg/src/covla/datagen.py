"""Synthetic multimodal posts and the shallow encoders that stand in for a
frozen vision-language backbone.

Each post is a token sequence plus a handful of raw visual region
descriptors.  A post is one of four kinds:

``text``      class-specific tokens, visual regions are pure clutter
``visual``    filler tokens only, one region carries the class prototype
``ambiguous`` tokens from a pool shared by two neighbouring classes, one
              region carries the true class prototype
``conflict``  class-specific tokens of one class, a region carrying the
              prototype of a different class; the label is one of the two
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from .numkernel import Tensor, add, gather_rows, matmul, relu
from .rng import generator

UNK = 0
DEFAULT_CATEGORIES = ("home", "office", "café", "gym", "park")
SPLIT_FRACTIONS = {"val": 0.15, "test": 0.15}

# Raw-descriptor geometry: informative regions sit at SIGNAL_SCALE * (shared
# "object" direction + class direction); clutter is isotropic N(0, CLUTTER_SIGMA).
SIGNAL_SCALE = 2.5
CLUTTER_SIGMA = 1.0
INFORMATIVE_TOKEN_RATE = 0.6


class DatasetSpecError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 2000
    n_categories: int = 5
    vocab_size: int = 64
    d_raw: int = 16
    tokens_min: int = 4
    tokens_max: int = 12
    regions_min: int = 3
    regions_max: int = 8
    ambiguity_rate: float = 0.5
    dominance: float = 0.5
    conflict_rate: float = 0.1
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for rate in ("ambiguity_rate", "dominance", "conflict_rate"):
            v = getattr(self, rate)
            if not 0.0 <= v <= 1.0:
                raise DatasetSpecError(f"{rate} must lie in [0, 1], got {v}")
        if self.n_categories < 2:
            raise DatasetSpecError("n_categories must be >= 2")
        if self.n_samples < self.n_categories:
            raise DatasetSpecError("n_samples must be >= n_categories")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise DatasetSpecError("need 1 <= tokens_min <= tokens_max")
        if not 1 <= self.regions_min <= self.regions_max:
            raise DatasetSpecError("need 1 <= regions_min <= regions_max")
        if self.d_raw < 1:
            raise DatasetSpecError("d_raw must be >= 1")
        if self.noise_sigma < 0:
            raise DatasetSpecError("noise_sigma must be >= 0")
        if self.vocab_size < 2 + 2 * self.n_categories:
            raise DatasetSpecError(
                f"vocab_size must be >= {2 + 2 * self.n_categories} for "
                f"{self.n_categories} categories")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenLayout:
    """How the vocabulary is carved into filler, class and shared pools.

    Shared pool ``p`` is consistent with classes ``p`` and ``(p + 1) % C``.
    """
    filler: tuple[int, ...]
    class_pools: tuple[tuple[int, ...], ...]
    shared_pools: tuple[tuple[int, ...], ...]

    @classmethod
    def from_spec(cls, spec: DatasetSpec) -> "TokenLayout":
        c = spec.n_categories
        usable = spec.vocab_size - 1
        n_filler = max(1, usable // 8)
        k = (usable - n_filler) // (2 * c)
        ids = iter(range(1, spec.vocab_size))
        filler = tuple(next(ids) for _ in range(n_filler))
        class_pools = tuple(tuple(next(ids) for _ in range(k)) for _ in range(c))
        shared = tuple(tuple(next(ids) for _ in range(k)) for _ in range(c))
        return cls(filler, class_pools, shared)

    def classes_consistent_with(self, token: int) -> set[int] | None:
        """Labels a token supports; None for filler/UNK (supports everything)."""
        c = len(self.class_pools)
        for label, pool in enumerate(self.class_pools):
            if token in pool:
                return {label}
        for p, pool in enumerate(self.shared_pools):
            if token in pool:
                return {p, (p + 1) % c}
        return None


@dataclass
class MultimodalPost:
    id: str
    tokens: tuple[int, ...]
    regions: np.ndarray
    label: int
    split: str = "train"
    kind: str = "text"
    text_label: int | None = None
    vision_label: int | None = None

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if len(self.tokens) < 1:
            raise ValueError(f"post {self.id}: empty token sequence")
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ValueError(f"post {self.id}: regions must be a non-empty N_V x d_raw array")

    @property
    def conflict(self) -> bool:
        return self.kind == "conflict"


@dataclass
class Dataset:
    spec: DatasetSpec
    posts: list[MultimodalPost]
    categories: tuple[str, ...] = field(default=DEFAULT_CATEGORIES)

    def split(self, name: str) -> list[MultimodalPost]:
        return [p for p in self.posts if p.split == name]

    @cached_property
    def layout(self) -> TokenLayout:
        return TokenLayout.from_spec(self.spec)

    def validate(self) -> None:
        c = self.spec.n_categories
        for p in self.posts:
            if not 0 <= p.label < c:
                raise ValueError(f"post {p.id}: label {p.label} outside [0, {c})")
            if any(t < 0 or t >= self.spec.vocab_size for t in p.tokens):
                raise ValueError(f"post {p.id}: token id outside vocabulary")
            if p.regions.shape[1] != self.spec.d_raw:
                raise ValueError(f"post {p.id}: region dimension {p.regions.shape[1]} != {self.spec.d_raw}")


def category_names(n: int) -> tuple[str, ...]:
    if n <= len(DEFAULT_CATEGORIES):
        return DEFAULT_CATEGORIES[:n]
    return DEFAULT_CATEGORIES + tuple(f"category_{i}" for i in range(len(DEFAULT_CATEGORIES), n))


def visual_prototypes(spec: DatasetSpec) -> np.ndarray:
    """Class prototypes (C x d_raw) sharing a common 'object' direction."""
    rng = generator(spec.seed, "datagen", "prototypes")
    c, d = spec.n_categories, spec.d_raw
    raw = rng.standard_normal((d, c + 1))
    if d >= c + 1:
        basis = np.linalg.qr(raw)[0].T
    else:
        basis = (raw / np.linalg.norm(raw, axis=0)).T
    common, directions = basis[0], basis[1:]
    return SIGNAL_SCALE * (common + directions)


def split_sizes(n: int) -> dict[str, int]:
    n_val = int(np.floor(n * SPLIT_FRACTIONS["val"]))
    n_test = int(np.floor(n * SPLIT_FRACTIONS["test"]))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def _kind_counts(spec: DatasetSpec) -> dict[str, int]:
    n = spec.n_samples
    n_conflict = int(round(spec.conflict_rate * n))
    n_amb = min(int(round(spec.ambiguity_rate * n)), n - n_conflict)
    rest = n - n_conflict - n_amb
    n_visual = int(round(spec.dominance * rest))
    return {"conflict": n_conflict, "ambiguous": n_amb,
            "visual": n_visual, "text": rest - n_visual}


def _tokens(rng, n_tokens: int, pool: tuple[int, ...] | None, filler: tuple[int, ...]) -> list[int]:
    if pool is None:
        return [int(t) for t in rng.choice(filler, size=n_tokens)]
    informative = rng.random(n_tokens) < INFORMATIVE_TOKEN_RATE
    if not informative.any():
        informative[rng.integers(n_tokens)] = True
    return [int(rng.choice(pool)) if inf else int(rng.choice(filler)) for inf in informative]


def _regions(rng, n_regions: int, d_raw: int, prototype: np.ndarray | None,
             noise_sigma: float) -> np.ndarray:
    regions = CLUTTER_SIGMA * rng.standard_normal((n_regions, d_raw))
    if prototype is not None:
        slot = rng.integers(n_regions)
        regions[slot] = prototype + noise_sigma * rng.standard_normal(d_raw)
    return regions


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Draw ``spec.n_samples`` posts with balanced labels and 70/15/15 splits."""
    spec.validate()
    n, c = spec.n_samples, spec.n_categories
    layout = TokenLayout.from_spec(spec)
    protos = visual_prototypes(spec)
    rng = generator(spec.seed, "datagen", "posts")

    labels = rng.permutation(np.arange(n) % c)
    kinds = rng.permutation(np.concatenate(
        [[k] * m for k, m in _kind_counts(spec).items()]))
    sizes = split_sizes(n)
    split_names = np.array(["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"])
    splits = rng.permutation(split_names)

    posts = []
    for i in range(n):
        y, kind = int(labels[i]), str(kinds[i])
        n_tokens = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        n_regions = int(rng.integers(spec.regions_min, spec.regions_max + 1))
        text_label = vision_label = None
        if kind == "text":
            pool, text_label, proto = layout.class_pools[y], y, None
        elif kind == "visual":
            pool, vision_label, proto = None, y, protos[y]
        elif kind == "ambiguous":
            shared = y if rng.random() < 0.5 else (y - 1) % c
            pool, vision_label, proto = layout.shared_pools[shared], y, protos[y]
        else:
            other = int((y + rng.integers(1, c)) % c)
            text_label, vision_label = (y, other) if rng.random() < 0.5 else (other, y)
            pool, proto = layout.class_pools[text_label], protos[vision_label]
        tokens = _tokens(rng, n_tokens, pool, layout.filler)
        regions = _regions(rng, n_regions, spec.d_raw, proto, spec.noise_sigma)
        posts.append(MultimodalPost(
            id=f"p{i:06d}", tokens=tuple(tokens), regions=regions, label=y,
            split=str(splits[i]), kind=kind, text_label=text_label, vision_label=vision_label))
    return Dataset(spec=spec, posts=posts, categories=category_names(c))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def encode_text(tokens, params, positions=None) -> Tensor:
    """Embedding lookup plus fixed sinusoidal offsets: N_T x d_T.

    ``positions`` lets a batch of concatenated sequences restart at 0 per post.
    """
    embed = params["enc.embed"]
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab = embed.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        bad = tokens[(tokens < 0) | (tokens >= vocab)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab}")
    if positions is None:
        positions = np.arange(len(tokens))
    positions = np.asarray(positions, dtype=np.int64)
    table = sinusoidal_positions(int(positions.max()) + 1, embed.shape[1])
    return add(gather_rows(embed, tokens), table[positions])


def encode_vision(regions, params) -> Tensor:
    """relu(regions W + b): N_V x d_V."""
    w, b = params["enc.vis_W"], params["enc.vis_b"]
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim != 2 or regions.shape[1] != w.shape[0]:
        raise ValueError(f"region descriptors of shape {regions.shape} do not match d_raw={w.shape[0]}")
    return relu(add(matmul(regions, w), b))


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def perturb(post: MultimodalPost, kind: str, level: float, seed: int) -> MultimodalPost:
    """Gaussian noise on raw regions (``gaussian_visual``, level=sigma) or
    independent UNK replacement of tokens (``token_dropout``, level=p)."""
    if kind == "gaussian_visual":
        if level < 0:
            raise ValueError("sigma must be >= 0")
        if level == 0:
            return post
        rng = generator(seed, "perturb", kind, post.id)
        noisy = post.regions + level * rng.standard_normal(post.regions.shape)
        return replace(post, regions=noisy)
    if kind == "token_dropout":
        if not 0 <= level < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        if level == 0:
            return post
        rng = generator(seed, "perturb", kind, post.id)
        drop = rng.random(len(post.tokens)) < level
        return replace(post, tokens=tuple(UNK if d else t for t, d in zip(post.tokens, drop)))
    raise ValueError(f"unknown perturbation kind {kind!r}")
