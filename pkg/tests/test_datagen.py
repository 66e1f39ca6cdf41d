import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covla import numkernel as nk
from covla.datagen import (UNK, DatasetSpec, DatasetSpecError, MultimodalPost, TokenLayout,
                           encode_text, encode_vision, generate_dataset, perturb,
                           sinusoidal_positions, split_sizes, visual_prototypes)
from covla.io import post_to_json
from covla.numkernel import Tensor


def _bytes(ds):
    return "\n".join(post_to_json(p) for p in ds.posts)


def test_generation_is_deterministic():
    spec = DatasetSpec(n_samples=100, n_categories=5, seed=7)
    assert _bytes(generate_dataset(spec)) == _bytes(generate_dataset(spec))
    assert _bytes(generate_dataset(spec)) != _bytes(generate_dataset(DatasetSpec(n_samples=100, seed=8)))


def test_splits_are_disjoint_exhaustive_and_sized():
    ds = generate_dataset(DatasetSpec(n_samples=101, seed=1))
    ids = {s: {p.id for p in ds.split(s)} for s in ("train", "val", "test")}
    assert sum(len(v) for v in ids.values()) == 101
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    # floor(15.15) = 15 each, remainder to train
    assert {s: len(v) for s, v in ids.items()} == {"train": 71, "val": 15, "test": 15}
    assert split_sizes(10) == {"train": 8, "val": 1, "test": 1}


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 400), st.integers(0, 1000))
def test_label_balance(c, extra, seed):
    n = 10 * c + extra
    ds = generate_dataset(DatasetSpec(n_samples=n, n_categories=c, seed=seed, tokens_max=5,
                                      regions_max=4, vocab_size=64))
    counts = np.bincount([p.label for p in ds.posts], minlength=c)
    assert counts.max() / counts.min() <= 1.5


def test_nearest_centroid_separates_clean_text():
    spec = DatasetSpec(n_samples=500, ambiguity_rate=0.0, dominance=0.0, conflict_rate=0.0, seed=11)
    ds = generate_dataset(spec)

    def hist(p):
        h = np.bincount(p.tokens, minlength=spec.vocab_size).astype(float)
        return h / h.sum()

    train, test = ds.split("train"), ds.split("test")
    x = np.array([hist(p) for p in train])
    y = np.array([p.label for p in train])
    centroids = np.array([x[y == c].mean(axis=0) for c in range(spec.n_categories)])
    xt = np.array([hist(p) for p in test])
    pred = np.argmin(((xt[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    acc = (pred == np.array([p.label for p in test])).mean()
    assert acc >= 0.95


def test_full_conflict_has_disagreeing_modalities():
    spec = DatasetSpec(n_samples=150, conflict_rate=1.0, noise_sigma=0.0, seed=4)
    ds = generate_dataset(spec)
    layout = TokenLayout.from_spec(spec)
    protos = visual_prototypes(spec)
    for p in ds.posts:
        assert p.conflict and p.label in (p.text_label, p.vision_label)
        support = [layout.classes_consistent_with(t) for t in p.tokens]
        text_classes = set.union(*[s for s in support if s is not None])
        assert text_classes == {p.text_label}
        # with zero noise one region equals its class prototype exactly
        dist = ((p.regions[:, None, :] - protos[None]) ** 2).sum(-1)
        slot, cls = np.unravel_index(np.argmin(dist), dist.shape)
        assert dist[slot, cls] < 1e-20
        assert cls == p.vision_label != p.text_label


def test_ambiguous_text_is_consistent_with_two_labels():
    spec = DatasetSpec(n_samples=120, ambiguity_rate=1.0, conflict_rate=0.0, seed=5)
    ds = generate_dataset(spec)
    layout = TokenLayout.from_spec(spec)
    for p in ds.posts:
        assert p.kind == "ambiguous"
        support = [s for s in (layout.classes_consistent_with(t) for t in p.tokens) if s is not None]
        assert support and all(len(s) == 2 and p.label in s for s in support)
        assert p.vision_label == p.label


def test_every_non_conflict_label_is_recoverable_from_some_modality():
    ds = generate_dataset(DatasetSpec(n_samples=300, seed=9))
    for p in ds.posts:
        if not p.conflict:
            assert p.label in (p.text_label, p.vision_label)


def test_kind_fractions_follow_rates():
    ds = generate_dataset(DatasetSpec(n_samples=1000, ambiguity_rate=0.5, dominance=0.5,
                                      conflict_rate=0.1, seed=2))
    kinds = [p.kind for p in ds.posts]
    assert kinds.count("conflict") == 100
    assert kinds.count("ambiguous") == 500
    assert kinds.count("visual") == 200 and kinds.count("text") == 200


@pytest.mark.parametrize("bad", [
    dict(ambiguity_rate=1.5), dict(conflict_rate=-0.1), dict(n_samples=3, n_categories=5),
    dict(noise_sigma=-1.0), dict(vocab_size=5), dict(tokens_min=0),
])
def test_invalid_spec_rejected(bad):
    with pytest.raises(DatasetSpecError):
        generate_dataset(DatasetSpec(**bad))


def test_empty_modalities_rejected():
    with pytest.raises(ValueError):
        MultimodalPost(id="x", tokens=(), regions=np.zeros((1, 2)), label=0)
    with pytest.raises(ValueError):
        MultimodalPost(id="x", tokens=(1,), regions=np.zeros((0, 2)), label=0)


# -- encoders ----------------------------------------------------------------

def test_encode_text_zero_table_gives_position_offset():
    params = {"enc.embed": Tensor(np.zeros((10, 6)))}
    out = encode_text([4], params).data
    np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]])


def test_encode_text_positions_distinguish_repeats(rng):
    params = {"enc.embed": Tensor(rng.normal(size=(10, 6)))}
    out = encode_text([3, 3], params).data
    assert not np.allclose(out[0], out[1])


def test_encode_text_gradient_counts_occurrences(rng):
    table = rng.normal(size=(6, 3))
    tokens = [1, 4, 1, 0, 1]

    def f(p):
        return nk.sum_all(encode_text(tokens, p))

    # finite-difference oracle: d sum / d table[v, k] = occurrences of v
    res = nk.grad_check(f, {"enc.embed": table})
    assert res.max_rel_error < 1e-8
    grads = nk.backward(f({"enc.embed": Tensor(table, True, "enc.embed")}))["enc.embed"]
    counts = np.bincount(tokens, minlength=6)
    np.testing.assert_array_equal(grads, np.repeat(counts[:, None], 3, axis=1))


def test_encode_text_rejects_unknown_token():
    with pytest.raises(ValueError, match="outside vocabulary"):
        encode_text([0, 10], {"enc.embed": Tensor(np.zeros((10, 4)))})


def test_sinusoidal_positions_shape_and_first_row():
    pe = sinusoidal_positions(5, 4)
    assert pe.shape == (5, 4)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1])


def test_encode_vision_cases(rng):
    regions = np.abs(rng.normal(size=(3, 4)))
    zero = {"enc.vis_W": Tensor(np.zeros((4, 5))), "enc.vis_b": Tensor(np.zeros(5))}
    np.testing.assert_array_equal(encode_vision(regions, zero).data, np.zeros((3, 5)))
    ident = {"enc.vis_W": Tensor(np.eye(4)), "enc.vis_b": Tensor(np.zeros(4))}
    np.testing.assert_array_equal(encode_vision(regions, ident).data, regions)
    with pytest.raises(ValueError):
        encode_vision(np.zeros((3, 3)), zero)


def test_encode_vision_gradcheck(rng):
    regions = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 5)) * 0.5
    target = rng.normal(size=(4, 5))

    def f(p):
        return nk.sum_all(nk.square(nk.sub(encode_vision(regions, p), target)))

    res = nk.grad_check(f, {"enc.vis_W": w, "enc.vis_b": rng.normal(size=5) * 0.1})
    assert res.max_rel_error < 1e-4


# -- perturbations -------------------------------------------------------------

def _post(rng, n_tokens=8, n_regions=3, d=4):
    return MultimodalPost(id="q1", tokens=tuple(rng.integers(1, 20, n_tokens)),
                          regions=rng.normal(size=(n_regions, d)), label=1)


def test_perturb_identity_at_zero(rng):
    p = _post(rng)
    assert perturb(p, "gaussian_visual", 0.0, seed=1) is p
    assert perturb(p, "token_dropout", 0.0, seed=1) is p


def test_perturb_dropout_near_one_keeps_length(rng):
    p = _post(rng, n_tokens=200)
    q = perturb(p, "token_dropout", 0.999, seed=3)
    assert len(q.tokens) == 200
    assert sum(t == UNK for t in q.tokens) >= 195


def test_perturb_gaussian_variance():
    p = MultimodalPost(id="z", tokens=(1,), regions=np.zeros((100, 100)), label=0)
    noisy = perturb(p, "gaussian_visual", 1.0, seed=5).regions
    assert abs(noisy.var() - 1.0) < 0.05


def test_perturb_is_seeded(rng):
    p = _post(rng)
    original = p.regions.copy()
    a = perturb(p, "gaussian_visual", 0.7, seed=2)
    b = perturb(p, "gaussian_visual", 0.7, seed=2)
    c = perturb(p, "gaussian_visual", 0.7, seed=3)
    np.testing.assert_array_equal(a.regions, b.regions)
    assert not np.array_equal(a.regions, c.regions)
    np.testing.assert_array_equal(p.regions, original)


def test_perturb_rejects_bad_levels(rng):
    p = _post(rng)
    with pytest.raises(ValueError):
        perturb(p, "token_dropout", 1.0, seed=0)
    with pytest.raises(ValueError):
        perturb(p, "gaussian_visual", -1.0, seed=0)
    with pytest.raises(ValueError):
        perturb(p, "blur", 0.5, seed=0)
