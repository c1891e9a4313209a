import itertools

import numpy as np
import pytest

from dqmil import numerics as nx
from dqmil.dme import DynamicMetaEmbedder, SourceSpec, check_sources
from dqmil.errors import AlignmentError, SchemaError

from conftest import numeric_grad, rel_error


def _sources(n, widths, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, w)) for w in widths]


def test_identity_projection_returns_input():
    emb = DynamicMetaEmbedder([SourceSpec("a", 5, 5)], nx.make_rng(0))
    emb.projections[0].weight.data = np.eye(5)
    src = _sources(4, [5])
    np.testing.assert_array_equal(emb.fuse(src).data, src[0])


def test_three_source_shape():
    specs = [SourceSpec("a", 8, 4), SourceSpec("b", 8, 4), SourceSpec("c", 6, 4)]
    emb = DynamicMetaEmbedder(specs, nx.make_rng(0))
    assert emb.fuse(_sources(5, [8, 8, 6])).shape == (5, 12)
    assert emb.out_width == 12


@pytest.mark.parametrize("n", [1, 3, 50])
def test_width_independent_of_n(n):
    specs = [SourceSpec("a", 3, 7), SourceSpec("b", 2, 5)]
    assert DynamicMetaEmbedder(specs, nx.make_rng(0)).fuse(_sources(n, [3, 2])).shape == (n, 12)


def test_concatenation_follows_manifest_order():
    specs = [SourceSpec("a", 3, 2), SourceSpec("b", 4, 3)]
    emb = DynamicMetaEmbedder(specs, nx.make_rng(1))
    src = _sources(6, [3, 4])
    out = emb.fuse(src).data
    for i, (lo, hi) in enumerate([(0, 2), (2, 5)]):
        p = emb.projections[i]
        np.testing.assert_allclose(out[:, lo:hi], src[i] @ p.weight.data + p.bias.data, rtol=1e-14)


def test_projection_gradients_match_finite_differences():
    specs = [SourceSpec("a", 4, 3), SourceSpec("b", 2, 3)]
    emb = DynamicMetaEmbedder(specs, nx.make_rng(2))
    src = _sources(5, [4, 2])
    probe = np.random.default_rng(3).normal(size=(5, 6))
    loss = lambda: nx.l2_norm_sq(emb(src) * nx.as_tensor(probe))
    nx.backward(loss())

    def value():
        with nx.no_grad():
            return loss().item()

    for name, p in emb.named_parameters():
        assert np.any(p.grad != 0), name
        assert rel_error(p.grad, numeric_grad(value, p.data)) < 1e-4, name


def test_inputs_are_never_mutated():
    emb = DynamicMetaEmbedder([SourceSpec("a", 4, 3)], nx.make_rng(3))
    src = _sources(5, [4])
    before = src[0].copy()
    nx.backward(nx.sum_all(emb(src)))
    np.testing.assert_array_equal(src[0], before)


def test_width_mismatch_names_source():
    with pytest.raises(SchemaError, match="'b'"):
        check_sources(_sources(3, [4, 5]), [SourceSpec("a", 4), SourceSpec("b", 6)])


def test_instance_count_mismatch():
    with pytest.raises(AlignmentError):
        check_sources([np.ones((3, 4)), np.ones((2, 4))], [SourceSpec("a", 4), SourceSpec("b", 4)])


def test_single_source_on_one_source_set_equals_fuse():
    emb = DynamicMetaEmbedder([SourceSpec("a", 4, 3)], nx.make_rng(4))
    src = _sources(5, [4])
    np.testing.assert_array_equal(emb.single_source(src, "a").data, emb.fuse(src).data)


def test_single_source_width_and_switching():
    specs = [SourceSpec("a", 4, 3), SourceSpec("b", 4, 5)]
    emb = DynamicMetaEmbedder(specs, nx.make_rng(5))
    src = _sources(6, [4, 4])
    a, b = emb.single_source(src, "a"), emb.single_source(src, "b")
    assert a.shape == (6, 3) and b.shape == (6, 5)
    assert not np.allclose(a.data, b.data[:, :3])


def test_unknown_source_id():
    emb = DynamicMetaEmbedder([SourceSpec("a", 4, 3)], nx.make_rng(6))
    with pytest.raises(KeyError):
        emb.single_source(_sources(2, [4]), "zzz")


def test_fusion_is_per_instance():
    specs = [SourceSpec("a", 3, 4), SourceSpec("b", 2, 4)]
    emb = DynamicMetaEmbedder(specs, nx.make_rng(7))
    src = _sources(5, [3, 2])
    base = emb.fuse(src).data
    for perm in itertools.permutations(range(5)):
        perm = list(perm)
        np.testing.assert_array_equal(emb.fuse([s[perm] for s in src]).data, base[perm])
