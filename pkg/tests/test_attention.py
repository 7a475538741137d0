import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nearby3d.attention import (
    ALL,
    IMAGE_EXTENT,
    TEXT_EXTENT,
    VIDEO_EXTENT,
    AttnMask,
    Extent,
    ProjWeights,
    attend_dense_masked,
    attend_masked_sparse,
    attend_sparse,
    attention_weights_nearby,
    axial_mask,
    block_mask,
    full_mask,
    identity_mask,
    mask_to_csv,
    mask_to_pgm,
    nearby_mask,
    nearby_table,
    neighborhood,
    project_coord,
    read_pgm,
    write_mask,
)
from nearby3d.errors import ContractError, FormatError, ShapeError
from nearby3d.tensor import Tensor4

small_dims = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
extents = st.tuples(*[st.sampled_from([1, 3, 5, ALL])] * 3).map(lambda e: Extent(*e))


def _rand(rng, dims, d):
    return Tensor4(dims + (d,), rng.normal(size=(math.prod(dims), d)))


def _weights(rng, d_in, d_out):
    return ProjWeights(*(rng.normal(size=(d_in, d_out)) for _ in range(3)))


# --- Extent -------------------------------------------------------------------

def test_extent_parse_and_validation():
    assert Extent.parse("3,3,all") == Extent(3, 3, ALL)
    assert str(Extent(1, 1, ALL)) == "1,1,all"
    assert Extent(5, 3, 1).radii == (2, 1, 0)
    for bad in ((2, 3, 3), (0, 1, 1), (-1, 1, 1)):
        with pytest.raises(ContractError):
            Extent(*bad)
    with pytest.raises(ContractError):
        Extent.parse("3,3")


# --- project_coord / neighborhood --------------------------------------------

def test_project_coord_examples():
    assert project_coord((3, 2, 2), (3, 2, 2), (2, 1, 1)) == (2, 1, 1)
    assert project_coord((4, 4, 2), (4, 4, 1), (2, 3, 1)) == (2, 3, 0)
    assert project_coord((2, 2, 1), (4, 4, 1), (1, 1, 0)) == (2, 2, 0)


def test_project_coord_out_of_range():
    with pytest.raises(IndexError):
        project_coord((2, 2, 1), (4, 4, 1), (2, 0, 0))


@settings(max_examples=60, deadline=None)
@given(small_dims, small_dims, st.data())
def test_project_coord_in_bounds(target, cond, data):
    pos = tuple(data.draw(st.integers(0, n - 1)) for n in target)
    out = project_coord(target, cond, pos)
    assert all(0 <= o < n for o, n in zip(out, cond))
    assert out == tuple(math.floor(p * c / t) for p, c, t in zip(pos, cond, target))


def test_neighborhood_examples():
    window = neighborhood((5, 5, 1), (2, 2, 0), IMAGE_EXTENT)
    assert window == [i * 5 + j for i in (1, 2, 3) for j in (1, 2, 3)]
    assert neighborhood((1, 1, 77), (0, 0, 40), TEXT_EXTENT) == list(range(77))
    assert len(neighborhood((4, 4, 2), (0, 0, 0), VIDEO_EXTENT)) == 8


@settings(max_examples=60, deadline=None)
@given(small_dims, extents, st.data())
def test_neighborhood_matches_enumeration(dims, extent, data):
    center = tuple(data.draw(st.integers(0, n - 1)) for n in dims)
    expected = [oracles.flat(dims, a, b, c) for (a, b, c) in oracles.coords(dims)
                if all(oracles.within(x - y, e) for x, y, e in zip((a, b, c), center, extent))]
    assert neighborhood(dims, center, extent) == expected


# --- masks vs brute force -------------------------------------------------------

def test_nearby_all_extent_is_full():
    assert nearby_mask((3, 2, 2), (3, 2, 2), Extent(ALL, ALL, ALL)) == full_mask((3, 2, 2))


def test_nearby_causal_matches_oracle():
    bits = np.array(oracles.nearby_bits((4, 4, 2), (4, 4, 2), (3, 3, 3), True))
    np.testing.assert_array_equal(nearby_mask((4, 4, 2), (4, 4, 2), VIDEO_EXTENT, True).bits, bits)


@settings(max_examples=40, deadline=None)
@given(small_dims, small_dims, extents, st.booleans())
def test_nearby_matches_oracle(target, cond, extent, causal):
    if causal:
        cond = target
    bits = np.array(oracles.nearby_bits(target, cond, tuple(extent), causal))
    np.testing.assert_array_equal(nearby_mask(target, cond, extent, causal).bits, bits)


def test_causal_row_zero_has_only_self():
    for mask in (nearby_mask((3, 3, 2), (3, 3, 2), VIDEO_EXTENT, True),
                 axial_mask((3, 3, 2), True), block_mask((4, 4, 2), (2, 2, 2), True),
                 full_mask((3, 3, 2), causal=True)):
        assert mask.bits[0].tolist() == [True] + [False] * (mask.bits.shape[1] - 1)


def test_causal_needs_equal_dims():
    with pytest.raises(ContractError):
        nearby_mask((2, 2, 1), (4, 4, 1), IMAGE_EXTENT, causal=True)
    with pytest.raises(ContractError):
        full_mask((2, 2, 1), (4, 4, 1), causal=True)


def test_axial_examples():
    assert axial_mask((1, 1, 5)) == full_mask((1, 1, 5))
    assert axial_mask((1, 1, 5), True) == full_mask((1, 1, 5), causal=True)
    # (h-1)+(w-1)+(s-1)+1 axis-line positions through each query
    counts = axial_mask((4, 4, 2)).bits.sum(axis=1)
    assert set(counts.tolist()) == {8}
    assert counts.sum() == 32 * (4 + 4 + 2 - 2)


@settings(max_examples=30, deadline=None)
@given(small_dims, st.booleans())
def test_axial_matches_oracle(dims, causal):
    np.testing.assert_array_equal(axial_mask(dims, causal).bits, np.array(oracles.axial_bits(dims, causal)))


def test_block_examples():
    assert block_mask((4, 4, 2), (4, 4, 2)) == full_mask((4, 4, 2))
    assert block_mask((4, 4, 2), (1, 1, 1)) == identity_mask((4, 4, 2))
    assert block_mask((4, 4, 2), (2, 2, 2)).count() == 4 * 8 ** 2
    with pytest.raises(ContractError):
        block_mask((4, 4, 2), (3, 2, 2))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.sampled_from([1, 2])] * 3), st.tuples(*[st.integers(1, 2)] * 3), st.booleans())
def test_block_matches_oracle(block, mult, causal):
    dims = tuple(b * m for b, m in zip(block, mult))
    np.testing.assert_array_equal(block_mask(dims, block, causal).bits,
                                  np.array(oracles.block_bits(dims, block, causal)))


def test_full_examples():
    assert full_mask((4, 4, 2)).count() == 1024
    assert full_mask((3, 2, 2), causal=True).count() == 12 * 13 // 2
    assert full_mask((1, 1, 1)).count() == 1
    assert full_mask((2, 2, 1), (1, 1, 3)).bits.shape == (4, 3)


def test_mask_shape_checked():
    with pytest.raises(ShapeError):
        AttnMask((2, 2, 1), (2, 2, 1), np.ones((4, 3), dtype=bool))


@settings(max_examples=40, deadline=None)
@given(small_dims, extents)
def test_mask_monotonicity_and_counts(dims, extent):
    near = nearby_mask(dims, dims, extent)
    near_c = nearby_mask(dims, dims, extent, True)
    full = full_mask(dims)
    assert not (near.bits & ~full.bits).any()
    assert not (near_c.bits & ~near.bits).any()
    assert not (axial_mask(dims, True).bits & ~axial_mask(dims).bits).any()
    n = math.prod(dims)
    assert full.count() == n * n
    window = math.prod(d if e == ALL else e for e, d in zip(extent, dims))
    assert near.count() <= n * window
    assert near.count() == oracles.neighbourhood_count(dims, dims, tuple(extent), False)


def test_nearby_count_without_clipping_hits_bound():
    # windows that never reach an edge hit the hws * window bound exactly
    dims = (4, 4, 2)
    assert nearby_mask(dims, dims, Extent(1, 1, 1)).count() == 32
    assert nearby_mask((3, 3, 3), (3, 3, 3), Extent(ALL, 1, 1)).count() == 27 * 3


def test_nearby_table_rows_match_mask(rng):
    for target, cond, ext, causal in [((4, 4, 2), (4, 4, 2), VIDEO_EXTENT, True),
                                      ((2, 2, 2), (1, 1, 3), TEXT_EXTENT, False),
                                      ((4, 4, 1), (2, 2, 1), IMAGE_EXTENT, False)]:
        index, valid = nearby_table(target, cond, ext, causal)
        bits = nearby_mask(target, cond, ext, causal).bits
        for t in range(len(index)):
            assert index[t][valid[t]].tolist() == np.flatnonzero(bits[t]).tolist()
            assert set(index[t][~valid[t]].tolist()) <= {int(index[t][0])}


# --- attention values -------------------------------------------------------------

def test_single_token_self_attention(rng):
    x = _rand(rng, (1, 1, 1), 4)
    w = _weights(rng, 4, 3)
    out = attend_sparse(x, x, w, VIDEO_EXTENT)
    np.testing.assert_allclose(out.rows, x.rows @ w.w_v, atol=1e-15)


def test_equal_keys_give_common_value(rng):
    c = Tensor4((2, 2, 1, 3), np.tile(rng.normal(size=(1, 3)), (4, 1)))
    x = _rand(rng, (2, 2, 1), 3)
    w = ProjWeights(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), np.eye(3))
    out = attend_sparse(x, c, w, IMAGE_EXTENT)
    np.testing.assert_allclose(out.rows, np.tile(c.rows[:1], (4, 1)), atol=1e-14)


def test_width_mismatch(rng):
    with pytest.raises(ShapeError):
        attend_sparse(_rand(rng, (2, 2, 1), 3), _rand(rng, (2, 2, 1), 4), _weights(rng, 3, 3), IMAGE_EXTENT)


def test_dense_rejects_empty_row(rng):
    x = _rand(rng, (2, 1, 1), 3)
    bits = np.array([[True, False], [False, False]])
    with pytest.raises(ContractError):
        attend_dense_masked(x, x, _weights(rng, 3, 3), AttnMask((2, 1, 1), (2, 1, 1), bits))
    with pytest.raises(ContractError):
        attend_masked_sparse(x, x, _weights(rng, 3, 3), AttnMask((2, 1, 1), (2, 1, 1), bits))


def test_full_mask_is_plain_attention(rng):
    x, c = _rand(rng, (2, 2, 1), 4), _rand(rng, (1, 1, 3), 4)
    w = _weights(rng, 4, 4)
    out = attend_dense_masked(x, c, w, full_mask((2, 2, 1), (1, 1, 3)))
    q, k, v = x.rows @ w.w_q, c.rows @ w.w_k, c.rows @ w.w_v
    s = q @ k.T / 2.0
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(out.rows, p @ v, atol=1e-13)


def test_identity_mask_returns_own_value(rng):
    x = _rand(rng, (2, 2, 2), 3)
    w = _weights(rng, 3, 3)
    out = attend_dense_masked(x, x, w, identity_mask((2, 2, 2)))
    np.testing.assert_allclose(out.rows, x.rows @ w.w_v, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(small_dims, small_dims, extents, st.booleans(), st.sampled_from([1, 2]), st.integers(0, 2**32 - 1))
def test_sparse_equals_dense(target, cond, extent, causal, heads, seed):
    if causal:
        cond = target
    r = np.random.default_rng(seed)
    x, c = _rand(r, target, 4), _rand(r, cond, 4)
    w = _weights(r, 4, 4)
    sparse = attend_sparse(x, c, w, extent, causal, heads)
    dense = attend_dense_masked(x, c, w, nearby_mask(target, cond, extent, causal), heads)
    assert np.max(np.abs(sparse.rows - dense.rows)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(small_dims, extents, st.integers(0, 2**32 - 1))
def test_output_ignores_condition_outside_window(dims, extent, seed):
    r = np.random.default_rng(seed)
    x, c = _rand(r, dims, 3), _rand(r, dims, 3)
    w = _weights(r, 3, 3)
    base = attend_sparse(x, c, w, extent).rows
    bits = nearby_mask(dims, dims, extent).bits
    t = int(r.integers(0, len(bits)))
    changed = np.where(bits[t][:, None], c.rows, r.normal(size=c.rows.shape) * 100)
    out = attend_sparse(x, Tensor4(c.dims, changed), w, extent).rows
    assert out[t].tobytes() == base[t].tobytes()


@settings(max_examples=30, deadline=None)
@given(small_dims, small_dims, extents, st.integers(0, 2**32 - 1))
def test_weights_row_stochastic(target, cond, extent, seed):
    r = np.random.default_rng(seed)
    x, c = _rand(r, target, 3), _rand(r, cond, 3)
    p = attention_weights_nearby(x, c, _weights(r, 3, 3), extent)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert not (p[~nearby_mask(target, cond, extent).bits]).any()


def test_masked_sparse_equals_dense_for_other_patterns(rng):
    x = _rand(rng, (4, 4, 2), 4)
    w = _weights(rng, 4, 4)
    for mask in (axial_mask((4, 4, 2), True), block_mask((4, 4, 2), (2, 2, 2)), full_mask((4, 4, 2), causal=True)):
        a = attend_masked_sparse(x, x, w, mask, heads=2).rows
        b = attend_dense_masked(x, x, w, mask, heads=2).rows
        assert np.max(np.abs(a - b)) < 1e-9


def test_block_and_nearby_differ(rng):
    x = _rand(rng, (4, 4, 2), 4)
    w = _weights(rng, 4, 4)
    near = attend_dense_masked(x, x, w, nearby_mask((4, 4, 2), (4, 4, 2), VIDEO_EXTENT))
    blk = attend_dense_masked(x, x, w, block_mask((4, 4, 2), (2, 2, 2)))
    assert np.max(np.abs(near.rows - blk.rows)) > 1e-3


# --- mask files ------------------------------------------------------------------

def test_pgm_and_csv(tmp_path):
    mask = axial_mask((2, 2, 1), True)
    assert mask_to_pgm(mask) == oracles.pgm_bytes(oracles.axial_bits((2, 2, 1), True))
    csv_text = mask_to_csv(mask)
    lines = csv_text.splitlines()
    assert lines[0] == "flat_q,flat_k"
    assert lines[1:] == ["0,0", "1,0", "1,1", "2,0", "2,2", "3,1", "3,2", "3,3"]
    pgm, csv_path = write_mask(tmp_path / "m", mask)
    assert csv_path.read_text() == csv_text
    np.testing.assert_array_equal(read_pgm(pgm) == 0, mask.bits)


def test_read_pgm_rejects_other_files(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(p)
