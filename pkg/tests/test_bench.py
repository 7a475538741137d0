import csv
import random

import numpy as np
import pytest

import oracles
from nearby3d.attention import (
    ALL,
    VIDEO_EXTENT,
    Extent,
    block_mask,
    dense_attention,
    full_mask,
    gathered_attention,
    identity_mask,
    nearby_mask,
    table_from_mask,
)
from nearby3d.bench import (
    CSV_COLUMNS,
    block_formula_summed,
    build_mask,
    count_pairs,
    formula_cost,
    gathered_parallel,
    run_bench,
    write_report_csv,
)
from nearby3d.errors import ContractError


def test_count_pairs_examples():
    assert count_pairs(full_mask((4, 4, 2))) == 1024
    assert count_pairs(block_mask((4, 4, 2), (2, 2, 2))) == 256
    assert count_pairs(identity_mask((3, 2, 2))) == 12


def test_formula_examples():
    assert formula_cost("nearby", (4, 4, 2), Extent(3, 3, 3)) == 864
    assert formula_cost("axial", (4, 4, 2)) == 320
    assert formula_cost("full", (4, 4, 2)) == 1024
    assert formula_cost("nearby", (4, 4, 2), Extent(1, 1, ALL)) == 64
    # block row: (hws/b)^2 with b blocks, plus the reading summed over blocks
    assert formula_cost("block", (4, 4, 2), (2, 2, 2)) == 64
    assert block_formula_summed((4, 4, 2), (2, 2, 2)) == 256
    with pytest.raises(ContractError):
        formula_cost("ring", (4, 4, 2))
    with pytest.raises(ContractError):
        formula_cost("nearby", (4, 4, 2))


def test_nearby_count_matches_enumeration_on_random_configs():
    r = random.Random(2024)
    for _ in range(20):
        dims = (r.randint(1, 5), r.randint(1, 5), r.randint(1, 4))
        extent = tuple(r.choice([1, 3, 5, ALL]) for _ in range(3))
        causal = r.random() < 0.5
        got = count_pairs(nearby_mask(dims, dims, Extent(*extent), causal))
        assert got == oracles.neighbourhood_count(dims, dims, extent, causal)


def test_axial_count_identity():
    for dims in [(4, 4, 2), (3, 5, 2), (2, 2, 3)]:
        h, w, s = dims
        assert count_pairs(build_mask("axial", dims)) == h * w * s * (h + w + s - 2)


def test_interior_only_hits_formula():
    # extent 1 never clips, any larger window on a small grid does
    assert count_pairs(build_mask("nearby", (4, 4, 2), Extent(1, 1, 1))) == formula_cost("nearby", (4, 4, 2), Extent(1, 1, 1))
    assert count_pairs(build_mask("nearby", (4, 4, 2), VIDEO_EXTENT)) < 864


def test_growth_in_time():
    near = [count_pairs(build_mask("nearby", (4, 4, s), VIDEO_EXTENT)) for s in (2, 4, 8)]
    full = [count_pairs(build_mask("full", (4, 4, s))) for s in (2, 4, 8)]
    assert near == [400, 1000, 2200]
    assert near[2] - near[1] == 2 * (near[1] - near[0])
    assert full == [(16 * s) ** 2 for s in (2, 4, 8)]


def test_parallel_kernel_matches_serial(rng):
    dims = (4, 4, 2)
    mask = nearby_mask(dims, dims, VIDEO_EXTENT, True)
    index, valid = table_from_mask(mask)
    q, k, v = (rng.normal(size=(32, 8)) for _ in range(3))
    serial = gathered_attention(q, k, v, index, valid, 0.3)
    parallel = gathered_parallel(q, k, v, index, valid, 0.3, workers=3)
    assert serial.tobytes() == parallel.tobytes()
    assert np.max(np.abs(serial - dense_attention(q, k, v, mask.bits, 0.3))) < 1e-12


def test_run_bench_properties(tmp_path):
    dims = [(4, 4, 2), (4, 4, 4)]
    a = run_bench(dims, repeats=3, seed=1)
    b = run_bench(dims, repeats=3, seed=1, workers=2)
    assert [r.deterministic_fields() for r in a] == [r.deterministic_fields() for r in b]
    for r in a:
        assert r.exact_pairs <= formula_cost("full", r.dims)
        if r.mechanism == "nearby":
            assert r.exact_pairs <= r.formula_value
        assert r.wall_time_ns_sparse > 0 and r.wall_time_ns_dense > 0
    with pytest.raises(ContractError):
        run_bench(dims, repeats=2)

    path = tmp_path / "bench.csv"
    write_report_csv(path, a)
    rows = list(csv.reader(path.open()))
    assert rows[0] == CSV_COLUMNS
    assert rows[0][:14] == ["mechanism", "h", "w", "s", "e_h", "e_w", "e_s", "b_h", "b_w", "b_s",
                            "exact_pairs", "formula_value", "median_ns_sparse", "median_ns_dense"]
    first = dict(zip(rows[0], rows[1]))
    assert first["mechanism"] == "nearby" and first["exact_pairs"] == "400" and first["formula_value"] == "864"
    block = next(dict(zip(rows[0], r)) for r in rows[1:] if r[0] == "block")
    assert block["formula_value_summed"] == "256" and block["e_h"] == ""
