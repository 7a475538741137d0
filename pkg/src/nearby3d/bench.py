"""Attention cost accounting: exact attended pairs, table formulas, wall clock."""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import (
    ALL,
    AttnMask,
    Extent,
    VIDEO_EXTENT,
    axial_mask,
    block_mask,
    dense_attention,
    full_mask,
    gathered_attention,
    nearby_mask,
    nearby_table,
    table_from_mask,
)
from .errors import ContractError

MECHANISMS = ("nearby", "axial", "block", "full")

CSV_COLUMNS = ["mechanism", "h", "w", "s", "e_h", "e_w", "e_s", "b_h", "b_w", "b_s",
               "exact_pairs", "formula_value", "median_ns_sparse", "median_ns_dense",
               "formula_value_summed"]


@dataclass
class ComplexityReport:
    dims: tuple[int, int, int]
    mechanism: str
    extent: Extent | None
    block_dims: tuple[int, int, int] | None
    exact_pairs: int
    formula_value: int
    formula_value_summed: int | None
    wall_time_ns_sparse: int
    wall_time_ns_dense: int
    calls: int

    def deterministic_fields(self):
        return (self.dims, self.mechanism, self.extent, self.block_dims, self.exact_pairs,
                self.formula_value, self.formula_value_summed, self.calls)


def count_pairs(mask: AttnMask) -> int:
    return int(np.count_nonzero(mask.bits))


def formula_cost(mechanism: str, dims, params=None) -> int:
    """Literal value of the complexity-table expression (no constants, no clipping).

    ``params`` is the extent for ``nearby`` and the block dims for ``block``.
    For ``block`` the value is ``(hws/b)^2`` with ``b`` the number of blocks.
    """
    h, w, s = dims
    n = h * w * s
    if mechanism == "full":
        return n * n
    if mechanism == "axial":
        return n * (h + w + s)
    if mechanism == "nearby":
        if not isinstance(params, Extent):
            raise ContractError("nearby cost needs an Extent")
        window = [axis if e == ALL else e for e, axis in zip(params, dims)]
        return n * math.prod(window)
    if mechanism == "block":
        per_block = _block_size(dims, params)
        return per_block * per_block
    raise ContractError(f"unknown mechanism {mechanism!r}")


def block_formula_summed(dims, block_dims) -> int:
    """Block reading where the per-block cost is summed over all ``b`` blocks."""
    per_block = _block_size(dims, block_dims)
    blocks = math.prod(dims) // per_block
    return blocks * per_block * per_block


def _block_size(dims, block_dims) -> int:
    if block_dims is None or len(block_dims) != 3:
        raise ContractError("block cost needs three block dims")
    if any(n % b for n, b in zip(dims, block_dims)):
        raise ContractError(f"block dims {block_dims} do not divide {dims}")
    return math.prod(block_dims)


def build_mask(mechanism: str, dims, extent: Extent | None = None, block_dims=None,
               causal: bool = False) -> AttnMask:
    dims = tuple(dims)
    if mechanism == "nearby":
        return nearby_mask(dims, dims, extent or VIDEO_EXTENT, causal)
    if mechanism == "axial":
        return axial_mask(dims, causal)
    if mechanism == "block":
        return block_mask(dims, block_dims, causal)
    if mechanism == "full":
        return full_mask(dims, dims, causal)
    raise ContractError(f"unknown mechanism {mechanism!r}")


def gathered_parallel(q, k, v, index, valid, scale_factor, heads=1, workers=2):
    """Gathered attention with query rows split across threads.

    Chunks cover disjoint output rows and are concatenated in order, so the
    result matches the serial kernel exactly.
    """
    bounds = np.linspace(0, len(index), workers + 1).astype(int)
    spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(span):
        a, b = span
        return gathered_attention(q[a:b], k, v, index[a:b], valid[a:b], scale_factor, heads)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(run, spans)), axis=0)


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def run_bench(dims_list: Sequence, mechanisms: Sequence[str] = MECHANISMS, repeats: int = 5, seed: int = 0,
              extent: Extent = VIDEO_EXTENT, block_dims=(2, 2, 2), width: int = 16,
              causal: bool = False, workers: int = 1) -> list[ComplexityReport]:
    """Count and time every mechanism on every grid.

    Timings are medians over ``repeats`` self-attention calls on seeded
    random inputs, for the gathered kernel and for the dense masked kernel.
    """
    if repeats < 3:
        raise ContractError("repeats must be at least 3")
    rng = np.random.default_rng(seed)
    reports = []
    for dims in dims_list:
        dims = tuple(int(n) for n in dims)
        n = math.prod(dims)
        x = rng.normal(size=(n, width))
        wq, wk, wv = (rng.normal(size=(width, width)) / math.sqrt(width) for _ in range(3))
        q, k, v = x @ wq, x @ wk, x @ wv
        sc = 1.0 / math.sqrt(width)
        for mech in mechanisms:
            mask = build_mask(mech, dims, extent, block_dims, causal)
            if mech == "nearby":
                index, valid = nearby_table(dims, dims, extent, causal)
            else:
                index, valid = table_from_mask(mask)
            if workers > 1:
                sparse = lambda: gathered_parallel(q, k, v, index, valid, sc, 1, workers)
            else:
                sparse = lambda: gathered_attention(q, k, v, index, valid, sc)
            dense = lambda: dense_attention(q, k, v, mask.bits, sc)
            reports.append(ComplexityReport(
                dims=dims,
                mechanism=mech,
                extent=extent if mech == "nearby" else None,
                block_dims=tuple(block_dims) if mech == "block" else None,
                exact_pairs=count_pairs(mask),
                formula_value=formula_cost(mech, dims, extent if mech == "nearby" else block_dims),
                formula_value_summed=block_formula_summed(dims, block_dims) if mech == "block" else None,
                wall_time_ns_sparse=_median_ns(sparse, repeats),
                wall_time_ns_dense=_median_ns(dense, repeats),
                calls=repeats,
            ))
    return reports


def _cell(v):
    if v is None:
        return ""
    if v == ALL:
        return "all"
    return str(v)


def report_rows(reports: Sequence[ComplexityReport]) -> list[list[str]]:
    rows = []
    for r in reports:
        e = tuple(r.extent) if r.extent is not None else (None, None, None)
        b = r.block_dims or (None, None, None)
        rows.append([r.mechanism, *map(str, r.dims), *map(_cell, e), *map(_cell, b),
                     str(r.exact_pairs), str(r.formula_value), str(r.wall_time_ns_sparse),
                     str(r.wall_time_ns_dense), _cell(r.formula_value_summed)])
    return rows


def write_report_csv(path, reports: Sequence[ComplexityReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(report_rows(reports))
