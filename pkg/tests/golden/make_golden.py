"""Regenerate the 4x4x2 mask golden files from the brute-force predicates.

Run from the repository root:  python tests/golden/make_golden.py
"""
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402

DIMS = (4, 4, 2)
CASES = {
    "nearby": lambda c: oracles.nearby_bits(DIMS, DIMS, (3, 3, 3), c),
    "axial": lambda c: oracles.axial_bits(DIMS, c),
    "block": lambda c: oracles.block_bits(DIMS, (2, 2, 2), c),
    "full": lambda c: oracles.full_bits(DIMS, c),
}


def main():
    for name, make in CASES.items():
        for causal in (False, True):
            tag = "causal" if causal else "noncausal"
            (HERE / f"{name}_{tag}.pgm").write_bytes(oracles.pgm_bytes(make(causal)))


if __name__ == "__main__":
    main()
