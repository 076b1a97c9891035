"""Named, splittable random streams.

Every random draw in the package comes from ``stream(seed, purpose, index)``:
a PCG64 generator seeded by ``SeedSequence(seed, spawn_key=(purpose, index))``.
Purposes are small integers (see the constants below); ``index`` is a block,
tree or trial number.  Because a stream depends only on its key, results do
not depend on execution order or on the number of worker threads.
"""

from __future__ import annotations

import numpy as np

# stream purposes
CONTEXTS = 1
LOGGING_NOISE = 2
OUTCOMES = 3
TREE = 10
TREE_FEATURES = 11
MLP_INIT = 20
TUNING = 30
CROSS_FIT = 40
DERIVED = 99

# records per stream block in the simulator
BLOCK = 4096


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Deterministic 64-bit child seed keyed by ``tags`` (strings are hashed stably)."""
    key = tuple(_tag(t) for t in tags)
    ss = np.random.SeedSequence(int(seed), spawn_key=(DERIVED, *key))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def _tag(t: int | str) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t)
    # stable across processes, unlike hash()
    return int.from_bytes(str(t).encode("utf-8")[:16].ljust(16, b"\0"), "little") & ((1 << 63) - 1)
