"""Seed management: one root seed, split into independent counter-based streams.

Every source of randomness in the package (task generation, parameter init,
batch shuffling, per-seed experiment runs) draws from a Philox generator
derived from a root seed plus a label path, so streams never overlap and
multi-seed runs can execute in parallel without coordination.
"""

from __future__ import annotations

import numpy as np


def seed_sequence(root_seed: int, *labels) -> np.random.SeedSequence:
    # labels are hashed into the entropy pool; strings map to stable ints
    keys = [root_seed]
    for lab in labels:
        if isinstance(lab, str):
            keys.append(int.from_bytes(lab.encode("utf-8"), "little") % (2**63))
        else:
            keys.append(int(lab))
    return np.random.SeedSequence(keys)


def generator(root_seed: int, *labels) -> np.random.Generator:
    """Independent Philox stream for (root_seed, *labels)."""
    return np.random.Generator(np.random.Philox(seed_sequence(root_seed, *labels)))
