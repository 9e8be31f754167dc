"""Deterministic random-stream derivation.

Every source of randomness in the package flows from a single integer seed.
Independent streams (per ensemble member, per chain, per Monte Carlo pass)
are derived by hashing a path of labels into a ``numpy.random.SeedSequence``,
so results are reproducible regardless of execution order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_rng", "derive_seed", "derive_seed_sequence"]


def _component_key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed_sequence(seed: int, *path: int | str) -> np.random.SeedSequence:
    """Build a seed sequence for the stream identified by ``(seed, *path)``.

    Path components may be integers (member ids, chain ids, pass ids) or
    strings (stream labels); strings are hashed with BLAKE2b so the mapping
    is stable across processes and Python versions.
    """
    return np.random.SeedSequence([_component_key(seed)] + [_component_key(p) for p in path])


def derive_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent ``numpy.random.Generator`` for ``(seed, *path)``."""
    return np.random.default_rng(derive_seed_sequence(seed, *path))


def derive_seed(seed: int, *path: int | str) -> int:
    """Collapse a stream path to a plain integer seed (for sub-components)."""
    state = derive_seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])
