"""Seeded random streams.

All randomness in the package flows from a single master seed. Each
component derives its own independent stream from (seed, label) so that
adding draws in one component never perturbs another.
"""

import zlib

import numpy as np


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, label)."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def rng_state(gen: np.random.Generator) -> dict:
    """Extract a JSON-serializable snapshot of a generator's state."""
    return gen.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    """Rebuild a generator from a snapshot taken with :func:`rng_state`."""
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
