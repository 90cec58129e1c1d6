"""Named, independent random streams derived from one master seed.

Every source of randomness in a run is a separate stream addressed by a
(master seed, *path) tuple, where path elements are small ints or short
string tags.  Streams keyed by neuron id (never by rank) make simulation
results independent of how neurons are distributed over ranks.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "tag_to_int"]


def tag_to_int(tag: str) -> int:
    """Stable 64-bit integer for a string tag (platform independent)."""
    digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream addressed by ``path``.

    Two calls with the same (master_seed, path) always return generators
    producing the same sequence; distinct paths give statistically
    independent streams.
    """
    entropy = [int(master_seed)]
    for part in path:
        if isinstance(part, str):
            entropy.append(tag_to_int(part))
        else:
            entropy.append(int(part))
    return np.random.default_rng(np.random.SeedSequence(entropy))
