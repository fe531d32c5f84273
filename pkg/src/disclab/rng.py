"""Deterministic RNG substreams.

A single experiment seed fans out into named substreams (data, bank, cluster,
train, eval, ...) so that adding a new consumer never perturbs the draws seen
by existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extras: int) -> np.random.Generator:
    """Return the generator for the (seed, name, *extras) substream.

    Parameters
    ----------
    seed : int
        Global experiment seed, nonnegative.
    name : str
        Purpose label ("data", "train", ...). Folded to a 32-bit tag with
        CRC-32 so distinct purposes get decorrelated SeedSequence entropy.
    *extras : int
        Optional nonnegative indices distinguishing per-epoch or per-worker
        children of the same purpose.
    """
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    tag = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extras]))
