"""Deterministic seed derivation and random generators.

Every random draw in fedmesh flows through one of two named generators:

* ``numpy.random.Philox`` (a published counter-based generator) for data
  synthesis, shuffling, participant sampling, and Gaussian noise.  A
  generator is always constructed fresh from an explicit 64-bit seed, so
  no shared RNG state exists between clients or rounds.
* A splitmix64 stream (see :mod:`fedmesh.secure_sum`) for pairwise mask
  words, where exact 64-bit integer reproducibility matters.

Seeds are derived from an experiment root seed plus a sequence of labels
(strings or integers) with :func:`derive_seed`, a splitmix64-based mixing
function.  The same (root, labels...) always yields the same seed, and
distinct label paths yield independent-looking seeds.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_MIX_MUL1 = 0xBF58476D1CE4E5B9
_MIX_MUL2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer: a 64-bit bijective mixing of ``x``."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * _MIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_MUL2) & MASK64
    return z ^ (z >> 31)


def mix64_array(values: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64` over a uint64 array."""
    z = values.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX_MUL1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX_MUL2)
    z ^= z >> np.uint64(31)
    return z


def derive_seed(root: int, *labels: int | str) -> int:
    """Derive a 64-bit seed from a root seed and a label path.

    Each label is folded into the state as UTF-8 bytes (strings) or as an
    8-byte little-endian word (integers), one mix64 application per 8-byte
    chunk plus one per label terminator, so that label boundaries matter:
    ``derive_seed(s, "ab", "c") != derive_seed(s, "a", "bc")``.
    """
    state = mix64(root ^ GOLDEN)
    for label in labels:
        if isinstance(label, str):
            data = label.encode("utf-8")
        elif isinstance(label, (int, np.integer)):
            data = int(label).to_bytes(8, "little", signed=False)
        else:
            raise TypeError(f"seed labels must be str or int, got {type(label)!r}")
        for i in range(0, len(data), 8):
            chunk = int.from_bytes(data[i : i + 8], "little")
            state = mix64(state ^ chunk)
        state = mix64(state + len(data))
    return state


def generator(seed: int) -> np.random.Generator:
    """A fresh Philox-backed generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=seed & MASK64))
