"""Masked secure aggregation: the server learns only the sum of updates.

Each pair of clients shares a 64-bit seed (a simulation stand-in for key
agreement; see :class:`PairwiseSeedMatrix`).  Per round, client ``i`` adds
the pair's pseudorandom mask words for every peer ``j > i`` and subtracts
them for every ``j < i``, all modulo 2^64.  Summing the masked shares
cancels every mask exactly, so the modular sum equals the sum of the
unmasked shares - an equality, not an approximation.

Real values ride through a fixed-point codec (default 24 fractional
bits): floats do not cancel exactly under masking, integers mod 2^64 do.

Mask words come from a splitmix64 counter stream: for pair seed ``s`` and
round ``r`` the key is ``mix64(s + GOLDEN*(r+1) mod 2^64)`` and word ``k``
is ``mix64(key + (k+1)*GOLDEN mod 2^64)`` - a named, documented 64-bit
generator with random access per coordinate.

Dropout handling is deliberately strict: a round with any missing share
aborts (:class:`SecureSumAbort`) and no partial sum is released.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .rng import GOLDEN, MASK64, derive_seed, mix64, mix64_array


class SecureSumAbort(Exception):
    """The share set is incomplete or inconsistent; no sum is released."""


@dataclass(frozen=True)
class FixedPointCodec:
    """Two's-complement fixed-point encoding into unsigned 64-bit words."""

    scale_bits: int = 24

    def __post_init__(self) -> None:
        if not 1 <= self.scale_bits <= 52:
            raise ValueError("scale_bits must lie in [1, 52]")

    @property
    def scale(self) -> float:
        return float(2**self.scale_bits)

    @property
    def max_magnitude(self) -> float:
        """Largest encodable magnitude: 2^(63 - scale_bits)."""
        return float(2 ** (63 - self.scale_bits))

    def encode(self, values: np.ndarray) -> np.ndarray:
        """round(v * 2^scale_bits) as int64 bits reinterpreted as uint64.

        The power-of-two scaling is exact in float64, so the round-trip
        error is at most 2^-(scale_bits+1) per coordinate.
        """
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("cannot encode non-finite values")
        if np.any(np.abs(values) >= self.max_magnitude):
            raise OverflowError(
                f"value out of representable range (|v| < {self.max_magnitude:g})"
            )
        scaled = np.round(values * self.scale)
        return scaled.astype(np.int64).view(np.uint64)

    def decode(self, words: np.ndarray) -> np.ndarray:
        """Inverse of :func:`encode` (exact: division by a power of two)."""
        words = np.asarray(words, dtype=np.uint64)
        return words.view(np.int64).astype(np.float64) / self.scale


@dataclass(frozen=True)
class MaskedShare:
    """One client's masked, encoded update for one round."""

    client_id: int
    round_index: int
    masked_values: np.ndarray  # (dim,) uint64

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "masked_values", np.asarray(self.masked_values, dtype=np.uint64)
        )
        if self.masked_values.ndim != 1:
            raise ValueError("masked_values must be 1-D")


class PairwiseSeedMatrix:
    """Shared 64-bit seeds per unordered client pair.

    Stands in for pairwise key agreement: in this simulator the seeds are
    derived from the experiment root seed, and the aggregator simply never
    consults them.  Accessors are symmetric: ``seed_for(i, j) == seed_for(j, i)``.
    """

    def __init__(self, seeds: Mapping[tuple[int, int], int]):
        canonical: dict[tuple[int, int], int] = {}
        for (a, b), seed in seeds.items():
            if a == b:
                raise ValueError("pair seeds are defined only for distinct clients")
            key = (min(a, b), max(a, b))
            if key in canonical and canonical[key] != seed:
                raise ValueError(f"conflicting seeds for pair {key}")
            canonical[key] = int(seed) & MASK64
        self._seeds = canonical

    @classmethod
    def from_root_seed(cls, root_seed: int, client_ids: Iterable[int]) -> "PairwiseSeedMatrix":
        ids = sorted(set(int(c) for c in client_ids))
        seeds = {
            (a, b): derive_seed(root_seed, "pair", a, b)
            for pos, a in enumerate(ids)
            for b in ids[pos + 1 :]
        }
        return cls(seeds)

    def seed_for(self, a: int, b: int) -> int:
        try:
            return self._seeds[(min(a, b), max(a, b))]
        except KeyError:
            raise SecureSumAbort(f"missing pair seed for clients ({a}, {b})") from None


def mask_words(pair_seed: int, round_index: int, dim: int) -> np.ndarray:
    """The pair's pseudorandom mask for one round: ``dim`` uint64 words."""
    key = mix64((pair_seed + GOLDEN * (round_index + 1)) & MASK64)
    counters = np.arange(1, dim + 1, dtype=np.uint64)
    state = np.uint64(key) + counters * np.uint64(GOLDEN)
    return mix64_array(state)


def mask(
    encoded: np.ndarray,
    client_id: int,
    seeds: PairwiseSeedMatrix,
    participants: Iterable[int],
    round_index: int,
) -> MaskedShare:
    """Mask an encoded share against every other participant.

    Pair masks are added toward higher-id peers and subtracted toward
    lower-id peers, so they cancel in the participant-set sum.
    """
    encoded = np.asarray(encoded, dtype=np.uint64)
    dim = encoded.shape[0]
    masked = encoded.copy()
    for peer in participants:
        if peer == client_id:
            continue
        words = mask_words(seeds.seed_for(client_id, peer), round_index, dim)
        if peer > client_id:
            masked += words
        else:
            masked -= words
    return MaskedShare(client_id=client_id, round_index=round_index, masked_values=masked)


def unmask_sum(
    shares: Iterable[MaskedShare],
    codec: FixedPointCodec,
    expected_clients: Iterable[int],
) -> np.ndarray:
    """Modular sum of a complete share set, decoded back to reals.

    Aborts (no partial result) on a missing or duplicate client, a round
    mismatch, or inconsistent dimensions.
    """
    shares = list(shares)
    expected = set(int(c) for c in expected_clients)
    if not shares:
        raise SecureSumAbort("no shares submitted")
    seen: set[int] = set()
    for share in shares:
        if share.client_id in seen:
            raise SecureSumAbort(f"duplicate share from client {share.client_id}")
        seen.add(share.client_id)
    if seen != expected:
        missing = sorted(expected - seen)
        extra = sorted(seen - expected)
        raise SecureSumAbort(f"share set mismatch: missing {missing}, unexpected {extra}")
    rounds = {share.round_index for share in shares}
    if len(rounds) != 1:
        raise SecureSumAbort(f"round mismatch across shares: {sorted(rounds)}")
    dims = {share.masked_values.shape[0] for share in shares}
    if len(dims) != 1:
        raise SecureSumAbort(f"dimension mismatch across shares: {sorted(dims)}")
    total = np.zeros(dims.pop(), dtype=np.uint64)
    for share in sorted(shares, key=lambda s: s.client_id):
        total += share.masked_values
    return codec.decode(total)
