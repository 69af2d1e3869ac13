"""Masked secure aggregation: the server learns the sum, nothing else.

Updates ride through a fixed-point codec into 64-bit modular arithmetic,
each client adds/subtracts pairwise pseudorandom masks, and the masks
cancel exactly in the sum - an integer identity, not an approximation.
"""

import numpy as np

from fedmesh import FixedPointCodec, PairwiseSeedMatrix, mask, unmask_sum
from fedmesh.secure_sum import SecureSumAbort

codec = FixedPointCodec(scale_bits=24)
clients = [0, 1, 2, 3]
seeds = PairwiseSeedMatrix.from_root_seed(2024, clients)

rng = np.random.default_rng(1)
updates = [rng.uniform(-5, 5, 6) for _ in clients]
true_sum = np.sum(updates, axis=0)

shares = [mask(codec.encode(u), cid, seeds, clients, round_index=0) for cid, u in zip(clients, updates)]

print("client 0 raw update:    ", np.round(updates[0], 4))
print("client 0 masked words:  ", shares[0].masked_values[:3], "... (opaque 64-bit words)")

# The modular sum of masked shares equals the sum of encoded updates exactly.
masked_total = np.zeros(6, dtype=np.uint64)
encoded_total = np.zeros(6, dtype=np.uint64)
for share, update in zip(shares, updates):
    masked_total += share.masked_values
    encoded_total += codec.encode(update)
print("mask cancellation exact:", np.array_equal(masked_total, encoded_total))

decoded = unmask_sum(shares, codec, clients)
print("decoded sum:            ", np.round(decoded, 4))
print("max error vs float sum: ", np.max(np.abs(decoded - true_sum)),
      f"(bound {len(clients)}*2^-23 = {len(clients)*2**-23:.2e})")

# Strict dropout policy: a missing share aborts the round, nothing leaks.
try:
    unmask_sum(shares[:-1], codec, clients)
except SecureSumAbort as exc:
    print("dropout handling:        aborted with no output ->", exc)
