import hashlib
import random

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Derive an independent, reproducible seed for a named random stream.

    The derived seed is random, but deterministic for a single seed and
    label combination. Each stream in a run (batch order per epoch,
    dropout per step, validation batches, Bernoulli graph samples, ...)
    gets its own labels, so drawing more numbers from one stream never
    shifts another one.

    Args:
        seed (int): The run seed.
        *labels (object): Labels naming the stream, e.g. `"dropout", 3, 0`.

    Returns:
        int: A non-negative 63-bit seed.
    """
    input = "|".join([repr(seed), *(repr(label) for label in labels)])

    hash_digest = hashlib.md5(input.encode()).hexdigest()
    hash_int = int(hash_digest, 16)

    return random.Random(hash_int).getrandbits(63)


def generator(seed: int, *labels: object) -> np.random.Generator:
    """Create a numpy generator for the stream named by `labels`."""
    return np.random.default_rng(derive_seed(seed, *labels))
