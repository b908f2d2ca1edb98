"""Stable seed derivation so parallel work is reproducible.

Children are derived from (root seed, stable tokens such as an identity
label or stage name), never from scheduling order.
"""

import hashlib

import numpy as np


def derive_seed(*tokens) -> int:
    h = hashlib.blake2b(digest_size=8)
    for tok in tokens:
        h.update(repr(tok).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_rng(*tokens) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*tokens))
