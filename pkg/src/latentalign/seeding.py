"""Named random streams.

All randomness in the library flows from a single integer seed through
named streams, so adding a new consumer never perturbs existing ones.
Stream names are hashed with SHA-256 (stable across platforms and runs,
unlike Python's builtin hash).
"""

import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(seed, name):
    """Independent Generator for (seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
