"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, scope, purpose)``. The
scope/purpose strings are hashed into the 128-bit key, so the training loop,
the data pipeline and the sampler never share draws. The integer ``counter``
selects an independent block of the stream (the training step, a record
index, ...), which makes resumption a matter of storing ``seed`` and the
counter value.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, scope: str, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{scope}/{purpose}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, scope: str, purpose: str, counter: int = 0) -> np.random.Generator:
    if counter < 0:
        raise ValueError("counter must be non-negative")
    bitgen = np.random.Philox(key=derive_key(seed, scope, purpose),
                              counter=[0, 0, 0, int(counter)])
    return np.random.Generator(bitgen)
