"""Named random substreams derived from a single root seed.

Every consumer of randomness asks for ``rng(seed, stream, *keys)``. Streams
never share state, so changing how often one of them is drawn (for example
sampling masks only when the masked branch is active) cannot shift another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "mask": 1,
    "init": 2,
    "augment": 3,
    "batch": 4,
    "split": 5,
}


def seed_sequence(seed: int, stream: str, *keys: int) -> np.random.SeedSequence:
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    return np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(STREAMS[stream], *(int(k) for k in keys)),
    )


def rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, stream, *keys))


def derive_seed(seed: int, stream: str, *keys: int) -> int:
    """A 64-bit integer seed for APIs that take a plain seed value."""
    return int(seed_sequence(seed, stream, *keys).generate_state(1, np.uint64)[0])
