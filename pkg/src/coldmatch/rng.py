"""Labeled random streams.

All stochastic components draw from named child streams of one base seed, so
changing how often one consumer draws never shifts the numbers another one
sees. Stream identity is (seed, label); the label is hashed into a stable
integer offset.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

# Fixed label table. Adding a label is fine; renumbering is not, because the
# stream contents would silently change under the same seed.
_STREAM_IDS = {
    "init": 1,
    "negatives": 2,
    "grouping": 3,
    "augmentation": 4,
    "clustering": 5,
    "datagen": 6,
    "shuffle": 7,
}


class RngStream:
    """A named family of generators derived from one seed.

    ``stream(label)`` always returns the same generator object for a label,
    so consumers advance a shared cursor. ``fresh(label, n)`` spawns an
    independent generator keyed by an extra integer, for per-item
    reproducibility regardless of draw order.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)):
            raise ContractError(f"seed must be an int, got {type(seed).__name__}")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, label: str) -> np.random.Generator:
        if label not in _STREAM_IDS:
            raise ContractError(f"unknown rng stream label: {label!r}")
        if label not in self._streams:
            ss = np.random.SeedSequence([self.seed, _STREAM_IDS[label]])
            self._streams[label] = np.random.default_rng(ss)
        return self._streams[label]

    def fresh(self, label: str, key: int) -> np.random.Generator:
        if label not in _STREAM_IDS:
            raise ContractError(f"unknown rng stream label: {label!r}")
        ss = np.random.SeedSequence([self.seed, _STREAM_IDS[label], int(key)])
        return np.random.default_rng(ss)
