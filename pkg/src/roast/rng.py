"""Seeded random streams.

All randomness in the library flows through :class:`RandomSource`, a thin
wrapper over numpy's Philox-4x64 counter-based bit generator.  Philox is
pinned so streams do not change if numpy's default generator does.
Sub-streams come from ``SeedSequence.spawn``: child ``k`` of a source seeded
with ``s`` is the same stream on every machine.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class RandomSource:
    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["RandomSource"]:
        """``n`` independent child streams (deterministic in the parent seed)."""
        return [RandomSource(child) for child in self._seq.spawn(n)]

    def child(self, key: int) -> "RandomSource":
        """Stream addressed by an integer key, independent of call order."""
        return RandomSource(np.random.SeedSequence(self._seq.entropy,
                                                   spawn_key=(*self._seq.spawn_key, int(key))))

    # convenience passthroughs
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def random(self, size=None):
        return self.generator.random(size)
