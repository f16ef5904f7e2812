"""Counter-based random streams.

Every draw is addressed by ``(seed, episode, purpose, step)``.  A block of
uniforms for one ``(episode, purpose)`` pair comes from a Philox generator
whose counter is set from the pair, so adding or removing draws for one
purpose never shifts the values seen by another.
"""

from __future__ import annotations

import numpy as np

# purposes used by the library; callers may use any other small integer
ACTION = 0
TRANSITION = 1
CURSOR = 2
OPPONENT = 3
CURSOR_START = 4

_MASK64 = (1 << 64) - 1
_TO_UNIT = 2.0 ** -53


class SeededRng:
    """Deterministic substreams keyed by episode, purpose and step."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def _bitgen(self, episode: int, purpose: int) -> np.random.Philox:
        return np.random.Philox(key=self.seed, counter=[0, 0, int(purpose) & _MASK64, int(episode) & _MASK64])

    def uniforms(self, episode: int, purpose: int, n: int) -> np.ndarray:
        """Return ``n`` uniforms in [0, 1); index ``i`` is the draw for step ``i``."""
        raw = self._bitgen(episode, purpose).random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _TO_UNIT

    def uniform(self, episode: int, purpose: int, step: int) -> float:
        return float(self.uniforms(episode, purpose, step + 1)[step])

    def generator(self, episode: int, purpose: int) -> np.random.Generator:
        """A full numpy Generator for bulk draws tied to one substream."""
        return np.random.Generator(self._bitgen(episode, purpose))
