"""Counter-based deterministic random streams (splitmix64).

Pure 64-bit integer mixing plus one float division, so every platform draws
the same sequence for the same seed. Used wherever sampled behavior has to be
reproducible from a ScenarioSpec seed.
"""

from __future__ import annotations

_M64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x &= _M64
    z = (x + _GAMMA) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def derive_seed(seed: int, *salts: int) -> int:
    """Independent child seed from a root seed and integer salts."""
    z = seed & _M64
    for salt in salts:
        z = splitmix64(z ^ (salt & _M64))
    return z


class DetRng:
    """Sequential deterministic stream; `counter` is the draw position."""

    __slots__ = ("_state", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self._state = seed & _M64
        self.counter = 0
        for _ in range(counter):
            self.next_u64()

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _M64
        self.counter += 1
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def pick(self, probs) -> int:
        """Sample an index from a probability vector by inverse CDF."""
        u = self.uniform()
        acc = 0.0
        last = 0
        for i, p in enumerate(probs):
            acc += p
            last = i
            if u < acc:
                return i
        return last
