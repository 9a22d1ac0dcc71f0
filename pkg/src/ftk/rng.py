"""SplitMix64 stream, the cross-language-reproducible RNG used for per-sample
augmentation randomness and other seed derivation.

The stream seeded for sample ``index`` of ``epoch`` is::

    state0 = mix64(base_seed XOR (epoch * GOLDEN mod 2^64) XOR index)

where ``mix64`` is the SplitMix64 output function.  Draws then advance the
state by GOLDEN and apply ``mix64``.  Floats are the top 53 bits scaled to
[0, 1).
"""

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 output function (finalizer)."""
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def stream_seed(base_seed: int, epoch: int, index: int) -> int:
    return mix64(base_seed ^ ((epoch * GOLDEN) & MASK) ^ index)


class SplitMix64:
    """Deterministic 64-bit stream; allocate one per (seed, epoch, index)."""

    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK
        return mix64(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_uniform(self, lo: float, hi: float) -> float:
        return lo + self.next_float() * (hi - lo)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n); fine for tiny n such as rotation picks."""
        return int(self.next_float() * n)
