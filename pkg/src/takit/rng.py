"""Portable seeded randomness: splitmix64 seeding and a PCG32 generator.

Python's ``random`` module is not guaranteed stable across versions, so every
sampling decision in this package goes through :class:`Pcg32` instead.
"""

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

PCG_MULT = 6364136223846793005
PCG_DEFAULT_STREAM = 1442695040888963407


def splitmix64(x: int) -> int:
    """One splitmix64 step: returns the mixed output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Pcg32:
    """PCG-XSH-RR 64/32 generator (O'Neill 2014 reference constants)."""

    __slots__ = ("state", "inc")

    def __init__(self, initstate: int, initseq: int = PCG_DEFAULT_STREAM):
        self.state = 0
        self.inc = ((initseq << 1) | 1) & MASK64
        self.next_u32()
        self.state = (self.state + (initstate & MASK64)) & MASK64
        self.next_u32()

    @classmethod
    def from_seed(cls, seed: int, stream: int = 0) -> "Pcg32":
        """Seed via splitmix64 so small consecutive seeds give unrelated states."""
        s = seed & MASK64
        return cls(splitmix64(s), splitmix64(s ^ 0xD1B54A32D192ED03) + stream)

    @classmethod
    def for_record(cls, seed: int, index: int) -> "Pcg32":
        """Independent per-record stream: state derived from splitmix64(seed XOR index)."""
        return cls.from_seed(splitmix64((seed ^ index) & MASK64))

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK32

    def bounded(self, bound: int) -> int:
        """Unbiased integer in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if bound > MASK32:
            # wide bounds: rejection on 64-bit draws
            limit = (1 << 64) - ((1 << 64) % bound)
            while True:
                r = (self.next_u32() << 32) | self.next_u32()
                if r < limit:
                    return r % bound
        threshold = ((1 << 32) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        return (a * 67108864.0 + b) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()
