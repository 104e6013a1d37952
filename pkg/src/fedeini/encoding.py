"""Fixed-point encoding of reals into the Paillier plaintext space.

Reals are scaled by 2**scale_bits and rounded; negatives occupy the
upper half-range [n/2, n) so that encodings stay additive modulo n.
Sums remain decodable as long as the accumulated magnitude stays
below n / (2 * scale).
"""

from __future__ import annotations

from dataclasses import dataclass

from .paillier import PublicKey

DEFAULT_SCALE_BITS = 32


@dataclass(frozen=True)
class FixedPointCodec:
    n: int
    scale_bits: int = DEFAULT_SCALE_BITS

    @classmethod
    def for_key(cls, public_key: PublicKey, scale_bits: int = DEFAULT_SCALE_BITS) -> "FixedPointCodec":
        return cls(n=int(public_key.n), scale_bits=scale_bits)

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    @property
    def max_magnitude(self) -> float:
        """Largest |x| the codec can represent: n / (2 * scale)."""
        return self.n / (2 * self.scale)

    def encode(self, x: float) -> int:
        scaled = round(float(x) * self.scale)
        if 2 * abs(scaled) >= self.n:
            raise OverflowError(
                f"|{x}| exceeds codec range n/(2*scale) = {self.max_magnitude:g}"
            )
        return scaled % self.n

    def decode(self, m: int) -> float:
        m = int(m)
        if m < 0 or m >= self.n:
            raise ValueError(f"encoded value {m} outside [0, n)")
        if 2 * m >= self.n:
            m -= self.n
        return m / self.scale
