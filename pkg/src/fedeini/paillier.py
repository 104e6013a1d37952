"""Paillier additively homomorphic encryption on gmpy2 big integers.

The guest party generates the key pair and is the only holder of the
private key; hosts operate on ciphertexts with the public key alone.
Ciphertext values live in [0, n^2) with the usual homomorphisms:

    decrypt(add(enc(u), enc(v)))   == (u + v) mod n
    decrypt(scalar_mul(enc(u), k)) == (k * u) mod n
"""

from __future__ import annotations

import random
import uuid
from dataclasses import dataclass

from gmpy2 import invert, is_prime, mpz, powmod

DEFAULT_KEY_BITS = 2048
MIN_KEY_BITS = 128

_rng = random.SystemRandom()


class KeyMismatchError(ValueError):
    """Raised when a ciphertext is used under the wrong public key."""


@dataclass(frozen=True)
class Ciphertext:
    """A Paillier ciphertext: an integer modulo n^2 tagged with its key."""

    value: int
    key_id: str


class PublicKey:
    """Public encryption key (n, g) with g = n + 1.

    Immutable after construction and safe to share across threads; every
    encryption draws fresh randomness from the system RNG.
    """

    def __init__(self, n: int, key_bits: int | None = None, key_id: str | None = None):
        self.n = mpz(n)
        self.g = self.n + 1
        self.nsquare = self.n * self.n
        self.key_bits = key_bits if key_bits is not None else self.n.bit_length()
        self.key_id = key_id if key_id is not None else uuid.uuid4().hex
        self._n_int = int(self.n)

    def __eq__(self, other) -> bool:
        return isinstance(other, PublicKey) and self.n == other.n

    def __hash__(self) -> int:
        return hash(self.n)

    def __repr__(self) -> str:
        return f"PublicKey(bits={self.key_bits}, id={self.key_id[:8]})"

    def check_plaintext(self, m: int) -> mpz:
        m = mpz(m)
        if m < 0 or m >= self.n:
            raise ValueError(f"plaintext {m} outside [0, n)")
        return m

    def check_ciphertext(self, c: Ciphertext) -> None:
        if c.key_id != self.key_id:
            raise KeyMismatchError(
                f"ciphertext under key {c.key_id[:8]} used with key {self.key_id[:8]}"
            )

    def random_obfuscator(self) -> mpz:
        """r^n mod n^2 for fresh uniform r in [1, n); an encryption of zero."""
        r = _rng.randrange(1, self._n_int)
        return powmod(r, self.n, self.nsquare)

    def raw_encrypt(self, m: int, obfuscator: mpz | None = None) -> mpz:
        # g = n + 1 gives g^m = 1 + m*n (mod n^2) without exponentiation.
        m = self.check_plaintext(m)
        if obfuscator is None:
            obfuscator = self.random_obfuscator()
        return (1 + m * self.n) * obfuscator % self.nsquare

    def encrypt(self, m: int) -> Ciphertext:
        return Ciphertext(self.raw_encrypt(m), self.key_id)

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self.check_ciphertext(a)
        self.check_ciphertext(b)
        return Ciphertext(a.value * b.value % self.nsquare, self.key_id)

    def scalar_mul(self, a: Ciphertext, k: int) -> Ciphertext:
        self.check_ciphertext(a)
        k = self.check_plaintext(k)
        return Ciphertext(powmod(a.value, k, self.nsquare), self.key_id)

    def rerandomize(self, a: Ciphertext) -> Ciphertext:
        """Fresh ciphertext with the same plaintext but an unrelated value."""
        self.check_ciphertext(a)
        value = a.value
        while value == a.value:
            value = a.value * self.random_obfuscator() % self.nsquare
        return Ciphertext(value, self.key_id)

    def to_dict(self) -> dict:
        """Hex text fields for handshake/model documents."""
        return {
            "n": format(self.n, "x"),
            "g": format(self.g, "x"),
            "key_bits": self.key_bits,
            "key_id": self.key_id,
        }

    @classmethod
    def from_dict(cls, fields: dict) -> "PublicKey":
        n = mpz(int(fields["n"], 16))
        pk = cls(n, key_bits=int(fields["key_bits"]), key_id=fields["key_id"])
        if int(fields["g"], 16) != pk.g:
            raise ValueError("unsupported generator; expected g = n + 1")
        return pk


class PrivateKey:
    """Decryption key derived from the factorization n = p * q.

    Decryption and the guest's own bulk encryptions use CRT arithmetic
    modulo p^2 and q^2; the resulting ciphertexts are identical to the
    public-key path, only cheaper to produce.
    """

    def __init__(self, public_key: PublicKey, p: int, q: int):
        p, q = mpz(p), mpz(q)
        if p * q != public_key.n:
            raise ValueError("p * q does not match the public modulus")
        if p == q:
            raise ValueError("p and q must be distinct")
        self.public_key = public_key
        self.p = min(p, q)
        self.q = max(p, q)
        self.psquare = self.p * self.p
        self.qsquare = self.q * self.q
        n = public_key.n
        # h(p) = (L_p(g^(p-1) mod p^2))^-1 mod p, standard CRT decryption.
        self.hp = invert((powmod(public_key.g, self.p - 1, self.psquare) - 1) // self.p % self.p, self.p)
        self.hq = invert((powmod(public_key.g, self.q - 1, self.qsquare) - 1) // self.q % self.q, self.q)
        self.p_inv_q = invert(self.p, self.q)
        self.psquare_inv_qsquare = invert(self.psquare, self.qsquare)
        self._n_int = int(n)

    def __repr__(self) -> str:
        return f"PrivateKey(for={self.public_key.key_id[:8]})"

    def decrypt(self, c: Ciphertext) -> int:
        self.public_key.check_ciphertext(c)
        value = mpz(c.value)
        mp = (powmod(value, self.p - 1, self.psquare) - 1) // self.p * self.hp % self.p
        mq = (powmod(value, self.q - 1, self.qsquare) - 1) // self.q * self.hq % self.q
        return int(mp + (mq - mp) * self.p_inv_q % self.q * self.p)

    def random_obfuscator(self) -> mpz:
        """Same value as the public-key path, computed mod p^2 and q^2."""
        r = _rng.randrange(1, self._n_int)
        n = self.public_key.n
        op = powmod(r, n, self.psquare)
        oq = powmod(r, n, self.qsquare)
        return (op + self.psquare * ((oq - op) * self.psquare_inv_qsquare % self.qsquare)) % self.public_key.nsquare

    def raw_encrypt(self, m: int) -> mpz:
        m = self.public_key.check_plaintext(m)
        return (1 + m * self.public_key.n) * self.random_obfuscator() % self.public_key.nsquare

    def encrypt(self, m: int) -> Ciphertext:
        return Ciphertext(self.raw_encrypt(m), self.public_key.key_id)


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    private_key: PrivateKey
    key_bits: int

    def encrypt(self, m: int) -> Ciphertext:
        return self.private_key.encrypt(m)

    def decrypt(self, c: Ciphertext) -> int:
        return self.private_key.decrypt(c)


def _random_prime(bits: int) -> mpz:
    # Top two bits set so the product of two such primes has exactly 2*bits bits.
    while True:
        candidate = mpz(_rng.getrandbits(bits)) | (mpz(3) << (bits - 2)) | 1
        if is_prime(candidate, 64):
            return candidate


def keygen(key_bits: int = DEFAULT_KEY_BITS) -> KeyPair:
    """Generate a fresh key pair with an exactly key_bits-long modulus.

    key_bits must be even and at least 128. Sizes below 2048 are for
    tests and benchmarks only; they are not secure.
    """
    if key_bits < MIN_KEY_BITS:
        raise ValueError(f"key_bits must be >= {MIN_KEY_BITS}, got {key_bits}")
    if key_bits % 2 != 0:
        raise ValueError(f"key_bits must be even, got {key_bits}")
    half = key_bits // 2
    while True:
        p = _random_prime(half)
        q = _random_prime(half)
        if p == q:
            continue
        n = p * q
        if n.bit_length() == key_bits:
            break
    public = PublicKey(n, key_bits=key_bits)
    return KeyPair(public, PrivateKey(public, p, q), key_bits)
