"""Exact arithmetic over Z_p for 64-bit prime moduli.

Python ints give exact double-width intermediates for free, so a 64-bit
modular multiply never wraps. The default production modulus is the
Mersenne prime M61 = 2^61 - 1: it fits a 64-bit word and leaves headroom
for the XOR-masked terms fed into Horner accumulation.

All functions are pure and safe to call concurrently.
"""

from dataclasses import dataclass

M61 = (1 << 61) - 1  # 2305843009213693951, default production modulus

# Deterministic Miller-Rabin witnesses: correct for every n < 3.3 * 10^24,
# which covers all 64-bit moduli.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic primality check for n < 2^64 (Miller-Rabin, fixed witnesses)."""
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n == small:
            return True
        if n % small == 0:
            return False
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldParams:
    """Prime modulus p and evaluation point x for all Z_p arithmetic.

    p must be a prime that fits 64 bits; x must lie in [0, p).
    """

    p: int
    x: int

    def __post_init__(self):
        if not 2 <= self.p < (1 << 64):
            raise ValueError(f"modulus must be a 64-bit integer >= 2, got {self.p}")
        if not is_prime(self.p):
            raise ValueError(f"modulus {self.p} is not prime")
        if not 0 <= self.x < self.p:
            raise ValueError(f"evaluation point {self.x} outside [0, {self.p})")


def mul_mod(a: int, b: int, p: int) -> int:
    """(a * b) mod p, exact for any 64-bit p (arbitrary-precision intermediate)."""
    return a * b % p


def add_mod(a: int, b: int, p: int) -> int:
    """(a + b) mod p without intermediate overflow."""
    s = a + b
    return s - p if s >= p else s


def pow_mod(base: int, e: int, p: int) -> int:
    """base^e mod p by square-and-multiply; 0^0 is defined as 1."""
    return pow(base, e, p)


def horner_step(acc: int, x: int, term: int, p: int) -> int:
    """One Horner accumulation step: (acc * x + term) mod p."""
    return (acc * x + term) % p
