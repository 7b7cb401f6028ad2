"""On-demand generation of k-wise independent challenge coefficients.

The coefficient at global index i is the degree-(k-1) polynomial

    s_i = r_0 + r_1*(i+1) + r_2*(i+1)^2 + ... + r_{k-1}*(i+1)^{k-1}  mod p

evaluated by Horner's rule in j, highest power first. Any k coefficients
are jointly uniform over Z_p^k, so knowing k-1 of them reveals nothing
about the rest. No coefficient array is ever materialized: each call uses
O(1) working state beyond the seed list, which is what lets the challenge
loop stay register-resident on a real device.
"""

from dataclasses import dataclass

from .errors import IndexOutOfField
from .field import FieldParams


@dataclass(frozen=True)
class RandomSeeds:
    """The k random values r_0 .. r_{k-1} driving the coefficient family."""

    r: tuple
    params: FieldParams

    def __post_init__(self):
        object.__setattr__(self, "r", tuple(self.r))
        if len(self.r) < 1:
            raise ValueError("need at least one seed value (k >= 1)")
        for v in self.r:
            if not 0 <= v < self.params.p:
                raise ValueError(f"seed value {v} outside [0, {self.params.p})")

    @property
    def k(self) -> int:
        return len(self.r)


def coefficient_at(seeds: RandomSeeds, index: int) -> int:
    """Coefficient s_index, computed by Horner in the seed list.

    index is the already-combined global coefficient index (the caller folds
    in the pass number). Raises IndexOutOfField when index+1 reaches the
    modulus: the challenged region is too large for the chosen prime.
    """
    if index < 0:
        raise IndexOutOfField(f"negative coefficient index {index}")
    p = seeds.params.p
    base = index + 1
    if base >= p:
        raise IndexOutOfField(
            f"coefficient index {index} needs index+1 < p (p={p})"
        )
    r = seeds.r
    acc = 0
    for j in range(len(r) - 1, -1, -1):
        acc = (acc * base + r[j]) % p
    return acc
