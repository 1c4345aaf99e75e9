"""Counter-based random streams.

A stream is identified by ``(seed, label)``. The pair is hashed with
BLAKE2b into a 128-bit Philox-4x64 key; ``counter`` counts the 4x64-bit
blocks consumed so far. All distributions are derived from the raw 64-bit
words here (not from numpy's samplers), so the transforms are documented:

* uniform01: ``((w >> 11) + 0.5) * 2**-53``, strictly inside (0, 1)
* standard normal: Box-Muller on two uniform01 draws
* gumbel01: ``-log(-log(u))``
* integers(n): ``w % n`` (bias below n / 2**64)
"""
import hashlib
import math

import numpy as np

from ..errors import ContractViolation

_MASK64 = (1 << 64) - 1
_DRAW_KINDS = ("u64", "uniform01", "standard-normal", "gumbel01")


class RngStream:
    def __init__(self, seed, label="", counter=0):
        self.seed = int(seed) & _MASK64
        self.label = str(label)
        self.counter = int(counter)
        digest = hashlib.blake2b(f"{self.seed}:{self.label}".encode(), digest_size=16).digest()
        self._key = np.frombuffer(digest, dtype="<u8").copy()

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"

    def child(self, label):
        """Independent stream namespaced under this one's label."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def raw(self, n):
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        ctr = np.zeros(4, dtype=np.uint64)
        ctr[0] = self.counter & _MASK64
        ctr[1] = self.counter >> 64
        words = np.random.Philox(key=self._key, counter=ctr).random_raw(n)
        self.counter += -(-n // 4)
        return np.asarray(words, dtype=np.uint64)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n)
        z = np.sqrt(-2.0 * np.log(u[:n])) * np.cos(2.0 * np.pi * u[n:])
        return float(z[0]) if size is None else z.reshape(size)

    def gumbel(self, size=None):
        u = self.uniform(size)
        if size is None:
            return -math.log(-math.log(u))
        return -np.log(-np.log(u))

    def integers(self, n, size=None):
        if n <= 0:
            raise ContractViolation("integers needs n >= 1")
        k = 1 if size is None else int(np.prod(size))
        v = (self.raw(k) % np.uint64(n)).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(size)

    def permutation(self, n):
        return np.argsort(self.uniform(int(n)) if n else np.zeros(0), kind="stable")

    def choice(self, n, k):
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        if k > n:
            raise ContractViolation(f"cannot choose {k} of {n}")
        return self.permutation(n)[:k]

    def poisson(self, lam):
        # Knuth's multiplication method; fine for the small rates used here
        limit = math.exp(-lam)
        k, p = 0, 1.0
        while True:
            for u in self.uniform(8):
                p *= u
                if p <= limit:
                    return k
                k += 1


def rng_draw(stream, kind):
    """Single draw of ``kind`` in {u64, uniform01, standard-normal, gumbel01}."""
    if kind == "u64":
        return int(stream.raw(1)[0])
    if kind == "uniform01":
        return stream.uniform()
    if kind == "standard-normal":
        return stream.normal()
    if kind == "gumbel01":
        return stream.gumbel()
    raise ContractViolation(f"unknown draw kind {kind!r}; expected one of {_DRAW_KINDS}")
