"""Counters for the homomorphic operations a simulated inference performs."""

from dataclasses import asdict, dataclass

# Per-operation latency weights (milliseconds) for the latency proxy. The
# addition and ciphertext-plaintext multiplication figures are SEAL CKKS
# timings at N=32768; rotation and relinearization are key switches and cost
# about as much as a ciphertext-ciphertext multiplication.
LATENCY_WEIGHTS_MS = {
    "add": 0.013,
    "mul": 0.061,
    "rot": 0.79,
    "relin": 0.79,
}


@dataclass
class OpCounts:
    """Add/Mul/Rot/Relin counters; only ever incremented during a simulation."""

    add: int = 0
    mul: int = 0
    rot: int = 0
    relin: int = 0

    def __add__(self, other):
        return OpCounts(
            self.add + other.add,
            self.mul + other.mul,
            self.rot + other.rot,
            self.relin + other.relin,
        )

    def as_dict(self):
        return asdict(self)

    def latency_proxy(self, weights=None):
        """Weighted op count standing in for wall-clock HE latency (ms)."""
        weights = weights or LATENCY_WEIGHTS_MS
        return sum(weights[op] * count for op, count in self.as_dict().items())


def reduction(before, after):
    """Fractional reduction per op type, e.g. 0.94 for 23,869 -> 1,412 muls."""
    out = {}
    for op, count in before.as_dict().items():
        new = getattr(after, op)
        out[op] = 0.0 if count == 0 else 1.0 - new / count
    return out
