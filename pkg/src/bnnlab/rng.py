"""Deterministic pseudo-randomness for every stochastic site in the package.

A RandomStream is a bank of xoshiro256** generators stepped in lockstep, with
normals produced by the Box-Muller transform.  Streams are created from
explicit 64-bit seeds, and child seeds are derived by hashing labels against a
master seed, so any run in the package can be reproduced bit-for-bit.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_INV53 = float(2.0**-53)


def derive_seed(master: int, *parts) -> int:
    """Hash `parts` against a master seed into an independent 64-bit seed.

    Used to give every run site (weight init, per-batch noise, per-grid-point
    attack, ...) its own stream.  Parts may be ints, floats, or strings; their
    repr feeds the hash, so floats must be passed as the exact value used.
    """
    h = hashlib.sha256()
    h.update((int(master) & _MASK).to_bytes(8, "little"))
    for p in parts:
        h.update(b"\x1f")
        h.update(repr(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _splitmix_sequence(seed: int, n: int) -> np.ndarray:
    """First n outputs of splitmix64 seeded with `seed` (counter form)."""
    base = np.uint64(seed & _MASK)
    idx = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
    return _mix64(base + idx)


def counter_uniforms(key: int, offsets: np.ndarray) -> np.ndarray:
    """Stateless uniforms in [0, 1) indexed by integer offsets.

    offsets -> values is a pure function of (key, offset), so per-example
    randomness stays identical no matter how a batch is chunked or ordered.
    """
    off = np.asarray(offsets, dtype=np.uint64)
    v = _mix64(np.uint64(key & _MASK) + (off + np.uint64(1)) * _GOLDEN)
    return (v >> np.uint64(11)).astype(np.float64) * _INV53


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class RandomStream:
    """xoshiro256** generator bank: LANES streams advanced together.

    Outputs interleave lane-major per step; the lane count is part of the
    output contract and must never change once results are frozen.
    """

    LANES = 1024

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        st = _splitmix_sequence(self.seed, 4 * self.LANES).reshape(4, self.LANES)
        self._s = [st[0].copy(), st[1].copy(), st[2].copy(), st[3].copy()]

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 outputs."""
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        steps = -(-n // self.LANES)
        block = np.empty((steps, self.LANES), dtype=np.uint64)
        for i in range(steps):
            block[i] = self._step()
        return block.reshape(-1)[:n]

    def uniform(self, shape=None, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniforms in [lo, hi); scalar array semantics follow numpy."""
        shape = () if shape is None else shape
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV53
        u = lo + u * (hi - lo)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        shape = () if shape is None else shape
        n = int(np.prod(shape)) if shape else 1
        m = -(-n // 2)
        raws = self.raw(2 * m)
        # u1 in (0, 1] keeps log finite; u2 in [0, 1)
        u1 = ((raws[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (raws[m:] >> np.uint64(11)).astype(np.float64) * _INV53
        r = np.sqrt(-2.0 * np.log(u1))
        a = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(a), r * np.sin(a)])[:n]
        z = mean + std * z
        return z.reshape(shape) if shape else z[0]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
