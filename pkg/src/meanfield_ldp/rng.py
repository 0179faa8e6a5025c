"""Counter-based random numbers for reproducible parallel simulation.

Implements the Philox4x32-10 block cipher (Salmon et al., SC'11) with a
fixed counter layout, so that the Gaussian increment used by particle j at
step i of replica r is a pure function of (master_seed, r, j, i).  Replica,
particle, and step streams can therefore be generated in any order, on any
number of workers, with bit-identical results.

Counter words:  (step, particle, sub-block, replica); key words hold the
64-bit master seed.  Each 128-bit block yields two standard normals via
Box-Muller, and sub-blocks extend the draw to m > 2 noise components.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x32-10"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_INV53 = 2.0**-53


def philox4x32(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Apply the 10-round Philox4x32 bijection to an array of counters.

    counter: uint32 array of shape (..., 4).  Returns uint32 of the same
    shape.  Matches the Random123 reference known-answer vectors.
    """
    c = counter.astype(np.uint64)
    c0, c1, c2, c3 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    k0 = np.uint64(key[0] & 0xFFFFFFFF)
    k1 = np.uint64(key[1] & 0xFFFFFFFF)
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> np.uint64(32)) ^ c1 ^ k0) & _MASK32
        n1 = p1 & _MASK32
        n2 = ((p0 >> np.uint64(32)) ^ c3 ^ k1) & _MASK32
        n3 = p0 & _MASK32
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _uniforms_from_blocks(blocks: np.ndarray) -> np.ndarray:
    """Map uint32 blocks (..., 4) to open-interval uniforms (..., 2)."""
    b = blocks.astype(np.uint64)
    hi = (b[..., 0] << np.uint64(32)) | b[..., 1]
    lo = (b[..., 2] << np.uint64(32)) | b[..., 3]
    u = np.stack([hi, lo], axis=-1)
    return ((u >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def _key_from_seed(master_seed: int) -> tuple[int, int]:
    s = int(master_seed) & 0xFFFFFFFFFFFFFFFF
    return s & 0xFFFFFFFF, s >> 32


def normal_increments(
    master_seed: int,
    replica: int,
    n_particles: int,
    n_steps: int,
    m: int,
    *,
    step_offset: int = 0,
) -> np.ndarray:
    """Standard-normal draws keyed by (seed, replica, particle, step).

    Returns an array of shape (n_particles, n_steps, m).  Entry (j, i, :)
    depends only on the key tuple, never on n_particles or n_steps, so a
    run with more particles or a longer horizon extends the same streams.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    nb = (m + 1) // 2
    key = _key_from_seed(master_seed)
    steps = np.arange(step_offset, step_offset + n_steps, dtype=np.uint32)
    particles = np.arange(n_particles, dtype=np.uint32)
    sub = np.arange(nb, dtype=np.uint32)
    ctr = np.empty((n_particles, n_steps, nb, 4), dtype=np.uint32)
    ctr[..., 0] = steps[None, :, None]
    ctr[..., 1] = particles[:, None, None]
    ctr[..., 2] = sub[None, None, :]
    ctr[..., 3] = np.uint32(replica & 0xFFFFFFFF)
    u = _uniforms_from_blocks(philox4x32(ctr, key))
    r = np.sqrt(-2.0 * np.log(u[..., 0]))
    theta = 2.0 * np.pi * u[..., 1]
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    z = z.reshape(n_particles, n_steps, 2 * nb)
    return np.ascontiguousarray(z[..., :m])
