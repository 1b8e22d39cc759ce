"""Counter-based normal variates: Philox4x64-10 keyed by (seed, path, draw).

Each (path, step, component) draw is a pure function of the 64-bit seed, so
estimates are reproducible independent of chunking or thread scheduling. The
round function matches numpy's Philox bit-for-bit (numpy pre-increments its
counter before the first block; the tests account for that).
"""

from __future__ import annotations

import numpy as np

__all__ = ["philox4x64", "normals"]

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_KEY_SALT = np.uint64(0x4C44504C41420A31)  # fixed second key word
_CTR_SALT = np.uint64(0x243F6A8885A308D3)  # fixed third counter word

_INV_2_53 = float(2.0**-53)


def _mulhilo64(a, b):
    """Full 64x64 -> 128 bit product via 32-bit limbs; returns (hi, lo)."""
    al = a & _MASK32
    ah = a >> np.uint64(32)
    bl = b & _MASK32
    bh = b >> np.uint64(32)
    ll = al * bl
    lh = al * bh
    hl = ah * bl
    mid = (ll >> np.uint64(32)) + (lh & _MASK32) + (hl & _MASK32)
    lo = (ll & _MASK32) | ((mid & _MASK32) << np.uint64(32))
    hi = ah * bh + (lh >> np.uint64(32)) + (hl >> np.uint64(32)) + (mid >> np.uint64(32))
    return hi, lo


def philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on broadcastable uint64 counter arrays."""
    c0 = np.asarray(c0, dtype=np.uint64)
    c1 = np.asarray(c1, dtype=np.uint64)
    c2 = np.asarray(c2, dtype=np.uint64)
    c3 = np.asarray(c3, dtype=np.uint64)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo64(_M0, c0)
            hi1, lo1 = _mulhilo64(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            k0 = k0 + _W0
            k1 = k1 + _W1
    return c0, c1, c2, c3


def _uniform_open(words: np.ndarray) -> np.ndarray:
    """uint64 -> double in (0, 1] (safe for log)."""
    return (np.right_shift(words, np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53


def _uniform_halfopen(words: np.ndarray) -> np.ndarray:
    """uint64 -> double in [0, 1)."""
    return np.right_shift(words, np.uint64(11)).astype(np.float64) * _INV_2_53


def normals(seed: int, paths: np.ndarray, n_steps: int, d: int) -> np.ndarray:
    """Standard normals of shape (len(paths), n_steps, d).

    Draw q = step*d + component of path p comes from Philox block
    (p, q//2, salt, 0) under key (seed, salt'); Box-Muller uses the block's
    first two words, the cosine branch for even q and the sine branch for
    odd q, so consecutive draws share one block.
    """

    paths = np.asarray(paths, dtype=np.uint64)
    nq = n_steps * d
    nb = (nq + 1) // 2
    c0 = paths[:, None]
    c1 = np.arange(nb, dtype=np.uint64)[None, :]
    key = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    w0, w1, _, _ = philox4x64(c0, c1, _CTR_SALT, np.uint64(0), key, _KEY_SALT)
    u1 = _uniform_open(w0)
    u2 = _uniform_halfopen(w1)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = (2.0 * np.pi) * u2
    z = np.empty((paths.shape[0], 2 * nb))
    z[:, 0::2] = r * np.cos(ang)
    z[:, 1::2] = r * np.sin(ang)
    return z[:, :nq].reshape(paths.shape[0], n_steps, d)
