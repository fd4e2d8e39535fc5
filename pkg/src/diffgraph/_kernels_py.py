"""Pure-Python/numpy implementations of the hot kernels.

These are the reference behaviour; the compiled ``_kernels`` extension must
agree with them bit-for-bit on hashing and to rounding on rewards.
"""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def batch_rewards(shares: np.ndarray, proj_outputs: np.ndarray,
                  proj_target: np.ndarray, tau: float) -> np.ndarray:
    """Mean-of-metrics reward for many mixing-share vectors at once.

    shares: (G, n) per-expert shares; proj_outputs: (n, K, q) metric
    projections of each expert's stand-alone output; proj_target: (K, q).
    Returns (G,) rewards ``mean_k exp(-||sum_i s_i Y_ik - T_k|| / tau)``.
    """
    shares = np.asarray(shares, dtype=np.float64)
    n, K, q = proj_outputs.shape
    mixed = shares @ proj_outputs.reshape(n, K * q)
    diff = mixed.reshape(-1, K, q) - proj_target[None]
    dist = np.sqrt(np.einsum("gkq,gkq->gk", diff, diff))
    return np.exp(-dist / tau).mean(axis=1)
