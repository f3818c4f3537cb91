"""Deterministic seed derivation for nested simulation components."""

from __future__ import annotations

import numpy as np


def derive_seed(*keys: int) -> int:
    """Collapse an integer key path into a stable 64-bit seed."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    out = ss.generate_state(2, dtype=np.uint32)
    return int(out[0]) | (int(out[1]) << 32)
