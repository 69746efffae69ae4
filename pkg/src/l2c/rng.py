from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; streams are stable across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))
