"""Shared fixture builders for the test modules."""

import numpy as np


def random_series(rng: np.random.Generator, n_max: int = 64) -> np.ndarray:
    """Piecewise-constant levels plus noise; a third of the draws are pure noise."""
    n = int(rng.integers(4, n_max + 1))
    kind = rng.integers(3)
    y = rng.normal(0.0, 1.0, n)
    if kind > 0:
        k = int(rng.integers(1, 4))
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(k, n - 1), replace=False))
        levels = rng.normal(0.0, 4.0, len(cuts) + 1)
        y += np.repeat(levels, np.diff(np.concatenate(([0], cuts, [n]))))
    if kind == 2:
        y = np.round(y)  # ties and exact repeats
    return y
