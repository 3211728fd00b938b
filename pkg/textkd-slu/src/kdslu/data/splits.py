"""Low-resource split protocol."""

from typing import Sequence, TypeVar

import numpy as np

from kdslu.exceptions import ConfigValidationError

T = TypeVar("T")


def make_low_resource_splits(train: Sequence[T], parts: int, seed: int) -> list[list[T]]:
    """
    Randomly partition a training set into `parts` disjoint subsets.

    Subset sizes differ by at most one; each subset serves alone as a
    low-resource training set.
    """
    if parts < 2:
        raise ConfigValidationError("ablation.parts", "Must be at least 2")
    if len(train) < parts:
        raise ConfigValidationError(
            "ablation.parts", f"Cannot split {len(train)} items into {parts} parts"
        )
    order = np.random.default_rng(seed).permutation(len(train))
    return [[train[int(i)] for i in chunk] for chunk in np.array_split(order, parts)]
