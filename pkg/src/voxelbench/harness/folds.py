"""Cross-validation fold assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_folds(case_ids, k: int = 5, seed: int = 0, independent_draws: bool = False):
    """Seeded k-fold partition; remainders go to the earliest folds.

    With ``independent_draws`` every fold draws its own random test set of
    ``round(n / k)`` cases, so a case may be tested in several folds or none.
    """
    ids = list(case_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise DataError("case ids must be unique")
    if k < 2:
        raise DataError(f"need at least 2 folds, got {k}")
    if n < k:
        raise DataError(f"{n} cases cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    folds = []
    if independent_draws:
        size = max(1, int(round(n / k)))
        for f in range(k):
            pick = set(rng.permutation(n)[:size].tolist())
            test = tuple(ids[i] for i in range(n) if i in pick)
            train = tuple(ids[i] for i in range(n) if i not in pick)
            folds.append(FoldAssignment(f, train, test))
        return folds
    order = rng.permutation(n)
    base, extra = divmod(n, k)
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        test_idx = set(order[start : start + size].tolist())
        start += size
        test = tuple(ids[i] for i in range(n) if i in test_idx)
        train = tuple(ids[i] for i in range(n) if i not in test_idx)
        folds.append(FoldAssignment(f, train, test))
    return folds
