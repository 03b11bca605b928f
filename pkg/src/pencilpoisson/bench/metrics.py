from __future__ import annotations

import numpy as np

from ..pencil import DistributedField, LayoutMismatch


def mean_difference(p1: DistributedField, p2: DistributedField, comm) -> float:
    """Mean absolute difference per element after removing each field's global mean."""
    if p1.layout != p2.layout or p1.rank != p2.rank:
        raise LayoutMismatch("mean_difference needs both fields in the same layout")
    n = p1.layout.grid.size
    s1, s2 = comm.allreduce_sum([p1.values.sum(), p2.values.sum()])
    diff = (p1.values - s1 / n) - (p2.values - s2 / n)
    total, = comm.allreduce_sum([np.abs(diff).sum()])
    return float(total / n)
