"""Pure-Python implementation of the structure-function kernel.

Used when the compiled extension is missing or ``HDIVSTAT_PURE_PYTHON`` is set.
Cells are visited in the same order as the compiled kernel; the neighbour
block of each cell is handled with numpy.
"""
from __future__ import annotations

import numpy as np


def structure_sum(cell_start, area, cx, cy, vx, vy, nx: int, ny: int, r: float, p: float) -> float:
    """Un-rooted single-sample structure function over interior cells.

    Element data are packed cell by cell; the elements of cell ``c = j * nx + i``
    occupy ``cell_start[c]:cell_start[c + 1]``.
    """
    total = 0.0
    for j in range(1, ny - 1):
        for i in range(1, nx - 1):
            c = j * nx + i
            a0, a1 = cell_start[c], cell_start[c + 1]
            if a0 == a1:
                continue
            nb = np.concatenate([np.arange(cell_start[jj * nx + ii], cell_start[jj * nx + ii + 1])
                                 for jj in (j - 1, j, j + 1) for ii in (i - 1, i, i + 1)])
            inside = ((np.abs(cx[a0:a1, None] - cx[None, nb]) <= r)
                      & (np.abs(cy[a0:a1, None] - cy[None, nb]) <= r))
            diff = (np.abs(vx[a0:a1, None] - vx[None, nb]) ** p
                    + np.abs(vy[a0:a1, None] - vy[None, nb]) ** p)
            wts = np.where(inside, area[None, nb], 0.0)
            s = (wts * diff).sum(axis=1)
            w = wts.sum(axis=1)
            total += float((area[a0:a1] * (s / w)).sum())
    return total
