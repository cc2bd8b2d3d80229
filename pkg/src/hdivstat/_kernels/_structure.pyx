# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled structure-function kernel (same contract as ``_fallback``)."""
from libc.math cimport fabs, pow
from libc.stdint cimport int64_t

import numpy as np


cdef inline double _power(double x, double p, int ip) nogil:
    if ip == 1:
        return x
    if ip == 2:
        return x * x
    if ip == 3:
        return x * x * x
    return pow(x, p)


def structure_sum(const int64_t[::1] cell_start, const double[::1] area,
                  const double[::1] cx, const double[::1] cy,
                  const double[::1] vx, const double[::1] vy,
                  int nx, int ny, double r, double p):
    cdef double total = 0.0, s, w, dx, dy
    cdef Py_ssize_t i, j, ii, jj, a, b, c, cn
    cdef int ip = <int>p if p == <int>p else -1
    with nogil:
        for j in range(1, ny - 1):
            for i in range(1, nx - 1):
                c = j * nx + i
                for a in range(cell_start[c], cell_start[c + 1]):
                    s = 0.0
                    w = 0.0
                    for jj in range(j - 1, j + 2):
                        for ii in range(i - 1, i + 2):
                            cn = jj * nx + ii
                            for b in range(cell_start[cn], cell_start[cn + 1]):
                                dx = fabs(cx[a] - cx[b])
                                dy = fabs(cy[a] - cy[b])
                                if dx <= r and dy <= r:
                                    s += area[b] * (_power(fabs(vx[a] - vx[b]), p, ip)
                                                    + _power(fabs(vy[a] - vy[b]), p, ip))
                                    w += area[b]
                    total += area[a] * (s / w)
    return total
