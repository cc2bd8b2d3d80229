"""Time the compiled structure-function kernel against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py [--n 64 128] [--repeat 3]``.
"""
import argparse
import timeit

import numpy as np

from hdivstat._kernels import _fallback
from hdivstat.mesh import Rectangle, generate_uniform_quad_mesh
from hdivstat.observables.structure import grid_size, make_hash_table, update_hash_table

try:
    from hdivstat._kernels import _structure as compiled
except ImportError:
    compiled = None


def packed(grid):
    v = grid.velocities
    return (grid.cell_start, grid.areas, np.ascontiguousarray(grid.centroids[:, 0]),
            np.ascontiguousarray(grid.centroids[:, 1]), np.ascontiguousarray(v[:, 0]),
            np.ascontiguousarray(v[:, 1]), int(grid.nx), int(grid.ny))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[32, 64, 128])
    ap.add_argument("--r", type=float, default=0.05)
    ap.add_argument("--p", type=float, default=2.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    unit = Rectangle(0.0, 1.0, 0.0, 1.0)
    rng = np.random.default_rng(0)
    print(f"{'n':>6} {'elements':>9} {'python [s]':>11} {'cython [s]':>11} {'speedup':>8} {'rel diff':>9}")
    for n in args.n:
        mesh = generate_uniform_quad_mesh(n, n)
        nx, ny = grid_size(unit, args.r)
        grid = update_hash_table(make_hash_table(unit, mesh, nx, ny), rng.standard_normal((mesh.n_elements, 2)))
        data = packed(grid) + (args.r, args.p)
        t_py = min(timeit.repeat(lambda: _fallback.structure_sum(*data), number=1, repeat=args.repeat))
        ref = _fallback.structure_sum(*data)
        if compiled is None:
            print(f"{n:>6} {mesh.n_elements:>9} {t_py:>11.4f} {'n/a':>11}")
            continue
        t_cy = min(timeit.repeat(lambda: compiled.structure_sum(*data), number=1, repeat=args.repeat))
        diff = abs(compiled.structure_sum(*data) - ref) / abs(ref)
        print(f"{n:>6} {mesh.n_elements:>9} {t_py:>11.4f} {t_cy:>11.4f} {t_py / t_cy:>8.1f} {diff:>9.1e}")


if __name__ == "__main__":
    main()
