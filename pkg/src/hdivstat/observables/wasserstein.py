"""Exact discrete optimal transport and ensemble Wasserstein distances.

Equal-weight atom sets are matched with ``linear_sum_assignment`` (an optimal
assignment is an optimal plan for uniform measures, after replicating atoms
to a common count); general weights go through the transportation LP.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

WEIGHT_TOL = 1e-12
MAX_REPLICATED = 4096


class InvalidMeasureError(ValueError):
    pass


def _check_weights(w: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise InvalidMeasureError("one weight per atom required")
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise InvalidMeasureError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    return w


def _is_uniform(w: Optional[np.ndarray]) -> bool:
    return w is None or np.allclose(w, w[0], rtol=0, atol=1e-15)


def emd(a, b, a_weights=None, b_weights=None, p: float = 1.0) -> float:
    """``W_p`` between two weighted atom sets in ``R^d`` (Euclidean ground cost)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("atoms must have the same dimension")
    if len(a) == 0 or len(b) == 0:
        raise InvalidMeasureError("empty measure")
    wa = _check_weights(a_weights, len(a))
    wb = _check_weights(b_weights, len(b))
    cost = cdist(a, b) ** p
    if _is_uniform(wa) and _is_uniform(wb):
        n, m = len(a), len(b)
        L = n * m // gcd(n, m)
        if L <= MAX_REPLICATED:
            C = np.repeat(np.repeat(cost, L // n, axis=0), L // m, axis=1)
            rows, cols = linear_sum_assignment(C)
            value = C[rows, cols].sum() / L
            return float(max(value, 0.0) ** (1.0 / p))
        wa = np.full(n, 1.0 / n) if wa is None else wa
        wb = np.full(m, 1.0 / m) if wb is None else wb
    wa = np.full(len(a), 1.0 / len(a)) if wa is None else wa
    wb = np.full(len(b), 1.0 / len(b)) if wb is None else wb
    return float(max(transport_lp(cost, wa, wb), 0.0) ** (1.0 / p))


def transport_lp(cost: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> float:
    """Optimal value of the transportation problem with marginals ``wa``, ``wb``."""
    n, m = cost.shape
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    cols = np.zeros((m, n * m))
    for j in range(m):
        cols[j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([wa, wb]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


# --------------------------------------------------------------------------
# ensemble distances
# --------------------------------------------------------------------------
@dataclass
class WassersteinResult:
    w1: float
    w2: float
    n_points: int
    n_pairs: int

    def rows(self) -> list:
        return [("W1", self.w1), ("W2", self.w2)]


def overlay_points(domain, n: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Cell centres of an ``n x n`` overlay grid and their equal quadrature weights."""
    xs = domain.x1_left + (np.arange(n) + 0.5) * domain.width / n
    ys = domain.x2_left + (np.arange(n) + 0.5) * domain.height / n
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts, np.full(len(pts), domain.area / len(pts))


def random_pairs(n_points: int, n_pairs: int = 256, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, n_points, size=(n_pairs, 2))


def _values(ens, points: np.ndarray) -> np.ndarray:
    """Member velocities at ``points``, shape ``(M, n, 2)``."""
    space = ens.space
    els, refs = space.mesh.locate(points)
    return space.evaluate(ens.coefficients(), els, refs)


def wasserstein_distances(ensA, ensB, eval_points=None, eval_weights=None, pair_points=None,
                          n_grid: int = 16, n_pairs: int = 256, seed: int = 0,
                          magnitude: bool = False) -> WassersteinResult:
    """1-point and 2-point ``W_1`` distances integrated over the domain.

    ``eval_points`` default to the centres of an ``n_grid x n_grid`` overlay;
    ``pair_points`` are index pairs into ``eval_points`` (default: ``n_pairs``
    seeded random pairs), and the 2-point integral over ``D x D`` is
    ``|D|^2`` times the mean over those pairs.  With ``magnitude`` the atoms
    are speeds ``|u|`` instead of velocity vectors.
    """
    domain = ensA.mesh.bounding_box()
    if eval_points is None:
        eval_points, eval_weights = overlay_points(domain, n_grid)
    eval_points = np.atleast_2d(np.asarray(eval_points, dtype=float))
    if len(eval_points) == 0:
        raise ValueError("no evaluation points")
    if eval_weights is None:
        eval_weights = np.full(len(eval_points), domain.area / len(eval_points))
    if pair_points is None:
        pair_points = random_pairs(len(eval_points), n_pairs, seed)
    pair_points = np.atleast_2d(np.asarray(pair_points, dtype=np.int64))
    if pair_points.size == 0:
        raise ValueError("no evaluation pairs")
    va = _values(ensA, eval_points)
    vb = _values(ensB, eval_points)
    if magnitude:
        va = np.linalg.norm(va, axis=2, keepdims=True)
        vb = np.linalg.norm(vb, axis=2, keepdims=True)
    w1 = sum(wt * emd(va[:, k], vb[:, k]) for k, wt in enumerate(eval_weights))
    d2 = [emd(np.concatenate([va[:, x], va[:, y]], axis=1), np.concatenate([vb[:, x], vb[:, y]], axis=1))
          for x, y in pair_points]
    w2 = domain.area ** 2 * float(np.mean(d2))
    return WassersteinResult(float(w1), w2, len(eval_points), len(pair_points))
