"""NumPy fallback for the sweep kernel.

Same fixed-point iteration as the compiled kernel, written with the
bus-to-path incidence matrix so that each sweep is two matrix products.
"""
from functools import lru_cache

import numpy as np

CONVERGED, MAX_ITER, DIVERGED = 0, 1, 2


@lru_cache(maxsize=32)
def _path_matrix(parent_bytes: bytes, n: int) -> np.ndarray:
    parent = np.frombuffer(parent_bytes, dtype=np.intp)
    # path[k, j] = 1 when bus j lies on the path from the slack to bus k
    path = np.zeros((n, n))
    path[0, 0] = 1.0
    for k in range(1, n):
        path[k] = path[parent[k]]
        path[k, k] = 1.0
    path.setflags(write=False)
    return path


def sweep(parent, z, s_load, v0, tol, max_iter, v_floor):
    parent = np.ascontiguousarray(parent, dtype=np.intp)
    s_load = np.atleast_2d(np.asarray(s_load, dtype=np.complex128))
    n_rows, n = s_load.shape
    path = _path_matrix(parent.tobytes(), n)
    V = np.full((n_rows, n), v0, dtype=np.complex128)
    J = np.zeros((n_rows, n), dtype=np.complex128)
    iters = np.zeros(n_rows, dtype=np.int64)
    status = np.full(n_rows, MAX_ITER, dtype=np.int64)
    active = np.ones(n_rows, dtype=bool)
    for it in range(max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        Va = V[rows]
        Ja = np.conj(s_load[rows] / Va) @ path
        Vnew = v0 - (Ja * z) @ path.T
        Vnew[:, 0] = v0
        with np.errstate(invalid="ignore"):
            dv = np.max(np.abs(Vnew - Va), axis=1)
            mags = np.abs(Vnew)
            bad = np.any((mags < v_floor) | np.isnan(mags), axis=1) | np.isnan(dv)
        V[rows] = Vnew
        J[rows] = Ja
        done = bad | (dv < tol)
        status[rows[bad]] = DIVERGED
        status[rows[~bad & done]] = CONVERGED
        iters[rows[done]] = it + 1
        active[rows[done]] = False
    iters[active] = max_iter
    return V, J, iters, status
