# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backward/forward sweep over a batch of load patterns."""
import numpy as np

from libc.math cimport sqrt, isnan

DEF CONVERGED = 0
DEF MAX_ITER = 1
DEF DIVERGED = 2


cdef inline double cmod(double complex c) nogil:
    return sqrt(c.real * c.real + c.imag * c.imag)


def sweep(const Py_ssize_t[::1] parent,
          const double complex[::1] z,
          const double complex[:, ::1] s_load,
          double v0, double tol, int max_iter, double v_floor):
    """Solve every row of ``s_load`` (p.u. consumption, BFS order).

    Returns ``(V, J, iterations, status)`` where ``J[:, k]`` is the current
    from ``parent[k]`` into bus ``k`` and ``J[:, 0]`` the total slack current.
    """
    cdef Py_ssize_t n_rows = s_load.shape[0]
    cdef Py_ssize_t n = s_load.shape[1]
    V_arr = np.empty((n_rows, n), dtype=np.complex128)
    J_arr = np.zeros((n_rows, n), dtype=np.complex128)
    it_arr = np.zeros(n_rows, dtype=np.int64)
    st_arr = np.zeros(n_rows, dtype=np.int64)
    cdef double complex[:, ::1] V = V_arr
    cdef double complex[:, ::1] J = J_arr
    cdef long long[::1] iters = it_arr
    cdef long long[::1] status = st_arr
    cdef Py_ssize_t r, k
    cdef int it
    cdef double dv, d, mag
    cdef double complex vnew, s, v
    cdef long long state

    with nogil:
        for r in range(n_rows):
            for k in range(n):
                V[r, k] = v0
            state = MAX_ITER
            for it in range(max_iter):
                for k in range(n):
                    s = s_load[r, k]
                    v = V[r, k]
                    J[r, k] = (s / v).conjugate()
                for k in range(n - 1, 0, -1):
                    J[r, parent[k]] = J[r, parent[k]] + J[r, k]
                dv = 0.0
                for k in range(1, n):
                    vnew = V[r, parent[k]] - z[k] * J[r, k]
                    d = cmod(vnew - V[r, k])
                    if d > dv or isnan(d):
                        dv = d
                    V[r, k] = vnew
                    mag = cmod(vnew)
                    if mag < v_floor or isnan(mag):
                        state = DIVERGED
                if state == DIVERGED:
                    iters[r] = it + 1
                    break
                if dv < tol:
                    state = CONVERGED
                    iters[r] = it + 1
                    break
            if state == MAX_ITER:
                iters[r] = max_iter
            status[r] = state
    return V_arr, J_arr, it_arr, st_arr
