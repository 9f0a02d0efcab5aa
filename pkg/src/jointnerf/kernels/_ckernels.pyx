# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray compositing and nearest-neighbor kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, floor, sqrt

cnp.import_array()


def composite_forward(sigma_in, rgb_in, ts_in, double cap):
    cdef double[:, ::1] sigma = np.ascontiguousarray(sigma_in, dtype=np.float64)
    cdef double[:, :, ::1] rgb = np.ascontiguousarray(rgb_in, dtype=np.float64)
    cdef double[:, ::1] ts = np.ascontiguousarray(ts_in, dtype=np.float64)
    cdef Py_ssize_t R = ts.shape[0], S = ts.shape[1], r, i
    out_a = np.zeros((R, 5))
    w_a = np.empty((R, S))
    tr_a = np.empty((R, S))
    cdef double[:, ::1] out = out_a
    cdef double[:, ::1] w = w_a
    cdef double[:, ::1] tr = tr_a
    cdef double acc, tau, delta, wi
    for r in range(R):
        acc = 0.0
        for i in range(S):
            delta = ts[r, i + 1] - ts[r, i] if i < S - 1 else cap
            tau = sigma[r, i] * delta
            tr[r, i] = exp(-acc)
            wi = tr[r, i] * -expm1(-tau)
            w[r, i] = wi
            acc += tau
            out[r, 0] += wi * rgb[r, i, 0]
            out[r, 1] += wi * rgb[r, i, 1]
            out[r, 2] += wi * rgb[r, i, 2]
            out[r, 3] += wi * ts[r, i]
            out[r, 4] += wi
    return out_a, w_a, tr_a


def composite_backward(g_in, sigma_in, rgb_in, ts_in, double cap, w_in, tr_in):
    cdef double[:, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef double[:, ::1] sigma = np.ascontiguousarray(sigma_in, dtype=np.float64)
    cdef double[:, :, ::1] rgb = np.ascontiguousarray(rgb_in, dtype=np.float64)
    cdef double[:, ::1] ts = np.ascontiguousarray(ts_in, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[:, ::1] tr = np.ascontiguousarray(tr_in, dtype=np.float64)
    cdef Py_ssize_t R = ts.shape[0], S = ts.shape[1], r, i
    ds_a = np.empty((R, S))
    dc_a = np.empty((R, S, 3))
    dt_a = np.zeros((R, S))
    cdef double[:, ::1] ds = ds_a
    cdef double[:, :, ::1] dc = dc_a
    cdef double[:, ::1] dt = dt_a
    cdef double tail, q, delta, dtau, ddelta
    for r in range(R):
        tail = 0.0
        for i in range(S - 1, -1, -1):
            delta = ts[r, i + 1] - ts[r, i] if i < S - 1 else cap
            q = (g[r, 0] * rgb[r, i, 0] + g[r, 1] * rgb[r, i, 1]
                 + g[r, 2] * rgb[r, i, 2] + g[r, 3] * ts[r, i] + g[r, 4])
            dtau = q * tr[r, i] * exp(-sigma[r, i] * delta) - tail
            tail += q * w[r, i]
            ds[r, i] = dtau * delta
            dc[r, i, 0] = g[r, 0] * w[r, i]
            dc[r, i, 1] = g[r, 1] * w[r, i]
            dc[r, i, 2] = g[r, 2] * w[r, i]
            dt[r, i] += g[r, 3] * w[r, i]
            if i < S - 1:
                ddelta = dtau * sigma[r, i]
                dt[r, i + 1] += ddelta
                dt[r, i] -= ddelta
    return ds_a, dc_a, dt_a


cdef inline Py_ssize_t _clampi(Py_ssize_t v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def nearest_neighbors(query_in, ref_in):
    """Grid-hash nearest neighbor search; ties go to the smallest index."""
    cdef double[:, ::1] q = np.ascontiguousarray(query_in, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(ref_in, dtype=np.float64)
    cdef Py_ssize_t M = q.shape[0], N = p.shape[0]
    if N == 0:
        raise ValueError("empty reference cloud")
    lo_a = np.min(ref_in, axis=0).astype(np.float64)
    hi_a = np.max(ref_in, axis=0).astype(np.float64)
    cdef double ext = max(float(np.max(hi_a - lo_a)), 1e-12)
    # at most 256 cells per axis so the ring bound stays exact
    cdef double h = max(ext / max(1.0, floor(sqrt(<double>N))), ext / 255.0)
    dims_a = np.floor((hi_a - lo_a) / h).astype(np.int64) + 1
    cdef Py_ssize_t nx = dims_a[0], ny = dims_a[1], nz = dims_a[2]
    cdef double ox = lo_a[0], oy = lo_a[1], oz = lo_a[2]
    cdef Py_ssize_t n_cells = nx * ny * nz
    cell_a = np.empty(N, dtype=np.int64)
    cdef cnp.int64_t[::1] cell = cell_a
    cdef Py_ssize_t j, k, cx, cy, cz
    for j in range(N):
        cx = _clampi(<Py_ssize_t>floor((p[j, 0] - ox) / h), nx - 1)
        cy = _clampi(<Py_ssize_t>floor((p[j, 1] - oy) / h), ny - 1)
        cz = _clampi(<Py_ssize_t>floor((p[j, 2] - oz) / h), nz - 1)
        cell[j] = (cx * ny + cy) * nz + cz
    order_a = np.argsort(cell_a, kind="stable")
    start_a = np.searchsorted(cell_a[order_a], np.arange(n_cells + 1))
    cdef cnp.int64_t[::1] order = order_a
    cdef cnp.int64_t[::1] start = start_a
    idx_a = np.empty(M, dtype=np.int64)
    d2_a = np.empty(M)
    cdef cnp.int64_t[::1] idx = idx_a
    cdef double[::1] d2 = d2_a
    cdef Py_ssize_t m, ring, max_ring, ix, iy, iz, x0, x1, y0, y1, z0, z1, c, s
    cdef Py_ssize_t best_j
    cdef double best, bound, dx, dy, dz, dd
    max_ring = max(nx, ny, nz)
    for m in range(M):
        cx = _clampi(<Py_ssize_t>floor((q[m, 0] - ox) / h), nx - 1)
        cy = _clampi(<Py_ssize_t>floor((q[m, 1] - oy) / h), ny - 1)
        cz = _clampi(<Py_ssize_t>floor((q[m, 2] - oz) / h), nz - 1)
        best = 1e300
        best_j = -1
        ring = 0
        while ring <= max_ring:
            x0 = cx - ring; x1 = cx + ring
            y0 = cy - ring; y1 = cy + ring
            z0 = cz - ring; z1 = cz + ring
            for ix in range(max(x0, 0), min(x1, nx - 1) + 1):
                for iy in range(max(y0, 0), min(y1, ny - 1) + 1):
                    for iz in range(max(z0, 0), min(z1, nz - 1) + 1):
                        if (ix != x0 and ix != x1 and iy != y0 and iy != y1
                                and iz != z0 and iz != z1):
                            continue
                        c = (ix * ny + iy) * nz + iz
                        for s in range(start[c], start[c + 1]):
                            j = order[s]
                            dx = q[m, 0] - p[j, 0]
                            dy = q[m, 1] - p[j, 1]
                            dz = q[m, 2] - p[j, 2]
                            dd = dx * dx + dy * dy + dz * dz
                            if dd < best or (dd == best and j < best_j):
                                best = dd
                                best_j = j
            bound = ring * h
            if best_j >= 0 and best < bound * bound:
                break
            ring += 1
        idx[m] = best_j
        d2[m] = best
    return idx_a, d2_a
