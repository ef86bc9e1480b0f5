# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fast-marching kernel.

Mirrors :func:`latentpinn._fmm_py.march` operation for operation; the heap
orders entries by ``(key, flat index)`` exactly like ``heapq`` on tuples,
so the two backends finalize nodes in the same order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY
from libc.stdlib cimport malloc, realloc, free

cnp.import_array()

DEF FAR = 0
DEF TRIAL = 1
DEF KNOWN = 2


cdef struct Entry:
    double key
    Py_ssize_t idx


cdef inline bint _less(Entry a, Entry b) nogil:
    return a.key < b.key or (a.key == b.key and a.idx < b.idx)


cdef struct Heap:
    Entry* data
    Py_ssize_t size
    Py_ssize_t cap


cdef int _push(Heap* h, double key, Py_ssize_t idx) nogil:
    cdef Entry* grown
    cdef Entry e
    cdef Py_ssize_t pos, parent
    if h.size == h.cap:
        grown = <Entry*> realloc(h.data, 2 * h.cap * sizeof(Entry))
        if grown == NULL:
            return -1
        h.data = grown
        h.cap *= 2
    e.key = key
    e.idx = idx
    pos = h.size
    h.size += 1
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(e, h.data[parent]):
            h.data[pos] = h.data[parent]
            pos = parent
        else:
            break
    h.data[pos] = e
    return 0


cdef Entry _pop(Heap* h) nogil:
    cdef Entry top = h.data[0]
    cdef Entry last
    cdef Py_ssize_t pos = 0, child, n
    h.size -= 1
    n = h.size
    if n > 0:
        last = h.data[n]
        while True:
            child = 2 * pos + 1
            if child >= n:
                break
            if child + 1 < n and _less(h.data[child + 1], h.data[child]):
                child += 1
            if _less(h.data[child], last):
                h.data[pos] = h.data[child]
                pos = child
            else:
                break
        h.data[pos] = last
    return top


cdef inline double _root(double ax, double bx, double az, double bz, double s) nogil:
    cdef double qa = ax * ax + az * az
    cdef double qb = -2.0 * (ax * bx + az * bz)
    cdef double qc = bx * bx + bz * bz - s * s
    cdef double disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0 or qa <= 0.0:
        return INFINITY
    return (-qb + sqrt(disc)) / (2.0 * qa)


cdef double _solve(double T0p, double p0x, double p0z, double s, bint near,
                   int sx, double ta, double Ta, int sz, double tb, double Tb,
                   double dx, double dz) nogil:
    cdef double ax = p0x + T0p * sx / dx
    cdef double bx = T0p * sx * ta / dx
    cdef double az = p0z + T0p * sz / dz
    cdef double bz = T0p * sz * tb / dz
    cdef double t, best, wx, wz, ca, cb
    if sx != 0 and sz != 0:
        t = _root(ax, bx, az, bz, s)
        if (t < INFINITY and sx * (ax * t - bx) >= 0.0 and sz * (az * t - bz) >= 0.0
                and T0p * t >= Ta and T0p * t >= Tb):
            return t
    wx = p0z if near else 0.0
    wz = p0x if near else 0.0
    best = INFINITY
    if sx != 0:
        t = _root(ax, bx, wx, 0.0, s)
        if t < INFINITY and sx * (ax * t - bx) >= 0.0 and T0p * t >= Ta:
            best = t
    if sz != 0:
        t = _root(wz, 0.0, az, bz, s)
        if t < best and sz * (az * t - bz) >= 0.0 and T0p * t >= Tb:
            best = t
    if best == INFINITY:
        ca = Ta + s * dx if sx != 0 else INFINITY
        cb = Tb + s * dz if sz != 0 else INFINITY
        best = (ca if ca < cb else cb) / T0p
    return best


cdef int _relax(Py_ssize_t i, Py_ssize_t j, Py_ssize_t nz, Py_ssize_t nx,
                const double[:, ::1] s, double[:, ::1] tau, const double[:, ::1] T0,
                const double[:, ::1] px, const double[:, ::1] pz, const unsigned char[:, ::1] near,
                unsigned char[:, ::1] status, double dx, double dz, Heap* heap) nogil:
    cdef Py_ssize_t k, ni, nj
    cdef Py_ssize_t di[4]
    cdef Py_ssize_t dj[4]
    cdef int sx, sz
    cdef double ta, Ta, tb, Tb, T, t
    di[0] = -1; dj[0] = 0
    di[1] = 1; dj[1] = 0
    di[2] = 0; dj[2] = -1
    di[3] = 0; dj[3] = 1
    for k in range(4):
        ni = i + di[k]
        nj = j + dj[k]
        if ni < 0 or ni >= nz or nj < 0 or nj >= nx or status[ni, nj] == KNOWN:
            continue
        ta = 0.0; tb = 0.0; Ta = 0.0; Tb = 0.0
        sx = 0; sz = 0
        if nj > 0 and status[ni, nj - 1] == KNOWN:
            Ta = T0[ni, nj - 1] * tau[ni, nj - 1]
            ta = tau[ni, nj - 1]
            sx = 1
        if nj < nx - 1 and status[ni, nj + 1] == KNOWN:
            T = T0[ni, nj + 1] * tau[ni, nj + 1]
            if sx == 0 or T < Ta:
                ta = tau[ni, nj + 1]
                Ta = T
                sx = -1
        if ni > 0 and status[ni - 1, nj] == KNOWN:
            Tb = T0[ni - 1, nj] * tau[ni - 1, nj]
            tb = tau[ni - 1, nj]
            sz = 1
        if ni < nz - 1 and status[ni + 1, nj] == KNOWN:
            T = T0[ni + 1, nj] * tau[ni + 1, nj]
            if sz == 0 or T < Tb:
                tb = tau[ni + 1, nj]
                Tb = T
                sz = -1
        t = _solve(T0[ni, nj], px[ni, nj], pz[ni, nj], s[ni, nj], near[ni, nj] != 0,
                   sx, ta, Ta, sz, tb, Tb, dx, dz)
        if t != tau[ni, nj]:
            tau[ni, nj] = t
            status[ni, nj] = TRIAL
            if _push(heap, T0[ni, nj] * t, ni * nx + nj) != 0:
                return -1
    return 0


def march(slowness, double dx, double dz, tau, known, T0, p0x, p0z, near):
    """Propagate from ``known`` nodes; ``tau`` is updated in place.

    Returns the flat indices of newly finalized nodes in finalization order.
    """
    cdef const double[:, ::1] s = np.ascontiguousarray(slowness, dtype=np.float64)
    cdef const double[:, ::1] t0 = np.ascontiguousarray(T0, dtype=np.float64)
    cdef const double[:, ::1] px = np.ascontiguousarray(p0x, dtype=np.float64)
    cdef const double[:, ::1] pz = np.ascontiguousarray(p0z, dtype=np.float64)
    cdef const unsigned char[:, ::1] nr = np.ascontiguousarray(near, dtype=np.uint8)
    work = np.array(tau, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] tl = work
    status_arr = np.where(np.asarray(known) != 0, KNOWN, FAR).astype(np.uint8)
    cdef unsigned char[:, ::1] status = status_arr
    cdef Py_ssize_t nz = s.shape[0], nx = s.shape[1], i, j, count = 0
    order_arr = np.empty(nz * nx, dtype=np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    cdef Heap heap
    cdef Entry e
    cdef int failed = 0

    heap.cap = 4 * nz * nx + 16
    heap.size = 0
    heap.data = <Entry*> malloc(heap.cap * sizeof(Entry))
    if heap.data == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(nz):
                for j in range(nx):
                    if status[i, j] != KNOWN:
                        tl[i, j] = INFINITY
            for i in range(nz):
                for j in range(nx):
                    if status[i, j] == KNOWN and failed == 0:
                        failed = _relax(i, j, nz, nx, s, tl, t0, px, pz, nr, status,
                                        dx, dz, &heap)
            while heap.size > 0 and failed == 0:
                e = _pop(&heap)
                i = e.idx // nx
                j = e.idx % nx
                if status[i, j] == KNOWN or e.key != t0[i, j] * tl[i, j]:
                    continue
                status[i, j] = KNOWN
                order[count] = e.idx
                count += 1
                failed = _relax(i, j, nz, nx, s, tl, t0, px, pz, nr, status, dx, dz, &heap)
    finally:
        free(heap.data)
    if failed:
        raise MemoryError()
    tau[...] = work
    return order_arr[:count].copy()
