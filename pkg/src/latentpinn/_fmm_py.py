"""Pure-Python fast-marching kernel (fallback for the compiled ``_fmm_core``).

Solves ``|grad(T0 * tau)| = s`` for ``tau`` with first-order upwind
differences on ``tau``. ``T0 = 1, grad T0 = 0`` gives the plain scheme.
The compiled kernel mirrors this one operation for operation, so both
produce bit-identical output.
"""

import heapq
import math

import numpy as np

FAR, TRIAL, KNOWN = 0, 1, 2


def _root(ax, bx, az, bz, s):
    """Larger root of ``(ax t - bx)^2 + (az t - bz)^2 = s^2`` (inf if none)."""
    qa = ax * ax + az * az
    qb = -2.0 * (ax * bx + az * bz)
    qc = bx * bx + bz * bz - s * s
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0.0 or qa <= 0.0:
        return math.inf
    return (-qb + math.sqrt(disc)) / (2.0 * qa)


def _solve(T0p, p0x, p0z, s, near, sx, ta, Ta, sz, tb, Tb, dx, dz):
    """Upwind update of tau at one node.

    ``sx``/``sz`` are +1 (upwind neighbour at lower index), -1 (higher index)
    or 0 (no known neighbour on that axis); ``ta``/``Ta`` are the neighbour's
    tau and traveltime. Candidates must be causal in the factored derivative
    and must not undercut the traveltime of the neighbours they use.

    A one-sided update ignores the other axis, except at ``near`` nodes
    where that axis keeps its ``tau * dT0`` part. That term is exact in a
    locally constant medium and breaks the ties between nodes mirrored
    about an off-grid source, but far from the source it can undershoot.
    The unfactored one-sided update is the last resort.
    """
    ax = p0x + T0p * sx / dx
    bx = T0p * sx * ta / dx
    az = p0z + T0p * sz / dz
    bz = T0p * sz * tb / dz
    if sx and sz:
        t = _root(ax, bx, az, bz, s)
        if (t < math.inf and sx * (ax * t - bx) >= 0.0 and sz * (az * t - bz) >= 0.0
                and T0p * t >= Ta and T0p * t >= Tb):
            return t
    wx = p0z if near else 0.0
    wz = p0x if near else 0.0
    best = math.inf
    if sx:
        t = _root(ax, bx, wx, 0.0, s)
        if t < math.inf and sx * (ax * t - bx) >= 0.0 and T0p * t >= Ta:
            best = t
    if sz:
        t = _root(wz, 0.0, az, bz, s)
        if t < best and sz * (az * t - bz) >= 0.0 and T0p * t >= Tb:
            best = t
    if best == math.inf:
        ca = Ta + s * dx if sx else math.inf
        cb = Tb + s * dz if sz else math.inf
        best = (ca if ca < cb else cb) / T0p
    return best


def _neighbours(T, T0, status, i, j, nz, nx):
    ta = tb = Ta = Tb = 0.0
    sx = sz = 0
    if j > 0 and status[i][j - 1] == KNOWN:
        Ta = T0[i][j - 1] * T[i][j - 1]
        ta, sx = T[i][j - 1], 1
    if j < nx - 1 and status[i][j + 1] == KNOWN:
        Tr = T0[i][j + 1] * T[i][j + 1]
        if not sx or Tr < Ta:
            ta, Ta, sx = T[i][j + 1], Tr, -1
    if i > 0 and status[i - 1][j] == KNOWN:
        Tb = T0[i - 1][j] * T[i - 1][j]
        tb, sz = T[i - 1][j], 1
    if i < nz - 1 and status[i + 1][j] == KNOWN:
        Td = T0[i + 1][j] * T[i + 1][j]
        if not sz or Td < Tb:
            tb, Tb, sz = T[i + 1][j], Td, -1
    return sx, ta, Ta, sz, tb, Tb


def march(slowness, dx, dz, tau, known, T0, p0x, p0z, near):
    """Propagate from ``known`` nodes; ``tau`` is updated in place.

    The heap is keyed on ``(T0 * tau, flat index)`` with lazy deletion.
    Returns the flat indices of newly finalized nodes in finalization order.
    """
    nz, nx = slowness.shape
    s = slowness.tolist()
    tl = tau.tolist()
    t0 = T0.tolist()
    px = p0x.tolist()
    pz = p0z.tolist()
    nr = np.asarray(near).tolist()
    status = [[KNOWN if k else FAR for k in row] for row in np.asarray(known).tolist()]
    for i in range(nz):
        for j in range(nx):
            if status[i][j] != KNOWN:
                tl[i][j] = math.inf
    heap = []

    def relax(i, j):
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni < nz and 0 <= nj < nx and status[ni][nj] != KNOWN:
                sx, ta, Ta, sz, tb, Tb = _neighbours(tl, t0, status, ni, nj, nz, nx)
                t = _solve(t0[ni][nj], px[ni][nj], pz[ni][nj], s[ni][nj], nr[ni][nj],
                           sx, ta, Ta, sz, tb, Tb, dx, dz)
                if t != tl[ni][nj]:
                    tl[ni][nj] = t
                    status[ni][nj] = TRIAL
                    heapq.heappush(heap, (t0[ni][nj] * t, ni * nx + nj))

    for i in range(nz):
        for j in range(nx):
            if status[i][j] == KNOWN:
                relax(i, j)

    order = []
    while heap:
        key, idx = heapq.heappop(heap)
        i, j = divmod(idx, nx)
        if status[i][j] == KNOWN or key != t0[i][j] * tl[i][j]:
            continue
        status[i][j] = KNOWN
        order.append(idx)
        relax(i, j)

    tau[...] = np.asarray(tl)
    return np.asarray(order, dtype=np.int64)
