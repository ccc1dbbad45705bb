"""Serial numba loops over (query, neighbour, voxel-corner) triples.

Every routine walks queries in order and neighbours in CSR order, so results
are bit-reproducible. ``corner`` and ``s`` have shape (pairs, 8): the flat
voxel index and the window-times-trilinear weight of each interpolation corner.
"""

import numba as nb


@nb.njit(cache=True, nogil=True)
def gather(offsets, pidx, corner, s, F, A):
    # A[q, v, :] += s * F[i, :]
    C = F.shape[1]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                for k in range(C):
                    A[q, v, k] += w * F[i, k]


@nb.njit(cache=True, nogil=True)
def gather_t(offsets, pidx, corner, s, gA, gF):
    C = gF.shape[1]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                for k in range(C):
                    gF[i, k] += w * gA[q, v, k]


@nb.njit(cache=True, nogil=True)
def spread(offsets, pidx, corner, s, Pm, out):
    # out[q, :] += s * Pm[i, v, :]
    C = Pm.shape[2]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                for k in range(C):
                    out[q, k] += w * Pm[i, v, k]


@nb.njit(cache=True, nogil=True)
def spread_t(offsets, pidx, corner, s, gout, gPm):
    C = gout.shape[1]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                for k in range(C):
                    gPm[i, v, k] += w * gout[q, k]


@nb.njit(cache=True, nogil=True, fastmath=True)
def gather_t_dots(offsets, pidx, corner, s, gA, F, gF, gs):
    # gather_t plus gs[p, c] += <gA[q, v, :], F[i, :]>
    C = F.shape[1]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                acc = 0.0
                for k in range(C):
                    g = gA[q, v, k]
                    gF[i, k] += w * g
                    acc += g * F[i, k]
                gs[p, c] += acc


@nb.njit(cache=True, nogil=True, fastmath=True)
def spread_t_dots(offsets, pidx, corner, s, gout, Pm, gPm, gs):
    # spread_t plus gs[p, c] += <gout[q, :], Pm[i, v, :]>
    C = gout.shape[1]
    for q in range(offsets.shape[0] - 1):
        for p in range(offsets[q], offsets[q + 1]):
            i = pidx[p]
            for c in range(8):
                v = corner[p, c]
                w = s[p, c]
                acc = 0.0
                for k in range(C):
                    g = gout[q, k]
                    gPm[i, v, k] += w * g
                    acc += g * Pm[i, v, k]
                gs[p, c] += acc

