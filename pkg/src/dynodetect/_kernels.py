"""Compiled kernel for the per-frame scoring hot path.

The batch scorer fuses closed-ball candidate filtering, single-pass shifted
covariance accumulation, and the 4x4 Jacobi eigensolver, so each candidate
map point is touched once per query without materializing neighbor lists.
Candidate ranges per query come from a grid of cells (side = query radius)
stored as contiguous runs of a grid-sorted map; the caller resolves the 27
neighboring cells of each query into (start, end) index pairs. Everything
runs single-threaded in a fixed order, which keeps reruns bit-identical.
"""

import numpy as np
from numba import njit

_SWEEP_LIMIT = 50
_CONV_FACTOR = 1e-13
_TIE_FACTOR = 1e-12


@njit(cache=True)
def _jacobi4_inplace(a, v):
    """Cyclic Jacobi on a symmetric 4x4; eigenvectors in v's columns."""
    for i in range(4):
        for j in range(4):
            v[i, j] = 1.0 if i == j else 0.0
    norm = 0.0
    for i in range(4):
        for j in range(4):
            norm += a[i, j] * a[i, j]
    norm = np.sqrt(norm)
    tol = _CONV_FACTOR * norm
    for _ in range(_SWEEP_LIMIT):
        off = 0.0
        for i in range(4):
            for j in range(i + 1, 4):
                off += 2.0 * a[i, j] * a[i, j]
        if np.sqrt(off) <= tol:
            break
        for p in range(4):
            for q in range(p + 1, 4):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(4):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(4):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(4):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


@njit(cache=True)
def score_points(xyz, t, rel_frame, starts, ends, q_xyz, q_t, radius,
                 min_neighbors, min_frames, window_len, time_scale):
    """Score query points against a grid-sorted map.

    xyz/t/rel_frame are the map arrays permuted into grid order; rel_frame
    holds each point's window slot in [0, window_len). starts/ends give,
    per query, the candidate runs of its neighboring grid cells. Returns
    per-query (score, valid, neighbor count, distinct frame count,
    eigenvalue gap ratio).
    """
    nq = q_xyz.shape[0]
    ncells = starts.shape[1]
    scores = np.zeros(nq, dtype=np.float64)
    valid = np.zeros(nq, dtype=np.bool_)
    n_neighbors = np.zeros(nq, dtype=np.int64)
    n_frames = np.zeros(nq, dtype=np.int64)
    gap = np.zeros(nq, dtype=np.float64)

    r2 = radius * radius
    tiny = 2.2250738585072014e-308
    seen = np.zeros(window_len, dtype=np.uint8)
    a = np.empty((4, 4), dtype=np.float64)
    v = np.empty((4, 4), dtype=np.float64)

    for qi in range(nq):
        qx = q_xyz[qi, 0]
        qy = q_xyz[qi, 1]
        qz = q_xyz[qi, 2]
        qt = q_t[qi]

        cnt = 0
        nf = 0
        sx = 0.0
        sy = 0.0
        sz = 0.0
        st = 0.0
        m00 = 0.0
        m01 = 0.0
        m02 = 0.0
        m03 = 0.0
        m11 = 0.0
        m12 = 0.0
        m13 = 0.0
        m22 = 0.0
        m23 = 0.0
        m33 = 0.0
        for k in range(window_len):
            seen[k] = 0

        for c in range(ncells):
            for j in range(starts[qi, c], ends[qi, c]):
                dx = xyz[j, 0] - qx
                dy = xyz[j, 1] - qy
                dz = xyz[j, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 <= r2:
                    dt = (t[j] - qt) * time_scale
                    cnt += 1
                    sx += dx
                    sy += dy
                    sz += dz
                    st += dt
                    m00 += dx * dx
                    m01 += dx * dy
                    m02 += dx * dz
                    m03 += dx * dt
                    m11 += dy * dy
                    m12 += dy * dz
                    m13 += dy * dt
                    m22 += dz * dz
                    m23 += dz * dt
                    m33 += dt * dt
                    f = rel_frame[j]
                    if seen[f] == 0:
                        seen[f] = 1
                        nf += 1

        n_neighbors[qi] = cnt
        n_frames[qi] = nf
        if cnt < min_neighbors or nf < min_frames:
            continue

        inv = 1.0 / cnt
        mx = sx * inv
        my = sy * inv
        mz = sz * inv
        mt = st * inv
        a[0, 0] = m00 * inv - mx * mx
        a[0, 1] = m01 * inv - mx * my
        a[0, 2] = m02 * inv - mx * mz
        a[0, 3] = m03 * inv - mx * mt
        a[1, 1] = m11 * inv - my * my
        a[1, 2] = m12 * inv - my * mz
        a[1, 3] = m13 * inv - my * mt
        a[2, 2] = m22 * inv - mz * mz
        a[2, 3] = m23 * inv - mz * mt
        a[3, 3] = m33 * inv - mt * mt
        a[1, 0] = a[0, 1]
        a[2, 0] = a[0, 2]
        a[3, 0] = a[0, 3]
        a[2, 1] = a[1, 2]
        a[3, 1] = a[1, 3]
        a[3, 2] = a[2, 3]

        fro = 0.0
        for i in range(4):
            for jj in range(4):
                fro += a[i, jj] * a[i, jj]
        fro = np.sqrt(fro)

        _jacobi4_inplace(a, v)

        lam0 = a[0, 0]
        idx0 = 0
        for i in range(1, 4):
            if a[i, i] < lam0:
                lam0 = a[i, i]
                idx0 = i
        lam1 = np.inf
        for i in range(4):
            if i != idx0 and a[i, i] < lam1:
                lam1 = a[i, i]

        tie_tol = _TIE_FACTOR * max(fro, tiny)
        best_vt = abs(v[3, idx0])
        for i in range(4):
            if i != idx0 and a[i, i] <= lam0 + tie_tol:
                vt = abs(v[3, i])
                if vt > best_vt:
                    best_vt = vt

        s = best_vt
        if s > 1.0:
            s = 1.0
        scores[qi] = s
        valid[qi] = True
        gap[qi] = lam1 / max(lam0, tiny)

    return scores, valid, n_neighbors, n_frames, gap
