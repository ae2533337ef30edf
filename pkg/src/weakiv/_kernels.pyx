# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled replication kernel.

Same contract as ``_kernels_py.replicate_stats``; each replication is handled
with small dense loops and the whole batch runs without the GIL.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, NAN
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double TOL = 1e-10


cdef int chol(double* a, int k) noexcept nogil:
    """In-place lower Cholesky of a k x k row-major matrix; 1 on failure."""
    cdef int i, j, m
    cdef double s, t, dmax = 0.0
    for i in range(k):
        if a[i * k + i] > dmax:
            dmax = a[i * k + i]
    if not dmax > 0.0:
        return 1
    for j in range(k):
        s = a[j * k + j]
        for m in range(j):
            s -= a[j * k + m] * a[j * k + m]
        if not s > TOL * dmax:
            return 1
        s = sqrt(s)
        a[j * k + j] = s
        for i in range(j + 1, k):
            t = a[i * k + j]
            for m in range(j):
                t -= a[i * k + m] * a[j * k + m]
            a[i * k + j] = t / s
    return 0


cdef void chol_solve(const double* L, double* b, int k) noexcept nogil:
    """Overwrite b with A^-1 b given the Cholesky factor of A."""
    cdef int i, m
    cdef double s
    for i in range(k):
        s = b[i]
        for m in range(i):
            s -= L[i * k + m] * b[m]
        b[i] = s / L[i * k + i]
    for i in range(k - 1, -1, -1):
        s = b[i]
        for m in range(i + 1, k):
            s -= L[m * k + i] * b[m]
        b[i] = s / L[i * k + i]


cdef int score(const double[:, ::1] Z, const double* x, const double* y, int n, int kz,
               const double* ZZ, double b, const double* Pi, double* work,
               double* stat) noexcept nogil:
    """HC0 robust score statistic; 1 on a singular meat."""
    cdef int i, j, l, m, keep = 0, kk = kz - 1
    cdef double u, big = -1.0, pqp = 0.0, s
    cdef double* M = work                 # kz*kz
    cdef double* Zu = M + kz * kz         # kz
    cdef double* c = Zu + kz              # kz
    cdef double* St = c + kz              # kk*kz
    cdef double* T = St + kk * kz         # kk*kz
    cdef double* H = T + kk * kz          # kk*kk
    cdef double* g = H + kk * kk          # kk
    for j in range(kz):
        if fabs(Pi[j]) > big:
            big = fabs(Pi[j])
            keep = j
        Zu[j] = 0.0
        for l in range(kz):
            M[j * kz + l] = 0.0
    for i in range(n):
        u = y[i] - b * x[i]
        for j in range(kz):
            Zu[j] += Z[i, j] * u
            s = u * u * Z[i, j]
            for l in range(j + 1):
                M[j * kz + l] += s * Z[i, l]
    for j in range(kz):
        for l in range(j):
            M[l * kz + j] = M[j * kz + l]
    # c = ZZ Pi / Pi'ZZ Pi
    for j in range(kz):
        s = 0.0
        for l in range(kz):
            s += ZZ[j * kz + l] * Pi[l]
        c[j] = s
        pqp += Pi[j] * s
    if not pqp > 0.0:
        return 1
    m = 0
    for j in range(kz):
        if j == keep:
            continue
        for l in range(kz):
            St[m * kz + l] = -c[j] / pqp * Pi[l]
        St[m * kz + j] += 1.0
        m += 1
    # g = S'Zu, H = S' M S
    for m in range(kk):
        s = 0.0
        for l in range(kz):
            s += St[m * kz + l] * Zu[l]
        g[m] = s
        for l in range(kz):
            s = 0.0
            for j in range(kz):
                s += St[m * kz + j] * M[j * kz + l]
            T[m * kz + l] = s
    for m in range(kk):
        for i in range(kk):
            s = 0.0
            for l in range(kz):
                s += T[m * kz + l] * St[i * kz + l]
            H[m * kk + i] = s
    for m in range(kk):
        c[m] = g[m]
    if chol(H, kk):
        return 1
    chol_solve(H, c, kk)
    s = 0.0
    for m in range(kk):
        s += g[m] * c[m]
    stat[0] = s if s > 0.0 else 0.0
    return 0


cdef int one_rep(const double[:, ::1] Z, const double[::1] x0, const double[::1] y0,
                 bint demean, double* buf, double[::1] out) noexcept nogil:
    cdef int n = Z.shape[0], kz = Z.shape[1]
    cdef int i, j, l
    cdef double* x = buf
    cdef double* y = x + n
    cdef double* ZZ = y + n
    cdef double* L = ZZ + kz * kz
    cdef double* Zx = L + kz * kz
    cdef double* Zy = Zx + kz
    cdef double* Pi2 = Zy + kz
    cdef double* Piy = Pi2 + kz
    cdef double* Zul = Piy + kz
    cdef double* PiL = Zul + kz
    cdef double* A = PiL + kz
    cdef double* work = A + kz * kz
    cdef double xm = 0.0, ym = 0.0, xPx = 0.0, xPy = 0.0, yPy = 0.0
    cdef double xx = 0.0, xy = 0.0, yy = 0.0, qa, qb, qc, disc, alpha, b2, bl
    cdef double uu = 0.0, ux = 0.0, ul, coef, J, KP

    # Z arrives already centred when demean is set
    if demean:
        for i in range(n):
            xm += x0[i]
            ym += y0[i]
        xm /= n
        ym /= n
    for j in range(kz):
        Zx[j] = 0.0
        Zy[j] = 0.0
        for l in range(kz):
            ZZ[j * kz + l] = 0.0
    for i in range(n):
        x[i] = x0[i] - xm
        y[i] = y0[i] - ym
        xx += x[i] * x[i]
        xy += x[i] * y[i]
        yy += y[i] * y[i]
        for j in range(kz):
            Zx[j] += Z[i, j] * x[i]
            Zy[j] += Z[i, j] * y[i]
            for l in range(j + 1):
                ZZ[j * kz + l] += Z[i, j] * Z[i, l]
    for j in range(kz):
        for l in range(j):
            ZZ[l * kz + j] = ZZ[j * kz + l]
    for j in range(kz * kz):
        L[j] = ZZ[j]
    if chol(L, kz):
        return 1
    for j in range(kz):
        Pi2[j] = Zx[j]
        Piy[j] = Zy[j]
    chol_solve(L, Pi2, kz)
    chol_solve(L, Piy, kz)
    for j in range(kz):
        xPx += Zx[j] * Pi2[j]
        xPy += Zx[j] * Piy[j]
        yPy += Zy[j] * Piy[j]
    if not xPx > 0.0:
        return 1
    b2 = xPy / xPx
    qa = yy * xx - xy * xy
    if not qa > TOL * yy * xx:
        return 1
    qb = yPy * xx + xPx * yy - 2.0 * xPy * xy
    qc = yPy * xPx - xPy * xPy
    disc = qb * qb - 4.0 * qa * qc
    disc = sqrt(disc) if disc > 0.0 else 0.0
    alpha = 2.0 * qc / (qb + disc) if qc > 0.0 else 0.0
    if alpha < 0.0:
        alpha = 0.0
    if alpha > 1.0:
        alpha = 1.0
    if xPx - alpha * xx == 0.0:
        return 1
    bl = (xPy - alpha * xy) / (xPx - alpha * xx)

    if score(Z, x, y, n, kz, ZZ, b2, Pi2, work, &J):
        return 1

    for j in range(kz):
        Zul[j] = 0.0
    for i in range(n):
        ul = y[i] - bl * x[i]
        uu += ul * ul
        ux += ul * x[i]
        for j in range(kz):
            Zul[j] += Z[i, j] * ul
    coef = 0.0 if uu <= 1e-12 * (yy + xx) else 1.0 / uu
    for j in range(kz):
        PiL[j] = Zx[j] - Zul[j] * coef * ux
        for l in range(kz):
            A[j * kz + l] = ZZ[j * kz + l] - coef * Zul[j] * Zul[l]
    if chol(A, kz):
        return 1
    chol_solve(A, PiL, kz)
    if score(Z, x, y, n, kz, ZZ, bl, PiL, work, &KP):
        return 1

    out[0] = b2
    out[1] = bl
    out[2] = alpha
    out[3] = J
    out[4] = KP
    out[5] = 0.0
    return 0


def replicate_stats(Z, x, y, bint demean=True):
    """Compiled counterpart of ``_kernels_py.replicate_stats``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] Za = np.array(Z, dtype=np.float64, order="C")
    cdef const double[:, ::1] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef int R = Za.shape[0], n = Za.shape[1], kz = Za.shape[2]
    cdef int r, j, i
    if demean:
        # centring Z up front keeps the score sums simple
        Za -= Za.mean(axis=1, keepdims=True)
    cdef double[:, :, ::1] Zv = Za
    out_arr = np.empty((R, 6), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef size_t size = 2 * n + 3 * kz * kz + 6 * kz + (3 * kz * kz + 3 * kz + 8)
    cdef double* buf
    with nogil:
        buf = <double*> malloc(size * sizeof(double))
        if buf != NULL:
            for r in range(R):
                if one_rep(Zv[r], xa[r], ya[r], demean, buf, out[r]):
                    for j in range(5):
                        out[r, j] = NAN
                    out[r, 5] = 1.0
            free(buf)
    if buf == NULL:
        raise MemoryError()
    return out_arr
