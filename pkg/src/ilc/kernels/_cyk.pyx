# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Cyclic-Jacobi eigensolver for complex Hermitian matrices plus the small
dense operations that dominate the closed-loop simulation.  Ordering and
phase conventions match ``ilc.kernels.pure``:

* eigenvalues ascending,
* eigenvalue clusters (gap <= cluster_tol) ordered by the index of each
  eigenvector's dominant component,
* each eigenvector scaled so its largest-magnitude entry is real positive.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, cos, sin

from ..errors import EigenSolverError, FrameMatchingError

cnp.import_array()

NAME = "compiled"

CLUSTER_TOL = 1e-9

cdef double _TIE_REL = 1e-12
cdef int _MAX_SWEEPS = 100
DEF MAX_N = 64


cdef inline double _cabs2(double complex z):
    return z.real * z.real + z.imag * z.imag


cdef Py_ssize_t _dominant_index(double complex[:, ::1] V, Py_ssize_t col,
                                Py_ssize_t n):
    cdef double top = 0.0, m, cut
    cdef Py_ssize_t i
    for i in range(n):
        m = _cabs2(V[i, col])
        if m > top:
            top = m
    cut = top * (1.0 - 2.0 * _TIE_REL)
    for i in range(n):
        if _cabs2(V[i, col]) >= cut:
            return i
    return 0


cdef int _sweeps(double complex[:, ::1] a, double complex[:, ::1] v,
                 Py_ssize_t n) except -1:
    """In-place cyclic Jacobi; `a` ends almost diagonal, `v` accumulates."""
    cdef Py_ssize_t p, q, i, sweep
    cdef double alpha, beta, ag, tau, t, c, sg, off, scale, thresh
    cdef double complex g, s, sc, xp, xq

    scale = 0.0
    for p in range(n):
        for q in range(n):
            scale += _cabs2(a[p, q])
    scale = sqrt(scale)
    if scale == 0.0:
        return 0
    thresh = 1e-15 * scale

    for sweep in range(_MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += _cabs2(a[p, q])
        off = sqrt(2.0 * off)
        if off <= thresh:
            return 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                g = a[p, q]
                ag = sqrt(_cabs2(g))
                if ag <= 1e-300:
                    continue
                alpha = a[p, p].real
                beta = a[q, q].real
                tau = (alpha - beta) / (2.0 * ag)
                if tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                sg = t * c
                # s = sin * conj(g)/|g|
                s = sg * (g.conjugate() / ag)
                sc = s.conjugate()
                # columns: X[:,p] = c A[:,p] + s A[:,q]; X[:,q] = -sc A[:,p] + c A[:,q]
                for i in range(n):
                    xp = a[i, p]
                    xq = a[i, q]
                    a[i, p] = c * xp + s * xq
                    a[i, q] = -sc * xp + c * xq
                # rows: A[p,:] = c X[p,:] + sc X[q,:]; A[q,:] = -s X[p,:] + c X[q,:]
                for i in range(n):
                    xp = a[p, i]
                    xq = a[q, i]
                    a[p, i] = c * xp + sc * xq
                    a[q, i] = -s * xp + c * xq
                a[p, q] = 0.0
                a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
                for i in range(n):
                    xp = v[i, p]
                    xq = v[i, q]
                    v[i, p] = c * xp + s * xq
                    v[i, q] = -sc * xp + c * xq
    raise EigenSolverError(
        f"cyclic Jacobi did not converge in {_MAX_SWEEPS} sweeps "
        f"(scale {scale:.3e})")


cdef tuple _finish(double complex[:, ::1] a, double complex[:, ::1] v,
                   Py_ssize_t n, double cluster_tol):
    """Apply ordering and phase conventions; returns (w, V) arrays."""
    cdef Py_ssize_t[MAX_N] perm
    cdef Py_ssize_t[MAX_N] dom
    cdef Py_ssize_t i, j, k, d, p, tmpi
    cdef double wk
    # stable insertion sort of indices by eigenvalue
    for i in range(n):
        perm[i] = i
    for k in range(1, n):
        tmpi = perm[k]
        wk = a[tmpi, tmpi].real
        j = k
        while j > 0 and a[perm[j - 1], perm[j - 1]].real > wk:
            perm[j] = perm[j - 1]
            j -= 1
        perm[j] = tmpi
    # within-cluster reordering by dominant component index
    for i in range(n):
        dom[i] = _dominant_index(v, perm[i], n)
    i = 0
    while i < n:
        j = i + 1
        while (j < n and a[perm[j], perm[j]].real
               - a[perm[j - 1], perm[j - 1]].real <= cluster_tol):
            j += 1
        if j - i > 1:
            for k in range(i + 1, j):
                tmpi = perm[k]
                d = dom[k]
                p = k
                while p > i and dom[p - 1] > d:
                    perm[p] = perm[p - 1]
                    dom[p] = dom[p - 1]
                    p -= 1
                perm[p] = tmpi
                dom[p] = d
        i = j
    w_arr = np.empty(n)
    out_arr = np.empty((n, n), dtype=np.complex128)
    cdef double[::1] w = w_arr
    cdef double complex[:, ::1] out = out_arr
    cdef double complex z
    cdef double az
    for k in range(n):
        j = perm[k]
        w[k] = a[j, j].real
        d = _dominant_index(v, j, n)
        z = v[d, j]
        az = sqrt(_cabs2(z))
        if az > 0.0:
            z = z.conjugate() / az
        else:
            z = 1.0
        for i in range(n):
            out[i, k] = v[i, j] * z
    return w_arr, out_arr


cdef _match(const double complex[:, ::1] r, const double[::1] win,
            const double complex[:, ::1] v, Py_ssize_t n,
            double ambiguity_tol):
    cdef Py_ssize_t jr, jc, i, best
    cdef double ov, top, second
    cdef double complex acc
    cdef Py_ssize_t[MAX_N] perm
    cdef Py_ssize_t[MAX_N] used
    for i in range(n):
        used[i] = 0
    for jr in range(n):
        top = -1.0
        second = -1.0
        best = 0
        for jc in range(n):
            acc = 0.0
            for i in range(n):
                acc += r[i, jr].conjugate() * v[i, jc]
            ov = sqrt(_cabs2(acc))
            if ov > top:
                second = top
                top = ov
                best = jc
            elif ov > second:
                second = ov
        if n > 1 and top - second < ambiguity_tol:
            raise FrameMatchingError(
                f"ambiguous eigenbranch for reference column {jr}: "
                f"overlaps {top:.9f} and {second:.9f}")
        perm[jr] = best
        used[best] += 1
    for i in range(n):
        if used[i] != 1:
            raise FrameMatchingError(
                "eigenbranch crossing: column assignment is not a permutation")
    w2_arr = np.empty(n)
    V2_arr = np.empty((n, n), dtype=np.complex128)
    cdef double[::1] w2 = w2_arr
    cdef double complex[:, ::1] v2 = V2_arr
    for jr in range(n):
        jc = perm[jr]
        w2[jr] = win[jc]
        for i in range(n):
            v2[i, jr] = v[i, jc]
    return w2_arr, V2_arr


def eigh(A, double cluster_tol=CLUSTER_TOL):
    """Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations."""
    a_arr = np.array(A, dtype=np.complex128, order="C", copy=True)
    cdef Py_ssize_t n = a_arr.shape[0]
    if n > MAX_N:
        raise EigenSolverError(f"matrix dimension above the small-N cap ({MAX_N})")
    v_arr = np.zeros((n, n), dtype=np.complex128)
    cdef double complex[:, ::1] a = a_arr
    cdef double complex[:, ::1] v = v_arr
    cdef Py_ssize_t i
    for i in range(n):
        v[i, i] = 1.0
    _sweeps(a, v, n)
    return _finish(a, v, n, cluster_tol)


def match_frame(ref, w, V, double ambiguity_tol=1e-6):
    """Reorder eigenpairs to maximize per-column overlap with ``ref``."""
    cdef const double complex[:, ::1] r = np.ascontiguousarray(ref, dtype=np.complex128)
    cdef const double complex[:, ::1] v = np.ascontiguousarray(V, dtype=np.complex128)
    cdef const double[::1] win = np.ascontiguousarray(w, dtype=np.float64)
    return _match(r, win, v, r.shape[0], ambiguity_tol)


def dressed_frame(H_eta, H_gsum, double g, ref,
                  double cluster_tol=CLUSTER_TOL, double ambiguity_tol=1e-6):
    """Eigenframe of ``H_eta + g * H_gsum``, matched to ``ref`` if given."""
    cdef const double complex[:, ::1] he = np.ascontiguousarray(H_eta, dtype=np.complex128)
    cdef const double complex[:, ::1] hg = np.ascontiguousarray(H_gsum, dtype=np.complex128)
    cdef Py_ssize_t n = he.shape[0]
    if n > MAX_N:
        raise EigenSolverError(f"matrix dimension above the small-N cap ({MAX_N})")
    a_arr = np.empty((n, n), dtype=np.complex128)
    v_arr = np.zeros((n, n), dtype=np.complex128)
    cdef double complex[:, ::1] a = a_arr
    cdef double complex[:, ::1] v = v_arr
    cdef Py_ssize_t i, j
    for i in range(n):
        v[i, i] = 1.0
        for j in range(n):
            a[i, j] = he[i, j] + g * hg[i, j]
    _sweeps(a, v, n)
    w_arr, V_arr = _finish(a, v, n, cluster_tol)
    if ref is None:
        return w_arr, V_arr
    cdef const double complex[:, ::1] r = np.ascontiguousarray(ref, dtype=np.complex128)
    cdef double[::1] win = w_arr
    cdef double complex[:, ::1] vout = V_arr
    return _match(r, win, vout, n, ambiguity_tol)


def weighted_projector(V, vals):
    """Sum of vals[j] * |v_j><v_j| over the columns of V."""
    cdef const double complex[:, ::1] v = np.ascontiguousarray(V, dtype=np.complex128)
    cdef const double[::1] p = np.ascontiguousarray(vals, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0]
    out_arr = np.empty((n, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double complex acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += p[k] * v[i, k] * v[j, k].conjugate()
            out[i, j] = acc
    return out_arr


def evolve_pure(w, V, double dt, psi):
    """Apply exp(-i H dt) with H = V diag(w) V^dagger to a state vector."""
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double complex[:, ::1] v = np.ascontiguousarray(V, dtype=np.complex128)
    cdef const double complex[::1] s = np.ascontiguousarray(psi, dtype=np.complex128)
    cdef Py_ssize_t n = wv.shape[0]
    coef_arr = np.empty(n, dtype=np.complex128)
    out_arr = np.empty(n, dtype=np.complex128)
    cdef double complex[::1] coef = coef_arr
    cdef double complex[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double complex acc, ph
    cdef double ang
    for k in range(n):
        acc = 0.0
        for i in range(n):
            acc += v[i, k].conjugate() * s[i]
        ang = -dt * wv[k]
        ph.real = cos(ang)
        ph.imag = sin(ang)
        coef[k] = acc * ph
    for i in range(n):
        acc = 0.0
        for k in range(n):
            acc += v[i, k] * coef[k]
        out[i] = acc
    return out_arr


def evolve_density(w, V, double dt, rho):
    """Conjugate a density matrix by exp(-i H dt)."""
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double complex[:, ::1] v = np.ascontiguousarray(V, dtype=np.complex128)
    cdef const double complex[:, ::1] r = np.ascontiguousarray(rho, dtype=np.complex128)
    cdef Py_ssize_t n = wv.shape[0]
    tmp_arr = np.empty((n, n), dtype=np.complex128)
    mid_arr = np.empty((n, n), dtype=np.complex128)
    out_arr = np.empty((n, n), dtype=np.complex128)
    cdef double complex[:, ::1] tmp = tmp_arr
    cdef double complex[:, ::1] mid = mid_arr
    cdef double complex[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double complex acc, ph
    cdef double ang
    # tmp = V^dagger rho
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += v[k, i].conjugate() * r[k, j]
            tmp[i, j] = acc
    # mid = (tmp V) .* exp(-i dt (w_i - w_j))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += tmp[i, k] * v[k, j]
            ang = -dt * (wv[i] - wv[j])
            ph.real = cos(ang)
            ph.imag = sin(ang)
            mid[i, j] = acc * ph
    # out = V mid V^dagger
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += v[i, k] * mid[k, j]
            tmp[i, j] = acc
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += tmp[i, k] * v[j, k].conjugate()
            out[i, j] = acc
    return out_arr


def expect_pure(A, psi):
    """<psi|A|psi> without assuming Hermiticity of A."""
    cdef const double complex[:, ::1] a = np.ascontiguousarray(A, dtype=np.complex128)
    cdef const double complex[::1] s = np.ascontiguousarray(psi, dtype=np.complex128)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j
    cdef double complex acc = 0.0, row
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += a[i, j] * s[j]
        acc += s[i].conjugate() * row
    return complex(acc)


def expect_density(A, rho):
    """tr(A rho) without assuming Hermiticity."""
    cdef const double complex[:, ::1] a = np.ascontiguousarray(A, dtype=np.complex128)
    cdef const double complex[:, ::1] r = np.ascontiguousarray(rho, dtype=np.complex128)
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j
    cdef double complex acc = 0.0
    for i in range(n):
        for j in range(n):
            acc += a[i, j] * r[j, i]
    return complex(acc)


def comm_expect_pure(H, P, psi):
    """<psi|[H, P]|psi>, purely imaginary for Hermitian H, P."""
    cdef const double complex[:, ::1] h = np.ascontiguousarray(H, dtype=np.complex128)
    cdef const double complex[:, ::1] p = np.ascontiguousarray(P, dtype=np.complex128)
    cdef const double complex[::1] s = np.ascontiguousarray(psi, dtype=np.complex128)
    cdef Py_ssize_t n = h.shape[0]
    cdef double complex[MAX_N] hs
    cdef double complex[MAX_N] ps
    cdef Py_ssize_t i, j
    cdef double complex acc1, acc2, acc
    if n > MAX_N:
        raise EigenSolverError(f"matrix dimension above the small-N cap ({MAX_N})")
    for i in range(n):
        acc1 = 0.0
        acc2 = 0.0
        for j in range(n):
            acc1 += h[i, j] * s[j]
            acc2 += p[i, j] * s[j]
        hs[i] = acc1
        ps[i] = acc2
    acc = 0.0
    for i in range(n):
        acc1 = 0.0
        acc2 = 0.0
        for j in range(n):
            acc1 += h[i, j] * ps[j]
            acc2 += p[i, j] * hs[j]
        acc += s[i].conjugate() * (acc1 - acc2)
    return complex(acc)


def comm_expect_density(H, P, rho):
    """tr([P, H] rho), purely imaginary for Hermitian P, H, rho."""
    cdef const double complex[:, ::1] h = np.ascontiguousarray(H, dtype=np.complex128)
    cdef const double complex[:, ::1] p = np.ascontiguousarray(P, dtype=np.complex128)
    cdef const double complex[:, ::1] r = np.ascontiguousarray(rho, dtype=np.complex128)
    cdef Py_ssize_t n = h.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double complex acc = 0.0, ph, hp
    for i in range(n):
        for j in range(n):
            ph = 0.0
            hp = 0.0
            for k in range(n):
                ph += p[i, k] * h[k, j]
                hp += h[i, k] * p[k, j]
            acc += (ph - hp) * r[j, i]
    return complex(acc)
