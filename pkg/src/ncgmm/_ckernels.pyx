# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop rollout + BPTT for the MLP policy.

Same contract as ``ncgmm._pykernels.rollout_range``; see ``ncgmm.kernels``
for the argument layout.  Each scenario is processed independently, so
results do not depend on how a batch is split into ranges.
"""
import numpy as np

from libc.math cimport exp, fabs

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double GELU_C = 0.044715


cdef inline double _dgelu(double x, double t) noexcept nogil:
    # t = tanh(sqrt(2/pi) (x + c x^3)), cached from the forward pass
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _tanh(double z) noexcept nogil:
    # via exp, noticeably cheaper than libm tanh
    cdef double e
    if z >= 0:
        e = exp(-2.0 * z)
        return (1.0 - e) / (1.0 + e)
    e = exp(2.0 * z)
    return (e - 1.0) / (e + 1.0)


cdef inline double _sign(double x) noexcept nogil:
    if x > 0:
        return 1.0
    if x < 0:
        return -1.0
    return 0.0


def rollout_range(const double[::1] theta, const long[::1] widths,
                  const double[:, ::1] A, const double[:, ::1] B,
                  const double[:, ::1] C, const double[:, ::1] E,
                  const double[::1] umin, const double[::1] umax, double du_max,
                  const double[:, ::1] g0, const double[:, :, ::1] ymin,
                  const double[:, :, ::1] ymax, const double[:, :, ::1] d,
                  const double[::1] w,
                  double[::1] loss_out, double[:, ::1] terms_out, double[:, ::1] grad_out,
                  bint want_grad, Py_ssize_t i0, Py_ssize_t i1):
    cdef Py_ssize_t L = widths.shape[0] - 1
    cdef Py_ssize_t N = ymin.shape[1]
    cdef Py_ssize_t nx = A.shape[0], nu = B.shape[1], ny = C.shape[0], nd = E.shape[1]
    cdef Py_ssize_t n_in = widths[0]
    cdef Py_ssize_t l, k, i, j, x, s, n_o, n_i, maxw = 0, tot_h = 0

    for l in range(L + 1):
        if widths[l] > maxw:
            maxw = widths[l]
    for l in range(1, L):
        tot_h += widths[l]

    w_off_np = np.zeros(L, dtype=np.int64)
    b_off_np = np.zeros(L, dtype=np.int64)
    h_off_np = np.zeros(max(L, 1), dtype=np.int64)
    cdef long long[::1] w_off = w_off_np
    cdef long long[::1] b_off = b_off_np
    cdef long long[::1] h_off = h_off_np
    cdef Py_ssize_t pos = 0, hpos = 0
    for l in range(L):
        w_off[l] = pos
        pos += widths[l + 1] * widths[l]
        b_off[l] = pos
        pos += widths[l + 1]
        h_off[l] = hpos
        if l < L - 1:
            hpos += widths[l + 1]

    cdef double[:, ::1] G = np.empty((N + 1, nx))
    cdef double[:, ::1] Y = np.empty((N + 1, ny))
    cdef double[:, ::1] U = np.empty((max(N, 1), nu))
    cdef double[:, ::1] S = np.empty((max(N, 1), nu))
    cdef double[:, ::1] X = np.empty((max(N, 1), n_in))
    cdef double[:, ::1] PRE = np.empty((max(N, 1), max(tot_h, 1)))
    cdef double[:, ::1] H = np.empty((max(N, 1), max(tot_h, 1)))
    cdef double[:, ::1] TH = np.empty((max(N, 1), max(tot_h, 1)))
    cdef double[:, ::1] dU = np.empty((max(N, 1), nu))
    cdef double[::1] cur = np.empty(maxw)
    cdef double[::1] nxt = np.empty(maxw)
    cdef double[::1] lam = np.empty(nx)
    cdef double[::1] lam2 = np.empty(nx)
    cdef double[::1] dy = np.empty(ny)

    cdef double acc, r, diff, invN, t_track, t_du, t_con, t_term, c, span
    cdef double q_track = w[0], q_du = w[1], q_con = w[2], q_term = w[3]
    cdef const double* inp
    cdef const double* wr
    cdef const double* wt
    cdef double* grow
    cdef double* gw
    # raw pointers keep the inner loops free of memoryview bookkeeping
    cdef double* pc = &cur[0]
    cdef double* pn = &nxt[0]

    # transposed copy of every weight matrix: (in, out) row-major
    WT_np = np.empty(theta.shape[0])
    cdef double[::1] WT = WT_np
    for l in range(L):
        for j in range(widths[l + 1]):
            for i in range(widths[l]):
                WT[w_off[l] + i * widths[l + 1] + j] = theta[w_off[l] + j * widths[l] + i]

    with nogil:
        for s in range(i0, i1):
            # ---------------- forward ----------------
            for x in range(nx):
                G[0, x] = g0[s, x]
            for k in range(N):
                for j in range(ny):
                    acc = 0.0
                    for x in range(nx):
                        acc = acc + C[j, x] * G[k, x]
                    Y[k, j] = acc
                for j in range(ny):
                    X[k, j] = Y[k, j]
                    X[k, ny + j] = ymin[s, k, j]
                    X[k, 2 * ny + j] = ymax[s, k, j]
                for j in range(nd):
                    X[k, 3 * ny + j] = d[s, k, j]
                for l in range(L):
                    n_o = widths[l + 1]
                    n_i = widths[l]
                    if l == 0:
                        inp = &X[k, 0]
                    else:
                        inp = &H[k, h_off[l - 1]]
                    for j in range(n_o):
                        pc[j] = theta[b_off[l] + j]
                    for i in range(n_i):
                        c = inp[i]
                        wt = &WT[w_off[l] + i * n_o]
                        for j in range(n_o):
                            pc[j] = pc[j] + wt[j] * c
                    for j in range(n_o):
                        acc = pc[j]
                        if l < L - 1:
                            PRE[k, h_off[l] + j] = acc
                            c = _tanh(SQRT_2_OVER_PI * (acc + GELU_C * acc * acc * acc))
                            TH[k, h_off[l] + j] = c
                            H[k, h_off[l] + j] = 0.5 * acc * (1.0 + c)
                        else:
                            S[k, j] = _sigmoid(acc)
                            U[k, j] = umin[j] + (umax[j] - umin[j]) * S[k, j]
                for x in range(nx):
                    acc = 0.0
                    for i in range(nx):
                        acc = acc + A[x, i] * G[k, i]
                    for j in range(nu):
                        acc = acc + B[x, j] * U[k, j]
                    for j in range(nd):
                        acc = acc + E[x, j] * d[s, k, j]
                    G[k + 1, x] = acc
            for j in range(ny):
                acc = 0.0
                for x in range(nx):
                    acc = acc + C[j, x] * G[N, x]
                Y[N, j] = acc

            # ---------------- loss ----------------
            t_track = 0.0
            t_du = 0.0
            t_con = 0.0
            t_term = 0.0
            if N > 0:
                invN = 1.0 / N
                for k in range(N):
                    for j in range(ny):
                        r = 0.5 * (ymin[s, k, j] + ymax[s, k, j])
                        t_track = t_track + fabs(Y[k, j] - r)
                        if ymin[s, k, j] - Y[k, j] > 0:
                            t_con = t_con + (ymin[s, k, j] - Y[k, j])
                        if Y[k, j] - ymax[s, k, j] > 0:
                            t_con = t_con + (Y[k, j] - ymax[s, k, j])
                    if k > 0:
                        for j in range(nu):
                            diff = fabs(U[k, j] - U[k - 1, j])
                            t_du = t_du + diff
                            if diff - du_max > 0:
                                t_con = t_con + (diff - du_max)
                for j in range(ny):
                    r = 0.5 * (ymin[s, N - 1, j] + ymax[s, N - 1, j])
                    t_term = t_term + fabs(Y[N, j] - r)
                t_track = t_track * invN
                t_du = t_du * invN
                t_con = t_con * invN
            else:
                invN = 0.0
            terms_out[s, 0] = t_track
            terms_out[s, 1] = t_du
            terms_out[s, 2] = t_con
            terms_out[s, 3] = t_term
            loss_out[s] = q_track * t_track + q_term * t_term + q_du * t_du + q_con * t_con

            if not want_grad:
                continue

            # ---------------- backward ----------------
            grow = &grad_out[s, 0]
            for i in range(grad_out.shape[1]):
                grow[i] = 0.0
            if N == 0:
                continue
            for x in range(nx):
                lam[x] = 0.0
            for j in range(ny):
                r = 0.5 * (ymin[s, N - 1, j] + ymax[s, N - 1, j])
                c = q_term * _sign(Y[N, j] - r)
                for x in range(nx):
                    lam[x] = lam[x] + C[j, x] * c
            for k in range(N):
                for j in range(nu):
                    dU[k, j] = 0.0
            for k in range(1, N):
                for j in range(nu):
                    diff = U[k, j] - U[k - 1, j]
                    c = q_du * invN
                    if fabs(diff) - du_max > 0:
                        c = c + q_con * invN
                    c = c * _sign(diff)
                    dU[k, j] = dU[k, j] + c
                    dU[k - 1, j] = dU[k - 1, j] - c

            for k in range(N - 1, -1, -1):
                for j in range(nu):
                    acc = dU[k, j]
                    for x in range(nx):
                        acc = acc + B[x, j] * lam[x]
                    span = umax[j] - umin[j]
                    cur[j] = acc * span * S[k, j] * (1.0 - S[k, j])
                for l in range(L - 1, -1, -1):
                    n_o = widths[l + 1]
                    n_i = widths[l]
                    if l == 0:
                        inp = &X[k, 0]
                    else:
                        inp = &H[k, h_off[l - 1]]
                    for i in range(n_i):
                        pn[i] = 0.0
                    for j in range(n_o):
                        c = pc[j]
                        grow[b_off[l] + j] += c
                        gw = &grow[w_off[l] + j * n_i]
                        wr = &theta[w_off[l] + j * n_i]
                        for i in range(n_i):
                            gw[i] = gw[i] + c * inp[i]
                        for i in range(n_i):
                            pn[i] = pn[i] + wr[i] * c
                    if l > 0:
                        for i in range(n_i):
                            pc[i] = pn[i] * _dgelu(PRE[k, h_off[l - 1] + i], TH[k, h_off[l - 1] + i])
                    else:
                        for i in range(n_i):
                            pc[i] = pn[i]
                # cur now holds dL/dfeatures; the first ny entries feed back into y_k
                for j in range(ny):
                    r = 0.5 * (ymin[s, k, j] + ymax[s, k, j])
                    c = cur[j] + q_track * invN * _sign(Y[k, j] - r)
                    if Y[k, j] - ymax[s, k, j] > 0:
                        c = c + q_con * invN
                    if ymin[s, k, j] - Y[k, j] > 0:
                        c = c - q_con * invN
                    dy[j] = c
                for x in range(nx):
                    acc = 0.0
                    for i in range(nx):
                        acc = acc + A[i, x] * lam[i]
                    for j in range(ny):
                        acc = acc + C[j, x] * dy[j]
                    lam2[x] = acc
                for x in range(nx):
                    lam[x] = lam2[x]
