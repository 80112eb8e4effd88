"""Pure numpy closed-loop rollout + BPTT, vectorized across scenarios.

Drop-in fallback for the compiled ``_ckernels`` module (same signature,
same outputs up to floating-point summation order).
"""
from __future__ import annotations

import numpy as np

from .autodiff import _sigmoid, gelu_grad, gelu_value


def _unpack(theta, widths):
    layers = []
    pos = 0
    for n_i, n_o in zip(widths[:-1], widths[1:]):
        W = theta[pos:pos + n_o * n_i].reshape(n_o, n_i)
        pos += n_o * n_i
        layers.append((W, theta[pos:pos + n_o]))
        pos += n_o
    return layers


def rollout_range(theta, widths, A, B, C, E, umin, umax, du_max, g0, ymin, ymax, d, w,
                  loss_out, terms_out, grad_out, want_grad, i0, i1):
    widths = [int(v) for v in widths]
    layers = _unpack(np.asarray(theta), widths)
    L = len(layers)
    q_track, q_du, q_con, q_term = (float(v) for v in w)
    sl = slice(i0, i1)
    m = i1 - i0
    if m <= 0:
        return
    N = ymin.shape[1]
    nu = B.shape[1]
    ny = C.shape[0]
    lo = ymin[sl]                     # (m, N, ny)
    hi = ymax[sl]
    dist = d[sl]                      # (m, N, nd)
    ref = 0.5 * (lo + hi)
    span = umax - umin

    g = np.array(g0[sl])              # (m, nx)
    Y = np.empty((N + 1, m, ny))
    U = np.empty((N, m, nu))
    S = np.empty((N, m, nu))
    X = np.empty((N, m, widths[0]))
    pre = [np.empty((N, m, widths[l + 1])) for l in range(L - 1)]
    act = [np.empty((N, m, widths[l + 1])) for l in range(L - 1)]
    for k in range(N):
        y = g @ C.T
        Y[k] = y
        h = np.concatenate([y, lo[:, k], hi[:, k], dist[:, k]], axis=1)
        X[k] = h
        for l, (W, b) in enumerate(layers):
            a = h @ W.T + b
            if l < L - 1:
                pre[l][k] = a
                h = gelu_value(a)
                act[l][k] = h
            else:
                s = _sigmoid(a)
                S[k] = s
                U[k] = umin + span * s
        g = g @ A.T + U[k] @ B.T + dist[:, k] @ E.T
    Y[N] = g @ C.T

    if N > 0:
        invN = 1.0 / N
        Yk = Y[:N].transpose(1, 0, 2)  # (m, N, ny)
        t_track = np.abs(Yk - ref).sum(axis=(1, 2)) * invN
        band = np.maximum(lo - Yk, 0.0).sum(axis=(1, 2)) + np.maximum(Yk - hi, 0.0).sum(axis=(1, 2))
        dU = np.diff(U, axis=0)        # (N-1, m, nu)
        adu = np.abs(dU)
        t_du = adu.sum(axis=(0, 2)) * invN
        t_con = (band + np.maximum(adu - du_max, 0.0).sum(axis=(0, 2))) * invN
        t_term = np.abs(Y[N] - ref[:, N - 1]).sum(axis=1)
    else:
        invN = 0.0
        t_track = t_du = t_con = t_term = np.zeros(m)
    terms_out[sl, 0] = t_track
    terms_out[sl, 1] = t_du
    terms_out[sl, 2] = t_con
    terms_out[sl, 3] = t_term
    loss_out[sl] = q_track * t_track + q_term * t_term + q_du * t_du + q_con * t_con

    if not want_grad:
        return
    grad_out[sl] = 0.0
    if N == 0:
        return

    # direct control adjoints from the smoothness and rate-limit terms
    gU = np.zeros((N, m, nu))
    if N > 1:
        c = (q_du * invN + q_con * invN * (adu - du_max > 0)) * np.sign(dU)
        gU[1:] += c
        gU[:-1] -= c
    lam = (q_term * np.sign(Y[N] - ref[:, N - 1])) @ C     # (m, nx)
    deltas = [np.empty((N, m, widths[l + 1])) for l in range(L)]
    for k in range(N - 1, -1, -1):
        cur = (gU[k] + lam @ B) * span * S[k] * (1.0 - S[k])
        for l in range(L - 1, -1, -1):
            deltas[l][k] = cur
            W = layers[l][0]
            back = cur @ W
            if l > 0:
                back = back * gelu_grad(pre[l - 1][k])
            cur = back
        yk = Y[k]
        dy = (cur[:, :ny] + q_track * invN * np.sign(yk - ref[:, k])
              + q_con * invN * ((yk - hi[:, k] > 0).astype(float) - (lo[:, k] - yk > 0)))
        lam = lam @ A + dy @ C

    pos = 0
    gview = grad_out[sl]
    for l in range(L):
        n_i, n_o = widths[l], widths[l + 1]
        inputs = X if l == 0 else act[l - 1]
        gW = np.einsum("kmo,kmi->moi", deltas[l], inputs)
        gview[:, pos:pos + n_o * n_i] = gW.reshape(m, -1)
        pos += n_o * n_i
        gview[:, pos:pos + n_o] = deltas[l].sum(axis=0)
        pos += n_o
