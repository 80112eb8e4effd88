"""Batched closed-loop loss and gradient, backed by a compiled kernel when
available.

The compiled ``_ckernels`` extension is used if it imports; otherwise, or
when ``NCGMM_PURE_PYTHON=1`` is set, the numpy implementation in
``_pykernels`` is used.  Both compute, per scenario, the rollout loss, its
four terms and the flat parameter gradient.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

TERM_NAMES = ("track", "du", "con", "terminal")

# Scenarios are always evaluated in ranges of this size, whatever the
# thread count, so per-scenario results never depend on --threads.
CHUNK = 16

_BACKENDS = {"python": _pykernels}
try:
    from . import _ckernels
    _BACKENDS["compiled"] = _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

if os.environ.get("NCGMM_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def available_backends() -> list:
    return sorted(_BACKENDS)


def _module(backend):
    name = BACKEND if backend is None else backend
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})") from None


def per_scenario(theta, widths, model, arrays, weights, want_grad=True, threads=1, backend=None):
    """Loss, terms and gradient for every scenario in ``arrays``.

    Parameters
    ----------
    theta : ndarray
        Flat policy parameters (layer by layer, ``W`` row-major then ``b``).
    widths : sequence of int
        ``[in_dim, hidden..., nu]``.
    model : LinearSSM
    arrays : tuple
        ``(g0, y_min, y_max, d)`` with a leading scenario axis.
    weights : sequence of float
        ``(q_track, q_du, q_con, q_terminal)``.

    Returns
    -------
    loss : (m,) ndarray
    terms : (m, 4) ndarray, columns ordered as ``TERM_NAMES``
    grads : (m, P) ndarray or None
    """
    mod = _module(backend)
    g0, ymin, ymax, d = (np.ascontiguousarray(a, dtype=np.float64) for a in arrays)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    widths = np.ascontiguousarray(widths, dtype=np.int_)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    m = g0.shape[0]
    loss = np.zeros(m)
    terms = np.zeros((m, 4))
    grads = np.zeros((m, theta.size)) if want_grad else np.zeros((1, 1))
    args = (theta, widths, model.A, model.B, model.C, model.E, model.u_min, model.u_max,
            float(model.du_max), g0, ymin, ymax, d, w, loss, terms, grads, bool(want_grad))
    ranges = [(i, min(i + CHUNK, m)) for i in range(0, m, CHUNK)]
    if threads <= 1 or len(ranges) <= 1:
        for i0, i1 in ranges:
            mod.rollout_range(*args, i0, i1)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: mod.rollout_range(*args, *r), ranges))
    return loss, terms, (grads if want_grad else None)


def reduce_mean(loss, terms, grads=None):
    """Mean over scenarios, accumulated in ascending scenario order."""
    m = loss.shape[0]
    total = 0.0
    for v in loss:
        total += float(v)
    term_acc = np.zeros(terms.shape[1])
    for row in terms:
        term_acc += row
    g = None
    if grads is not None:
        g = np.zeros(grads.shape[1])
        for row in grads:
            g += row
        g /= m
    return total / m, term_acc / m, g
