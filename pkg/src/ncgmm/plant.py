"""Discrete-time linear state-space model of glucose dynamics.

    g[k+1] = A g[k] + B u[k] + E d[k]
    y[k]   = C g[k]

``g`` is the glucose-related state, ``u`` the insulin rate, ``d`` an
exogenous disturbance (meals, endogenous production) and ``y`` the
measured output.  Everything is float64 and in raw model units.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = [
    "LinearSSM",
    "default_model",
    "step",
    "observe",
    "euler_discretize",
    "spectral_radius",
]


def _as_matrix(name, value):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _as_vector(name, value, n=None):
    arr = np.atleast_1d(np.array(value, dtype=np.float64))
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{name}: expected length {n}, got {arr.shape[0]}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LinearSSM:
    """Immutable plant definition with actuator limits.

    Parameters
    ----------
    A, B, C, E : array_like
        State transition (nx, nx), input gain (nx, nu), observation map
        (ny, nx) and disturbance gain (nx, nd).
    u_min, u_max : array_like
        Elementwise insulin-rate bounds, length nu.
    du_max : float
        Largest allowed per-step change of the control.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    E: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    du_max: float = 1.0
    nx: int = field(init=False)
    nu: int = field(init=False)
    ny: int = field(init=False)
    nd: int = field(init=False)

    def __post_init__(self):
        set_ = object.__setattr__
        A = _as_matrix("A", self.A)
        B = _as_matrix("B", self.B)
        C = _as_matrix("C", self.C)
        E = _as_matrix("E", self.E)
        nx = A.shape[0]
        if A.shape != (nx, nx):
            raise ShapeError(f"A: must be square, got shape {A.shape}")
        if B.shape[0] != nx:
            raise ShapeError(f"B: expected {nx} rows to match A, got shape {B.shape}")
        if C.shape[1] != nx:
            raise ShapeError(f"C: expected {nx} columns to match A, got shape {C.shape}")
        if E.shape[0] != nx:
            raise ShapeError(f"E: expected {nx} rows to match A, got shape {E.shape}")
        nu, ny, nd = B.shape[1], C.shape[0], E.shape[1]
        if min(nu, ny, nd) < 1:
            raise ShapeError("B, C and E must each have at least one column/row")
        u_min = _as_vector("u_min", self.u_min, nu)
        u_max = _as_vector("u_max", self.u_max, nu)
        if not np.all(u_min < u_max):
            raise ValueError(f"u_min must be < u_max elementwise, got {u_min} and {u_max}")
        du_max = float(self.du_max)
        if not du_max > 0:
            raise ValueError(f"du_max must be positive, got {du_max}")
        for name, val in (("A", A), ("B", B), ("C", C), ("E", E)):
            set_(self, name, val)
        set_(self, "u_min", u_min)
        set_(self, "u_max", u_max)
        set_(self, "du_max", du_max)
        set_(self, "nx", nx)
        set_(self, "nu", nu)
        set_(self, "ny", ny)
        set_(self, "nd", nd)

    def step(self, g, u, d):
        return step(self, g, u, d)

    def observe(self, g):
        return observe(self, g)


def default_model() -> LinearSSM:
    """Scalar plant: insulin lowers glucose, disturbance raises it."""
    return LinearSSM(
        A=[[0.95]], B=[[-0.5]], C=[[1.0]], E=[[0.3]],
        u_min=[0.0], u_max=[5.0], du_max=1.0,
    )


def _check_vec(name, v, n):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ShapeError(f"{name}: expected shape ({n},), got {v.shape}")
    return v


def step(model: LinearSSM, g, u, d) -> np.ndarray:
    """Advance the plant one step: ``A g + B u + E d``."""
    g = _check_vec("g", g, model.nx)
    u = _check_vec("u", u, model.nu)
    d = _check_vec("d", d, model.nd)
    return model.A @ g + model.B @ u + model.E @ d


def observe(model: LinearSSM, g) -> np.ndarray:
    g = _check_vec("g", g, model.nx)
    return model.C @ g


def euler_discretize(Ac, Bc, Ec, dt, C=None, u_min=(0.0,), u_max=(5.0,), du_max=1.0) -> LinearSSM:
    """Forward-Euler discretization of ``dg/dt = Ac g + Bc u + Ec d``.

    Returns ``A = I + dt Ac``, ``B = dt Bc``, ``E = dt Ec``.  ``C`` defaults
    to the identity; bounds are passed through unchanged.
    """
    Ac = np.array(Ac, dtype=np.float64)
    if Ac.ndim != 2 or Ac.shape[0] != Ac.shape[1]:
        raise ShapeError(f"Ac: must be square, got shape {Ac.shape}")
    dt = float(dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    nx = Ac.shape[0]
    if C is None:
        C = np.eye(nx)
    return LinearSSM(
        A=np.eye(nx) + dt * Ac,
        B=dt * np.array(Bc, dtype=np.float64),
        C=C,
        E=dt * np.array(Ec, dtype=np.float64),
        u_min=u_min, u_max=u_max, du_max=du_max,
    )


def spectral_radius(A, rtol=1e-9, max_iter=10_000) -> float:
    """Largest eigenvalue modulus by power iteration.

    Each iteration fits ``A^2 x = a A x + b x`` in the current Krylov pair,
    so a dominant complex-conjugate pair (where plain power iteration
    oscillates) is resolved through the roots of ``t^2 - a t - b``.  When
    ``x`` and ``A x`` are parallel the ordinary Rayleigh ratio is used.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"A: must be square, got shape {A.shape}")
    n = A.shape[0]
    if not np.any(A):
        return 0.0
    # fixed, non-symmetric start vector keeps results reproducible
    x = 1.0 + np.arange(n, dtype=np.float64) / (n + 1.0)
    x /= np.linalg.norm(x)
    prev = None
    for _ in range(max_iter):
        y = A @ x
        ny_ = np.linalg.norm(y)
        if ny_ == 0.0:
            return 0.0
        z = A @ y
        cos = abs(x @ y) / ny_
        if 1.0 - cos < 1e-14:
            est = ny_
            resid = np.linalg.norm(y - (x @ y) * x) / ny_
        else:
            K = np.column_stack([y, x])
            (a, b), *_ = np.linalg.lstsq(K, z, rcond=None)
            est = float(np.max(np.abs(np.roots([1.0, -a, -b]))))
            resid = np.linalg.norm(z - a * y - b * x) / max(np.linalg.norm(z), 1e-300)
        if (prev is not None and abs(est - prev) <= rtol * max(est, 1e-300)
                and resid <= 1e-7):
            return float(est)
        prev = est
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        x = z / nz
    raise ArithmeticError(f"power iteration did not converge in {max_iter} iterations")
