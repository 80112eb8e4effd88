"""Differentiable closed-loop rollout and the penalty-method training loss.

For a scenario with band ``[y_min_k, y_max_k]`` and reference
``r_k = (y_min_k + y_max_k) / 2`` the loss is

    q_track    * mean_k |y_k - r_k|
  + q_terminal * |y_N - r_N|
  + q_du       * mean_k |u_k - u_{k-1}|
  + q_con      * mean_k [relu(y_min_k - y_k) + relu(y_k - y_max_k)
                         + relu(|u_k - u_{k-1}| - du_max)]

with ``k = 0..N-1``, ``r_N := r_{N-1}`` and ``u_{-1} := u_0``.  Vector
outputs are summed over components inside each absolute value/hinge.

:func:`rollout` and :func:`loss` record everything on an autodiff tape.
:func:`batch_loss` uses the fused kernels in :mod:`ncgmm.kernels` by
default; ``engine="tape"`` runs the tape path instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ShapeError
from .plant import LinearSSM
from .policy import MlpPolicy, flatten_grads
from .policy import forward as policy_forward

__all__ = ["LossWeights", "RolloutResult", "BatchLoss", "rollout", "loss", "batch_loss",
           "fast_batch_loss", "scenario_loss"]


@dataclass(frozen=True)
class LossWeights:
    q_track: float = 0.01
    q_du: float = 0.1
    q_con: float = 0.02
    q_terminal: float = 0.01

    def __post_init__(self):
        for name in ("q_track", "q_du", "q_con", "q_terminal"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name}: must be >= 0, got {getattr(self, name)}")

    def as_tuple(self):
        """Kernel ordering: ``(q_track, q_du, q_con, q_terminal)``."""
        return (self.q_track, self.q_du, self.q_con, self.q_terminal)


@dataclass
class RolloutResult:
    g: list                     # N+1 state nodes
    y: list                     # N+1 output nodes
    u: list                     # N control nodes
    params: list                # policy parameter leaves
    du_max: float = 1.0
    loss: ad.NodeRef | None = None
    terms: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.u)

    def values(self, name) -> np.ndarray:
        return np.array([ref.value for ref in getattr(self, name)])


def rollout(model: LinearSSM, policy, scenario, N: int, tape: ad.Tape, params=None) -> RolloutResult:
    """Unroll policy and plant for ``N`` steps on ``tape``.

    ``policy`` is an :class:`MlpPolicy` or any object with the same
    ``bind(tape)`` / ``forward(features, tape, params)`` pair.
    """
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    if scenario.y_min.shape[0] < N or scenario.y_max.shape[0] < N or scenario.d.shape[0] < N:
        raise ShapeError(f"scenario {scenario.id}: band/disturbance shorter than N={N}")
    if np.shape(scenario.g0) != (model.nx,):
        raise ShapeError(f"scenario {scenario.id}: g0 has shape {np.shape(scenario.g0)}, plant nx={model.nx}")
    if params is None:
        params = policy.bind(tape)
    fwd = _forward_fn(policy)
    g = tape.const(scenario.g0)
    gs, ys, us = [g], [], []
    for k in range(N):
        y = ad.matvec(model.C, g)
        feats = ad.concat(y, scenario.y_min[k], scenario.y_max[k], scenario.d[k])
        u = fwd(feats, tape, params)
        if u.shape != (model.nu,):
            raise ShapeError(f"policy produced shape {u.shape}, plant nu={model.nu}")
        g = ad.add(ad.add(ad.matvec(model.A, g), ad.matvec(model.B, u)), tape.apply("matvec", model.E, scenario.d[k]))
        ys.append(y)
        us.append(u)
        gs.append(g)
    ys.append(ad.matvec(model.C, g))
    return RolloutResult(gs, ys, us, params, model.du_max)


def _forward_fn(policy):
    if isinstance(policy, MlpPolicy):
        return lambda feats, tape, params: policy_forward(policy, feats, tape, params)
    return policy.forward


def loss(result: RolloutResult, scenario, weights: LossWeights, tape: ad.Tape) -> ad.NodeRef:
    """Scalar penalty loss for a recorded rollout; fills ``result.terms``."""
    N = result.N
    if N == 0:
        zero = tape.const(0.0)
        result.loss = zero
        result.terms = {name: 0.0 for name in kernels.TERM_NAMES}
        return zero
    ref = 0.5 * (scenario.y_min[:N] + scenario.y_max[:N])
    track, du, con = [], [], []
    prev_u = result.u[0]
    for k in range(N):
        y, u = result.y[k], result.u[k]
        track.append(ad.sum(ad.abs(ad.sub(y, ref[k]))))
        step_du = ad.abs(ad.sub(u, prev_u))
        du.append(ad.sum(step_du))
        band = ad.add(ad.sum(ad.relu(ad.sub(scenario.y_min[k], y))),
                      ad.sum(ad.relu(ad.sub(y, scenario.y_max[k]))))
        rate = ad.sum(ad.relu(ad.sub(step_du, np.full(u.shape, result.du_max))))
        con.append(ad.add(band, rate))
        prev_u = u
    t_track = ad.mean(ad.concat(*track))
    t_du = ad.mean(ad.concat(*du))
    t_con = ad.mean(ad.concat(*con))
    t_term = ad.sum(ad.abs(ad.sub(result.y[N], ref[N - 1])))
    total = ad.add(ad.add(ad.add(ad.scale(t_track, weights.q_track), ad.scale(t_term, weights.q_terminal)),
                          ad.scale(t_du, weights.q_du)),
                   ad.scale(t_con, weights.q_con))
    result.loss = total
    result.terms = {"track": float(t_track.value), "du": float(t_du.value),
                    "con": float(t_con.value), "terminal": float(t_term.value)}
    return total


def scenario_loss(model, policy: MlpPolicy, scenario, N, weights):
    """Tape route for one scenario: ``(loss, terms, flat gradient)``."""
    tape = ad.Tape()
    params = policy.bind(tape)
    res = rollout(model, policy, scenario, N, tape, params)
    root = loss(res, scenario, weights, tape)
    grads = tape.backward(root)
    return float(root.value), res.terms, flatten_grads(grads, params)


@dataclass
class BatchLoss:
    loss: float
    grad: np.ndarray | None
    terms: dict


def check_dims(model: LinearSSM, policy: MlpPolicy):
    if policy.in_dim != 3 * model.ny + model.nd or policy.nu != model.nu:
        raise ShapeError(f"policy dims (in={policy.in_dim}, nu={policy.nu}) do not fit plant "
                         f"(expects in={3 * model.ny + model.nd}, nu={model.nu})")


def _widths(policy: MlpPolicy):
    return [policy.in_dim] + [o for o, _ in policy.shapes]


def batch_loss(model: LinearSSM, policy: MlpPolicy, scenarios, N=None, weights=LossWeights(),
               want_grad=True, threads=1, engine="fast", backend=None) -> BatchLoss:
    """Mean loss over a batch of scenarios and its gradient w.r.t. the flat
    policy parameters.

    ``scenarios`` is a list of :class:`~ncgmm.scenarios.Scenario` or a
    :class:`~ncgmm.scenarios.Dataset`.  Reduction is always in ascending
    scenario order, so ``threads`` never changes the result.
    """
    arrays = getattr(scenarios, "arrays", None)
    scen = list(scenarios.scenarios) if arrays is not None else list(scenarios)
    if not scen:
        raise ValueError("batch_loss needs at least one scenario")
    if N is None:
        N = scen[0].N
    check_dims(model, policy)
    if engine == "tape":
        per = [scenario_loss(model, policy, s, N, weights) for s in scen]
        lv = np.array([p[0] for p in per])
        tv = np.array([[p[1][n] for n in kernels.TERM_NAMES] for p in per])
        gv = np.array([p[2] for p in per]) if want_grad else None
    elif engine == "fast":
        if arrays is None:
            arrays = (np.stack([s.g0 for s in scen]), np.stack([s.y_min for s in scen]),
                      np.stack([s.y_max for s in scen]), np.stack([s.d for s in scen]))
        return fast_batch_loss(model, policy, arrays, weights, N, want_grad, threads, backend)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    total, terms, grad = kernels.reduce_mean(lv, tv, gv)
    return BatchLoss(total, grad, dict(zip(kernels.TERM_NAMES, terms.tolist())))


def fast_batch_loss(model: LinearSSM, policy: MlpPolicy, arrays, weights=LossWeights(), N=None,
                    want_grad=True, threads=1, backend=None) -> BatchLoss:
    """Kernel route on pre-stacked ``(g0, y_min, y_max, d)`` arrays."""
    check_dims(model, policy)
    g0, lo, hi, d = arrays
    N = lo.shape[1] if N is None else N
    if lo.shape[1] < N or d.shape[1] < N:
        raise ShapeError(f"scenarios shorter than N={N}")
    if g0.shape[1] != model.nx or lo.shape[2] != model.ny or d.shape[2] != model.nd:
        raise ShapeError("scenario dimensions do not match the plant")
    arrays = (g0, lo[:, :N], hi[:, :N], d[:, :N])
    lv, tv, gv = kernels.per_scenario(policy.flat(), _widths(policy), model, arrays,
                                      weights.as_tuple(), want_grad, threads, backend)
    total, terms, grad = kernels.reduce_mean(lv, tv, gv)
    return BatchLoss(total, grad, dict(zip(kernels.TERM_NAMES, terms.tolist())))
