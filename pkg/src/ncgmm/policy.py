"""Bounded MLP control policy.

The policy maps ``[y, y_min, y_max, d]`` to an insulin rate through GELU
hidden layers and a final linear layer whose output ``z`` is squashed
into the actuator range:

    u = u_min + (u_max - u_min) * sigmoid(z)

so every output lies strictly inside ``(u_min, u_max)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._io import atomic_write
from .errors import (CheckpointShapeError, CorruptFileError, ShapeError,
                     VersionMismatchError)

__all__ = [
    "MlpPolicy", "Checkpoint", "init_policy", "build_features", "forward",
    "save", "load", "save_checkpoint", "load_checkpoint", "MAGIC",
]

MAGIC = b"NCGMM1"
_MAGIC_PREFIX = b"NCGMM"
INIT_SCHEME = "uniform_glorot"


@dataclass
class MlpPolicy:
    """Weights ``W`` are (out, in); parameters flatten layer by layer as
    ``W`` row-major followed by ``b``."""

    layers: list
    u_min: np.ndarray
    u_max: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        self.u_min = np.atleast_1d(np.asarray(self.u_min, dtype=np.float64))
        self.u_max = np.atleast_1d(np.asarray(self.u_max, dtype=np.float64))
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.layers:
            raise ShapeError("policy needs at least one layer")
        layers = []
        prev = None
        for i, (W, b) in enumerate(self.layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if prev is not None and W.shape[1] != prev:
                raise ShapeError(f"layer {i}: expects {W.shape[1]} inputs, previous layer gives {prev}")
            prev = W.shape[0]
            layers.append((W, b))
        self.layers = layers
        if self.u_min.shape != (prev,) or self.u_max.shape != (prev,):
            raise ShapeError(f"bounds must have length nu={prev}")
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be < u_max elementwise")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def nu(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def shapes(self) -> list:
        """Layer table as ``[(out, in), ...]``."""
        return [tuple(W.shape) for W, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def with_flat(self, theta) -> "MlpPolicy":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        return MlpPolicy(unflatten(theta, self.shapes), self.u_min.copy(), self.u_max.copy(),
                         self.activation)

    def copy(self) -> "MlpPolicy":
        return self.with_flat(self.flat())

    def bind(self, tape: ad.Tape) -> list:
        """Register the weights as parameter leaves on ``tape``."""
        return [(tape.param(W), tape.param(b)) for W, b in self.layers]

    def act(self, features) -> np.ndarray:
        """Plain forward pass, no tape."""
        h = np.asarray(features, dtype=np.float64)
        if h.shape != (self.in_dim,):
            raise ShapeError(f"features: expected shape ({self.in_dim},), got {h.shape}")
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = W @ h + b
            if i < last:
                h = ad.gelu_value(h)
        return self.u_min + (self.u_max - self.u_min) * ad._sigmoid(h)


def unflatten(theta, shapes) -> list:
    layers = []
    pos = 0
    for o, i in shapes:
        W = theta[pos:pos + o * i].reshape(o, i).copy()
        pos += o * i
        b = theta[pos:pos + o].copy()
        pos += o
        layers.append((W, b))
    return layers


def init_policy(seed: int, in_dim: int, hidden: int = 32, depth: int = 2, nu: int = 1,
                u_min=(0.0,), u_max=(5.0,)) -> MlpPolicy:
    """Glorot-uniform weights, zero biases, deterministic per ``seed``."""
    for name, v in (("in_dim", in_dim), ("hidden", hidden), ("nu", nu)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if int(depth) < 0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    rng = np.random.default_rng(seed)
    widths = [int(in_dim)] + [int(hidden)] * int(depth) + [int(nu)]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return MlpPolicy(layers, u_min, u_max)


def build_features(y, y_min, y_max, d) -> np.ndarray:
    """Concatenate ``[y, y_min, y_max, d]`` in that order."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    y_min = np.atleast_1d(np.asarray(y_min, dtype=np.float64))
    y_max = np.atleast_1d(np.asarray(y_max, dtype=np.float64))
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    if not (y.ndim == y_min.ndim == y_max.ndim == d.ndim == 1):
        raise ShapeError("features must be built from vectors")
    if y_min.shape != y.shape or y_max.shape != y.shape:
        raise ShapeError(f"band shapes {y_min.shape}/{y_max.shape} do not match y {y.shape}")
    return np.concatenate([y, y_min, y_max, d])


def forward(policy: MlpPolicy, features, tape: ad.Tape, params=None) -> ad.NodeRef:
    """Record the policy on ``tape`` and return the control node.

    ``params`` comes from :meth:`MlpPolicy.bind`; pass the same list for
    every step of a rollout so gradients accumulate on shared leaves.
    """
    if params is None:
        params = policy.bind(tape)
    h = tape.lift(features)
    if h.shape != (policy.in_dim,):
        raise ShapeError(f"features: expected shape ({policy.in_dim},), got {h.shape}")
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        h = ad.add(ad.matvec(W, h), b)
        if i < last:
            h = ad.gelu(h)
    s = ad.sigmoid(h)
    return ad.add(ad.mul(s, policy.u_max - policy.u_min), policy.u_min)


def flatten_grads(grads: ad.Gradients, params) -> np.ndarray:
    return np.concatenate([np.concatenate([grads[W].ravel(), grads[b]]) for W, b in params])


@dataclass
class Checkpoint:
    """Policy plus training metadata (epoch, dev loss, seed, ...)."""

    policy: MlpPolicy
    meta: dict = field(default_factory=dict)
    version: int = 1


def _encode(ckpt: Checkpoint) -> bytes:
    p = ckpt.policy
    header = {
        "layers": [list(s) for s in p.shapes],
        "activation": p.activation,
        "u_min": p.u_min.tolist(),
        "u_max": p.u_max.tolist(),
        "n_params": p.n_params,
        "meta": {"init": INIT_SCHEME, **ckpt.meta},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    return MAGIC + b"\n" + head + b"\n" + p.flat().astype("<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, _encode(ckpt))


def save(policy: MlpPolicy, path, **meta) -> None:
    save_checkpoint(Checkpoint(policy, meta), path)


def load_checkpoint(path, expect_shapes=None) -> Checkpoint:
    """Read a checkpoint; ``expect_shapes`` is an optional layer table to
    validate against (raises :class:`CheckpointShapeError` on mismatch)."""
    raw = Path(path).read_bytes()
    first, sep, rest = raw.partition(b"\n")
    if not sep or not first.startswith(_MAGIC_PREFIX):
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic)")
    if first != MAGIC:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {first.decode(errors='replace')!r}")
    head, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(head)
        shapes = [tuple(int(v) for v in s) for s in header["layers"]]
        n = int(header["n_params"])
        u_min, u_max = header["u_min"], header["u_max"]
        activation = header["activation"]
        meta = dict(header.get("meta", {}))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: malformed header ({exc})") from None
    if n != sum(o * i + o for o, i in shapes):
        raise CorruptFileError(f"{path}: parameter count {n} does not match layer table")
    if len(payload) != 8 * n:
        raise CorruptFileError(f"{path}: expected {8 * n} parameter bytes, found {len(payload)}")
    if expect_shapes is not None and [tuple(s) for s in expect_shapes] != shapes:
        raise CheckpointShapeError(f"{path}: layer table {shapes} does not match expected {list(expect_shapes)}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        policy = MlpPolicy(unflatten(theta, shapes), u_min, u_max, activation)
    except (ValueError, ShapeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    meta.pop("init", None)
    return Checkpoint(policy, meta)


def load(path, expect_shapes=None) -> MlpPolicy:
    return load_checkpoint(path, expect_shapes).policy


def expected_shapes(in_dim: int, hidden: int, depth: int, nu: int) -> list:
    widths = [in_dim] + [hidden] * depth + [nu]
    return [(o, i) for i, o in zip(widths[:-1], widths[1:])]
