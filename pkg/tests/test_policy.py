import json
import math
from pathlib import Path

import numpy as np
import pytest

from ncgmm import autodiff as ad
from ncgmm import policy as pol
from ncgmm.errors import CheckpointShapeError, CorruptFileError, ShapeError, VersionMismatchError

GOLDEN = Path(__file__).parent / "golden" / "policy_seed7.json"


def zero_policy(in_dim=4, hidden=32, u_min=(0.0,), u_max=(5.0,)):
    p = pol.init_policy(0, in_dim, hidden, 2, len(u_min), u_min, u_max)
    return p.with_flat(np.zeros(p.n_params))


def straight_line_forward(p, x):
    """Independent scalar-loop forward pass used as an oracle."""
    h = [float(v) for v in x]
    c = math.sqrt(2.0 / math.pi)
    for li, (W, b) in enumerate(p.layers):
        out = []
        for r in range(W.shape[0]):
            acc = float(b[r])
            for k in range(W.shape[1]):
                acc += float(W[r, k]) * h[k]
            if li < len(p.layers) - 1:
                acc = 0.5 * acc * (1.0 + math.tanh(c * (acc + 0.044715 * acc ** 3)))
            out.append(acc)
        h = out
    return [lo + (hi - lo) / (1.0 + math.exp(-z)) for lo, hi, z in zip(p.u_min, p.u_max, h)]


# -- init --------------------------------------------------------------------

def test_init_deterministic():
    a, b = pol.init_policy(5, 4), pol.init_policy(5, 4)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_init_seed_changes_params():
    assert not np.array_equal(pol.init_policy(5, 4).flat(), pol.init_policy(6, 4).flat())


def test_param_count():
    p = pol.init_policy(0, 4, hidden=32, nu=1)
    assert p.n_params == 4 * 32 + 32 + 32 * 32 + 32 + 32 * 1 + 1 == 1249
    assert p.shapes == [(32, 4), (32, 32), (1, 32)]


def test_init_scheme():
    p = pol.init_policy(3, 4)
    for W, b in p.layers:
        s = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        assert np.all(np.abs(W) <= s) and np.all(b == 0)


@pytest.mark.parametrize("kw", [dict(in_dim=0), dict(hidden=0), dict(nu=0), dict(depth=-1)])
def test_init_rejects_bad_dims(kw):
    args = dict(seed=0, in_dim=4)
    args.update(kw)
    with pytest.raises(ValueError):
        pol.init_policy(**args)


# -- features ----------------------------------------------------------------

def test_build_features_order():
    assert pol.build_features([13], [12], [14], [0.2]).tolist() == [13, 12, 14, 0.2]
    assert pol.build_features([0], [0], [0], [0]).tolist() == [0, 0, 0, 0]
    f = pol.build_features([1, 2], [3, 4], [5, 6], [7])
    assert f.tolist() == [1, 2, 3, 4, 5, 6, 7]


def test_build_features_shape_error():
    with pytest.raises(ShapeError):
        pol.build_features([1, 2], [3], [5, 6], [7])


# -- forward -----------------------------------------------------------------

def test_zero_policy_midpoint():
    p = zero_policy()
    assert p.act([13, 12, 14, 0]).tolist() == [2.5]
    t = ad.Tape()
    assert pol.forward(p, np.array([13.0, 12, 14, 0]), t).value.tolist() == [2.5]


@pytest.mark.parametrize("z,expected", [(50.0, 5.0), (-50.0, 0.0)])
def test_saturation_limits(z, expected):
    p = zero_policy()
    W, b = p.layers[-1]
    b[:] = z
    assert p.act(np.zeros(4))[0] == pytest.approx(expected, abs=1e-9)


def test_golden_forward():
    golden = json.loads(GOLDEN.read_text())
    p = pol.init_policy(golden["seed"], 4)
    u = p.act(golden["features"])
    assert u[0] == golden["u"]
    assert straight_line_forward(p, golden["features"])[0] == pytest.approx(golden["u"], rel=1e-14)
    t = ad.Tape()
    assert float(pol.forward(p, np.array(golden["features"]), t).value[0]) == pytest.approx(u[0], rel=1e-15)


def test_tape_and_plain_forward_agree(rng):
    for s in range(20):
        p = pol.init_policy(s, 5, hidden=6, nu=2, u_min=(-1.0, 0.0), u_max=(1.0, 3.0))
        x = rng.normal(size=5) * 3
        t = ad.Tape()
        np.testing.assert_allclose(pol.forward(p, x, t).value, p.act(x), rtol=1e-14)
        np.testing.assert_allclose(p.act(x), straight_line_forward(p, x), rtol=1e-12)


def test_forward_shape_error():
    p = pol.init_policy(0, 4)
    with pytest.raises(ShapeError):
        p.act(np.zeros(3))
    with pytest.raises(ShapeError):
        pol.forward(p, np.zeros(5), ad.Tape())


def test_bounds_10000_draws():
    rng = np.random.default_rng(99)
    base = pol.init_policy(0, 4, hidden=8)
    lo, hi = -2.0, 3.0
    for _ in range(10_000):
        p = base.with_flat(rng.normal(size=base.n_params) * rng.uniform(0.1, 3.0))
        p.u_min, p.u_max = np.array([lo]), np.array([hi])
        u = p.act(rng.normal(size=4) * 10)
        # strictly inside unless sigmoid rounds to exactly 0 or 1
        assert lo <= u[0] <= hi


def test_bounds_strict_for_moderate_inputs():
    rng = np.random.default_rng(3)
    base = pol.init_policy(0, 4)
    for _ in range(2000):
        p = base.with_flat(rng.normal(size=base.n_params) * 0.1)
        u = p.act(rng.uniform(-1, 1, size=4))
        assert 0.0 < u[0] < 5.0


def test_gradient_flow_and_fd():
    p = pol.init_policy(11, 4, hidden=6)
    theta0 = p.flat() * 0.5
    x = np.array([0.3, -0.2, 0.5, 0.1])

    def f(theta):
        return float(np.sum(p.with_flat(theta).act(x) ** 2))

    t = ad.Tape()
    q = p.with_flat(theta0)
    params = q.bind(t)
    u = pol.forward(q, x, t, params)
    g = pol.flatten_grads(t.backward(ad.sum(ad.mul(u, u))), params)
    fd = ad.finite_diff_grad(f, theta0)
    assert np.count_nonzero(g) > 0.9 * g.size
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


def test_every_feature_matters():
    p = pol.init_policy(4, 4, hidden=8)
    p = p.with_flat(p.flat() * 0.3)
    x = np.array([0.5, 0.2, 0.9, 0.1])
    u0 = p.act(x)
    for i in range(4):
        x2 = x.copy()
        x2[i] += 0.1
        assert p.act(x2)[0] != u0[0]


def test_with_flat_roundtrip():
    p = pol.init_policy(2, 4)
    assert p.with_flat(p.flat()).flat().tobytes() == p.flat().tobytes()
    with pytest.raises(ShapeError):
        p.with_flat(np.zeros(3))


def test_policy_validation():
    with pytest.raises(ShapeError):
        pol.MlpPolicy([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((1, 2)), np.zeros(1))], [0.0], [1.0])
    with pytest.raises(ValueError):
        pol.MlpPolicy([(np.zeros((1, 4)), np.zeros(1))], [1.0], [1.0])
    with pytest.raises(ValueError):
        pol.MlpPolicy([(np.zeros((1, 4)), np.zeros(1))], [0.0], [1.0], activation="relu")


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    p = pol.init_policy(9, 4)
    path = tmp_path / "p.ckpt"
    pol.save(p, path, epoch=3, dev_loss=0.5, seed=9)
    ck = pol.load_checkpoint(path)
    assert ck.policy.flat().tobytes() == p.flat().tobytes()
    assert ck.meta == {"epoch": 3, "dev_loss": 0.5, "seed": 9}
    assert ck.policy.shapes == p.shapes
    assert np.array_equal(ck.policy.u_max, p.u_max)


def test_checkpoint_layout(tmp_path):
    p = pol.init_policy(1, 4, hidden=3)
    path = tmp_path / "p.ckpt"
    pol.save(p, path)
    raw = path.read_bytes()
    magic, head, payload = raw.split(b"\n", 2)
    assert magic == b"NCGMM1"
    header = json.loads(head)
    assert header["layers"] == [[3, 4], [3, 3], [1, 3]]
    assert header["meta"]["init"] == "uniform_glorot"
    assert np.frombuffer(payload, "<f8").tobytes() == p.flat().astype("<f8").tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "p.ckpt"
    pol.save(pol.init_policy(1, 4), path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CorruptFileError):
        pol.load(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "p.ckpt"
    path.write_bytes(b"hello\n{}\n")
    with pytest.raises(CorruptFileError):
        pol.load(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    pol.save(pol.init_policy(1, 4), path)
    path.write_bytes(b"NCGMM2" + path.read_bytes()[6:])
    with pytest.raises(VersionMismatchError):
        pol.load(path)


def test_checkpoint_hidden_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    pol.save(pol.init_policy(1, 4, hidden=16), path)
    with pytest.raises(CheckpointShapeError):
        pol.load(path, expect_shapes=pol.expected_shapes(4, 32, 2, 1))


def test_checkpoint_errors_are_distinct():
    assert not issubclass(CorruptFileError, VersionMismatchError)
    assert not issubclass(VersionMismatchError, CorruptFileError)
    assert not issubclass(CheckpointShapeError, CorruptFileError)
