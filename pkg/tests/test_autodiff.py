import math

import numpy as np
import pytest

from ncgmm import autodiff as ad
from ncgmm.errors import ShapeError


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


# -- forward examples ----------------------------------------------------------

def test_gelu_zero():
    t = ad.Tape()
    assert ad.gelu(t.param(0.0)).value == 0.0


def test_abs_value():
    t = ad.Tape()
    assert ad.abs(t.param(-3.5)).value == 3.5


def test_gelu_three():
    t = ad.Tape()
    hand = 0.5 * 3 * (1 + math.tanh(math.sqrt(2 / math.pi) * (3 + 0.044715 * 27)))
    v = float(ad.gelu(t.param(3.0)).value)
    assert v == pytest.approx(2.99636, abs=1e-4)
    assert v == pytest.approx(hand, abs=1e-15)


def test_shape_error_names_kind_and_shapes():
    t = ad.Tape()
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(t.param(np.ones(2)), t.param(np.ones(3)))
    with pytest.raises(ShapeError, match="matvec"):
        ad.matvec(np.ones((2, 3)), t.param(np.ones(2)))


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.Tape().apply("tanh", 1.0)


def test_rank3_rejected():
    with pytest.raises(ShapeError):
        ad.Tape().param(np.zeros((2, 2, 2)))


# -- backward examples ---------------------------------------------------------

def test_square_gradient():
    t = ad.Tape()
    x = t.param(3.0)
    g = t.backward(x * x)
    assert g[x] == 6.0


def test_matvec_sum_gradient():
    t = ad.Tape()
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    v = t.param([1.0, 1.0])
    root = ad.sum(ad.matvec(M, v))
    g = t.backward(root)
    assert g[v].tolist() == [4.0, 6.0]
    assert g[root] == 1.0


def test_mean_gelu_matrix_gradient(rng):
    W0 = rng.normal(size=(4, 4))
    x = rng.normal(size=4)

    def f(flat):
        return float(np.mean(ad.gelu_value(flat.reshape(4, 4) @ x)))

    t = ad.Tape()
    W = t.param(W0)
    g = t.backward(ad.mean(ad.gelu(ad.matvec(W, x))))
    assert rel_err(g[W].ravel(), ad.finite_diff_grad(f, W0.ravel())) <= 1e-6


def test_backward_requires_scalar_root():
    t = ad.Tape()
    with pytest.raises(ShapeError):
        t.backward(t.param([1.0, 2.0]))


def test_unused_param_gets_zero_gradient():
    t = ad.Tape()
    x, y = t.param([1.0, 2.0]), t.param(5.0)
    g = t.backward(ad.sum(x))
    assert np.array_equal(g[y], 0.0)
    assert set(map(lambda r: r.id, g.params())) == {x.id, y.id}


def test_operator_overloads():
    t = ad.Tape()
    x = t.param(2.0)
    y = 3.0 * x - 1.0 + x * x + (-x)
    assert float(y.value) == 3 * 2 - 1 + 4 - 2
    assert t.backward(y)[x] == 3 + 4 - 1


# -- finite differences --------------------------------------------------------

def test_fd_quadratic():
    assert ad.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([2.0]))[0] == pytest.approx(4.0, abs=1e-8)


def test_fd_abs():
    assert ad.finite_diff_grad(lambda x: abs(float(x[0])), np.array([1.0]))[0] == pytest.approx(1.0, abs=1e-9)


def test_fd_sigmoid():
    g = ad.finite_diff_grad(lambda x: float(ad._sigmoid(x[0])), np.array([0.0]))[0]
    assert g == pytest.approx(0.25, abs=1e-9)


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda x: 0.0, np.zeros(1), eps=0.0)


# -- subgradient conventions ---------------------------------------------------

def test_kink_subgradients_are_zero():
    t = ad.Tape()
    x = t.param([0.0, 0.0])
    g = t.backward(ad.add(ad.sum(ad.abs(x)), ad.sum(ad.relu(x))))
    assert g[x].tolist() == [0.0, 0.0]


def test_gelu_derivative_at_zero():
    assert abs(float(ad.gelu_grad(0.0)) - 0.5) <= 1e-12
    t = ad.Tape()
    x = t.param(0.0)
    assert abs(float(t.backward(ad.gelu(x))[x]) - 0.5) <= 1e-12


def test_sigmoid_stable_at_extremes():
    assert ad._sigmoid(np.array(-800.0)) == 0.0
    assert ad._sigmoid(np.array(800.0)) == 1.0


# -- random graphs -------------------------------------------------------------

UNARY = ("abs", "relu", "sigmoid", "gelu", "scale")
BINARY = ("add", "sub", "mul")
KINKED = ("abs", "relu")


def random_graph(rng):
    """Build a random graph builder over a flat parameter vector.

    Returns ``(build, x0)`` where ``build(tape, flat)`` records the graph and
    returns the scalar root.  The op sequence and constants are fixed here
    so the same graph can be replayed for finite differences.
    """
    width = int(rng.integers(1, 9))
    n_in = int(rng.integers(1, 3))
    depth = int(rng.integers(1, 7))
    widths = [width] * n_in
    plan = []
    mats = []
    for _ in range(depth):
        kind = rng.choice(UNARY + BINARY + ("matvec", "pmatvec", "concat"))
        cur = widths[-1]
        if kind in UNARY:
            plan.append((kind, float(rng.uniform(-2, 2)) if kind == "scale" else None))
        elif kind in BINARY:
            other = int(rng.integers(0, len(widths)))
            if widths[other] != cur:
                plan.append(("abs", None))
            else:
                plan.append((kind, other))
        elif kind in ("matvec", "pmatvec"):
            out = int(rng.integers(1, 9))
            mats.append((out, cur))
            plan.append((kind, len(mats) - 1))
            cur = out
        else:
            other = int(rng.integers(0, len(widths)))
            if cur + widths[other] > 8:
                plan.append(("gelu", None))
            else:
                plan.append(("concat", other))
                cur = cur + widths[other]
        widths.append(cur)
    reduce_kind = rng.choice(("sum", "mean"))
    const_mats = [rng.normal(size=s) for s in mats]
    sizes = [width] * n_in + [o * i for o, i in mats]
    x0 = rng.normal(size=int(np.sum(sizes)))

    def build(tape, flat):
        pos = 0
        nodes = []
        for _ in range(n_in):
            nodes.append(tape.param(flat[pos:pos + width]))
            pos += width
        pm = []
        for o, i in mats:
            pm.append(tape.param(flat[pos:pos + o * i].reshape(o, i)))
            pos += o * i
        for kind, arg in plan:
            h = nodes[-1]
            if kind == "scale":
                h = ad.scale(h, arg)
            elif kind in UNARY:
                h = getattr(ad, kind)(h)
            elif kind in BINARY:
                h = getattr(ad, kind)(h, nodes[arg])
            elif kind == "matvec":
                h = ad.matvec(const_mats[arg], h)
            elif kind == "pmatvec":
                h = ad.matvec(pm[arg], h)
            else:
                h = ad.concat(h, nodes[arg])
            nodes.append(h)
        return getattr(ad, reduce_kind)(nodes[-1])

    return build, x0


def near_kink(tape, margin=1e-3):
    for node in tape.nodes:
        if node.kind in KINKED:
            if np.min(np.abs(tape.nodes[node.parents[0]].value)) < margin:
                return True
    return False


def flat_grad(tape, grads):
    return np.concatenate([grads.params()[r].ravel() for r in sorted(grads.params(), key=lambda r: r.id)])


def test_random_graph_gradients():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 120:
        build, x0 = random_graph(rng)
        tape = ad.Tape()
        root = build(tape, x0)
        if near_kink(tape):
            continue
        g = flat_grad(tape, tape.backward(root))
        fd = ad.finite_diff_grad(lambda x: float(build(ad.Tape(), x).value), x0)
        scale = max(1.0, float(np.max(np.abs(fd))))
        assert float(np.max(np.abs(g - fd))) / scale <= 1e-6, (checked, g, fd)
        checked += 1


def test_determinism_and_tape_reuse():
    rng = np.random.default_rng(7)
    for _ in range(20):
        build, x0 = random_graph(rng)
        t1, t2 = ad.Tape(), ad.Tape()
        r1, r2 = build(t1, x0), build(t2, x0)
        g1 = flat_grad(t1, t1.backward(r1))
        g1b = flat_grad(t1, t1.backward(r1))
        g2 = flat_grad(t2, t2.backward(r2))
        assert g1.tobytes() == g1b.tobytes() == g2.tobytes()


def test_backward_visits_each_node_once():
    # a diamond: y = x + x feeds two paths; the adjoint must add up, not double-count
    t = ad.Tape()
    x = t.param(1.5)
    y = ad.add(x, x)
    z = ad.mul(y, y)
    assert float(t.backward(z)[x]) == pytest.approx(8 * 1.5)


def test_concat_gradient_routing():
    t = ad.Tape()
    a, b = t.param([1.0, -2.0]), t.param([3.0])
    c = ad.concat(a, b, np.array([7.0]))
    g = t.backward(ad.sum(ad.mul(c, np.array([1.0, 2.0, 3.0, 4.0]))))
    assert g[a].tolist() == [1.0, 2.0] and g[b].tolist() == [3.0]
