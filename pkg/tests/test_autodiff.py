import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maligan import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


def reverse_grad(op, x):
    t = ad.Tensor(x, requires_grad=True)
    ad.backward(ad.reduce_sum(op(t)))
    return t.grad


def test_forward_examples():
    np.testing.assert_allclose(ad.softmax(ad.constant([0.0, 0.0])).value, [0.5, 0.5])
    assert ad.sigmoid(ad.constant(0.0)).value == 0.5
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, ad.constant(np.eye(2))).value, [[1, 2], [3, 4]])


def test_scalar_derivatives():
    x = ad.Tensor(0.0, requires_grad=True)
    ad.backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25)
    y = ad.Tensor(3.0, requires_grad=True)
    ad.backward(y * y)
    assert y.grad == pytest.approx(6.0)


# weights keep the summed output from being a symmetric function of the input
W = np.random.default_rng(0).normal(size=(3, 4))
UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "log_sigmoid": ad.log_sigmoid,
    "softmax": lambda t: ad.mul(ad.softmax(t), W),
    "log_softmax": lambda t: ad.mul(ad.log_softmax(t), W),
    "mul_self": lambda t: ad.mul(t, t),
    "sub": lambda t: ad.sub(ad.mul(t, W), t),
    "matmul": lambda t: ad.matmul(t, W.T),
    "concat": lambda t: ad.mul(ad.concat([t, ad.tanh(t)], axis=1), np.concatenate([W, W], axis=1)),
    "reduce_mean": lambda t: ad.reduce_mean(ad.mul(t, W), axis=0),
    "broadcast_add": lambda t: ad.mul(ad.add(t, ad.reduce_sum(t, axis=0)), W),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_op_gradients_match_finite_differences(name, x):
    op = UNARY[name]
    num = numeric_grad(lambda v: float(ad.reduce_sum(op(ad.constant(v))).value), x)
    assert rel_err(reverse_grad(op, x), num) < 1e-4


@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (5,), elements=st.floats(0.1, 2)))
def test_log_gradient(x):
    num = numeric_grad(lambda v: float(ad.reduce_sum(ad.log(ad.constant(v))).value), x)
    assert rel_err(reverse_grad(ad.log, x), num) < 1e-4


def test_embedding_gradient_accumulates_repeated_rows():
    table = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.embedding(table, np.array([[0, 2], [2, 2]]))
    ad.backward(ad.reduce_sum(out))
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [3, 3]])


def test_gru_cell_gradients():
    from maligan.models import _GRU

    rng = np.random.default_rng(4)
    params = ad.ParamStore()
    cell = _GRU(params, "g", 3, 4, rng, 0.5)
    x = rng.normal(size=(2, 3))
    h0 = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))

    def f(flat):
        params.set_flat(flat)
        with ad.no_grad():
            return float(np.sum(cell(ad.constant(x), ad.constant(h0)).value * w))

    theta = params.flatten()
    params.zero_grads()
    ad.backward(ad.reduce_sum(ad.mul(cell(ad.constant(x), ad.constant(h0)), w)))
    g = params.flat_grad()
    num = numeric_grad(f, theta)
    assert rel_err(g, num) < 1e-4


def test_errors():
    with pytest.raises(ad.AutodiffError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2))))
    with pytest.raises(ad.AutodiffError):
        ad.log(ad.constant([1.0, 0.0]))
    with pytest.raises(ad.AutodiffError):
        ad.backward(ad.add(ad.Tensor(np.ones(2), requires_grad=True), 1.0))
    x = ad.Tensor(1.0, requires_grad=True)
    y = x * x
    ad.backward(y)
    with pytest.raises(ad.AutodiffError, match="consumed"):
        ad.backward(y)


def test_no_grad_records_nothing():
    x = ad.Tensor(2.0, requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert y.parents == ()


def test_sgd_examples():
    p = ad.ParamStore({"p": [1.0]})
    p["p"].grad = np.array([2.0])
    ad.sgd_step(p, 0.1)
    assert p["p"].value[0] == pytest.approx(0.8)
    p["p"].grad = np.zeros(1)
    ad.sgd_step(p, 0.1)
    assert p["p"].value[0] == pytest.approx(0.8)


def test_adam_first_step_is_signed_lr():
    p = ad.ParamStore({"a": [0.0, 0.0, 0.0]})
    p["a"].grad = np.array([3.0, -0.01, 0.0])
    ad.adam_step(p, 0.5)
    v = p["a"].value
    assert v[0] == pytest.approx(-0.5, rel=1e-6)
    assert v[1] == pytest.approx(0.5, rel=1e-5)
    assert v[2] == 0.0


def test_nonfinite_grad_names_parameter():
    p = ad.ParamStore({"w.bad": [1.0], "w.ok": [1.0]})
    p["w.bad"].grad = np.array([np.nan])
    p["w.ok"].grad = np.array([1.0])
    with pytest.raises(ad.AutodiffError, match="w.bad"):
        ad.sgd_step(p, 0.1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.integers(1, 4), st.integers(1, 3)),
                min_size=1, max_size=5, unique_by=lambda t: t[0]))
def test_flatten_roundtrip(layout):
    rng = np.random.default_rng(0)
    p = ad.ParamStore({name: rng.normal(size=(r, c)) for name, r, c in layout})
    flat = p.flatten()
    q = p.copy()
    q.set_flat(np.zeros_like(flat))
    q.set_flat(flat)
    np.testing.assert_array_equal(q.flatten(), flat)
    assert p.names() == sorted(p.names())


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    p = ad.ParamStore({"z": rng.normal(size=(3, 2)), "a": rng.normal(size=5), "m.k": rng.normal(size=(1, 1, 2))})
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, p, {"step": 7})
    q, meta = ad.load_checkpoint(path)
    assert meta == {"step": 7}
    assert q.names() == p.names()
    for name in p.names():
        assert q[name].value.tobytes() == p[name].value.tobytes()
    ad.save_checkpoint(tmp_path / "y.ckpt", q, meta)
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
