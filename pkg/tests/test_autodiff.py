import numpy as np
import pytest

import grasptk.autodiff as ad
from grasptk.errors import ContractViolation, NumericFault


def test_add_mul_grads():
    x = ad.param(np.array([1.0, 2.0, 3.0]))
    y = ad.param(np.array([4.0, 5.0, 6.0]))
    out = ((x * y) + x).sum()
    ad.backward(out)
    np.testing.assert_allclose(x.grad, y.data + 1.0)
    np.testing.assert_allclose(y.grad, x.data)


def test_broadcast_unbroadcast():
    x = ad.param(np.ones((3, 4)))
    b = ad.param(np.arange(4.0))
    out = (x + b).sum()
    ad.backward(out)
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))

    def f(t):
        if isinstance(t, ad.Tensor):
            return (ad.matmul(t, ad.tensor(w)) ** 2).sum()
        return float(((t @ w) ** 2).sum())

    err = ad.check_gradient(f, rng.normal(size=(5, 4)))
    assert err < 1e-6


@pytest.mark.parametrize("op", [ad.exp, ad.log, ad.sqrt, ad.sigmoid, ad.tanh,
                                ad.swish, ad.relu, ad.sin, ad.cos])
def test_elementwise_ops_match_fd(op):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.3, 1.5, size=7)
    err = ad.check_gradient(lambda t: op(t).sum(), x)
    assert err < 1e-5


def test_softmax_grad():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))

    def f(t):
        sm = ad.softmax(t, axis=-1) if isinstance(t, ad.Tensor) else _np_softmax(t)
        return (sm * w).sum() if isinstance(t, ad.Tensor) else float((sm * w).sum())

    err = ad.check_gradient(f, x)
    assert err < 1e-6


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_max_and_take_grads():
    x = ad.param(np.array([[1.0, 5.0, 2.0], [4.0, 0.0, 3.0]]))
    out = ad.max_(x, axis=1).sum()
    ad.backward(out)
    expected = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(x.grad, expected)

    y = ad.param(np.arange(6.0).reshape(3, 2))
    out = ad.take(y, np.array([0, 0, 2])).sum()
    ad.backward(out)
    np.testing.assert_allclose(y.grad, np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]))


def test_concat_stack_reshape_roundtrip_grads():
    a = ad.param(np.ones((2, 3)))
    b = ad.param(np.full((1, 3), 2.0))
    out = ad.concat([a, b], axis=0).sum()
    ad.backward(out)
    np.testing.assert_allclose(a.grad, np.ones((2, 3)))
    np.testing.assert_allclose(b.grad, np.ones((1, 3)))

    c = ad.param(np.arange(6.0))
    out = (ad.reshape(c, (2, 3)) * np.arange(6.0).reshape(2, 3)).sum()
    ad.backward(out)
    np.testing.assert_allclose(c.grad, np.arange(6.0))


def test_normalize_rows_grad():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3)) + 0.5
    w = rng.normal(size=(6, 3))

    def f(t):
        if isinstance(t, ad.Tensor):
            return (ad.normalize_rows(t) * w).sum()
        n = np.linalg.norm(t, axis=1, keepdims=True)
        return float((t / n * w).sum())

    assert ad.check_gradient(f, x) < 1e-6


def test_two_layer_perceptron_matches_fd():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(6, 8)) * 0.5
    w2 = rng.normal(size=(8, 1)) * 0.5

    def f(t):
        h = ad.relu(ad.matmul(t if isinstance(t, ad.Tensor) else ad.tensor(t), ad.tensor(w1)))
        return (ad.matmul(h, ad.tensor(w2)) ** 2).mean()

    x = rng.normal(size=(4, 6))
    assert ad.check_gradient(f, x) < 1e-6


def test_backward_rejects_nonscalar_and_nonfinite():
    x = ad.param(np.ones(3))
    with pytest.raises(ContractViolation):
        ad.backward(x * 2.0)
    y = ad.param(np.array(0.0))
    with pytest.raises(NumericFault):
        ad.backward(ad.log(y))


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 4.0]), "b": np.zeros(2)}
    clipped, total = ad.clip_global_norm(grads, max_norm=1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)
    same, total2 = ad.clip_global_norm({"a": np.array([0.5])}, max_norm=10.0)
    assert total2 == pytest.approx(0.5)
    np.testing.assert_allclose(same["a"], [0.5])


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = {"x": ad.param(np.array([1.0, 1.0, 1.0]))}
    opt = ad.Adam(p, lr=0.05)
    for _ in range(800):
        diff = p["x"] - target
        loss = (diff * diff).sum()
        ad.zero_grads(p)
        ad.backward(loss)
        opt.step()
    assert np.abs(p["x"].data - target).max() < 1e-3


def test_adam_rejects_bad_gradients():
    p = {"x": ad.param(np.zeros(2))}
    opt = ad.Adam(p)
    with pytest.raises(ContractViolation):
        opt.step({"x": np.zeros(3)})
    with pytest.raises(NumericFault):
        opt.step({"x": np.array([np.nan, 0.0])})


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    params = {"w": ad.param(rng.normal(size=(3, 4))),
              "b": ad.param(rng.normal(size=4)),
              "s": ad.param(np.array(2.5))}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"GTKM"
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k].data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ContractViolation):
        ad.load_checkpoint(path)


def test_finite_diff_gradient_simple():
    g = ad.finite_diff_gradient(lambda x: float((x ** 3).sum()), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, 3.0 * np.array([1.0, 4.0]), rtol=1e-6)
