import numpy as np
import pytest

from flashlab import gradcore as gc


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def test_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        gc.Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        gc.Tensor([np.inf])


def test_identity_graph():
    x = gc.Tensor([1.0, 2.0])
    assert np.array_equal(x.data, [1.0, 2.0])


def test_affine_identity_weights():
    w = gc.Param(np.eye(2), "w")
    b = gc.Param(np.zeros(2), "b")
    x = gc.Tensor([[3.0, -1.0]])
    y = gc.affine(x, w, b)
    assert np.array_equal(y.data, [[3.0, -1.0]])


def test_affine_shape_errors():
    w = gc.Param(np.zeros((3, 4)), "w")
    with pytest.raises(ValueError):
        gc.affine(gc.Tensor(np.zeros((2, 5))), w)
    with pytest.raises(ValueError):
        gc.affine(gc.Tensor(np.zeros((2, 4))), w, gc.Param(np.zeros(2), "b"))


def _scalar_two_layer(x, w1, b1, w2, b2):
    # independent recomputation of the small tanh net with plain python loops
    h = []
    for j in range(len(b1)):
        acc = b1[j]
        for k in range(len(x)):
            acc += w1[j][k] * x[k]
        h.append(np.tanh(acc))
    out = 0.0
    for j in range(len(b2)):
        acc = b2[j]
        for k in range(len(h)):
            acc += w2[j][k] * h[k]
        out += acc
    return out


def test_two_layer_forward_matches_scalar_loop():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(5, 3))
    b1 = rng.normal(size=5)
    w2 = rng.normal(size=(2, 5))
    b2 = rng.normal(size=2)
    x = rng.normal(size=3)

    y = gc.affine(gc.tanh(gc.affine(gc.Tensor(x[None, :]),
                                    gc.Param(w1, "w1"), gc.Param(b1, "b1"))),
                  gc.Param(w2, "w2"), gc.Param(b2, "b2")).sum()
    expected = _scalar_two_layer(x, w1, b1, w2, b2)
    assert abs(y.item() - expected) < 1e-12


def test_backprop_sum_gives_ones():
    x = gc.Param(np.zeros(3), "x")
    loss = gc.tsum(gc.add(x, gc.Tensor(np.zeros(3))))
    gc.backprop(loss)
    assert np.array_equal(x.grad, np.ones(3))


def test_backprop_rejects_nonscalar():
    x = gc.Param(np.zeros(3), "x")
    with pytest.raises(ValueError):
        gc.backprop(gc.square(x))


def test_stop_gradient_blocks_flow():
    rng = np.random.default_rng(0)
    w = gc.Param(rng.normal(size=(2, 2)), "w")
    x = gc.Param(rng.normal(size=(1, 2)), "x")
    y = gc.affine(gc.stop_gradient(x), w)
    loss = gc.scale(gc.tsum(gc.square(y)), 0.5)
    gc.backprop(loss)
    wx = x.data @ w.data.T
    assert np.allclose(w.grad, wx.T @ x.data)
    assert np.array_equal(x.grad, np.zeros((1, 2)))


def test_grad_accumulates_across_uses_and_calls():
    x = gc.Param(np.array([2.0]), "x")
    loss = gc.tsum(gc.mul(x, x))
    gc.backprop(loss)
    assert np.allclose(x.grad, [4.0])
    gc.backprop(gc.tsum(x))
    assert np.allclose(x.grad, [5.0])
    x.zero_grad()
    assert np.array_equal(x.grad, [0.0])


def _random_net_loss(params, x):
    w1, b1, w2, b2 = params
    h = gc.silu(gc.affine(gc.Tensor(x), w1, b1))
    out = gc.affine(h, w2, b2)
    return gc.tmean(gc.square(out))


@pytest.mark.parametrize("seed", range(10))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = [
        gc.Param(rng.normal(size=(4, 3)) * 0.7, "w1"),
        gc.Param(rng.normal(size=4) * 0.2, "b1"),
        gc.Param(rng.normal(size=(2, 4)) * 0.7, "w2"),
        gc.Param(rng.normal(size=2) * 0.2, "b2"),
    ]
    x = rng.normal(size=(5, 3))
    gc.backprop(_random_net_loss(params, x))
    fd = gc.finite_diff_grad(lambda: _random_net_loss(params, x).item(), params)
    for p, g in zip(params, fd):
        assert rel_err(p.grad, g).max() < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "scale", "tanh", "silu",
                                "square", "sum", "mean", "concat", "affine"])
def test_each_primitive_matches_finite_differences(op):
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        a = gc.Param(rng.normal(size=(3, 4)), "a")
        b = gc.Param(rng.normal(size=(3, 4)), "b")
        w = gc.Param(rng.normal(size=(2, 4)), "w")

        def build():
            if op == "add":
                return gc.tsum(gc.square(gc.add(a, b)))
            if op == "sub":
                return gc.tsum(gc.square(gc.sub(a, b)))
            if op == "mul":
                return gc.tsum(gc.mul(a, b))
            if op == "scale":
                return gc.tsum(gc.scale(a, 1.7))
            if op == "tanh":
                return gc.tsum(gc.tanh(a))
            if op == "silu":
                return gc.tsum(gc.silu(a))
            if op == "square":
                return gc.tsum(gc.square(a))
            if op == "sum":
                return gc.scale(gc.tsum(a), 2.0)
            if op == "mean":
                return gc.tmean(gc.mul(a, b))
            if op == "concat":
                return gc.tsum(gc.square(gc.concat([a, b], axis=1)))
            return gc.tsum(gc.square(gc.affine(a, w)))

        params = [a, b]
        gc.backprop(build())
        fd = gc.finite_diff_grad(lambda: build().item(), params)
        for p, g in zip(params, fd):
            assert rel_err(p.grad, g).max() < 1e-4, f"{op} seed {seed}"
        for p in params:
            p.zero_grad()


def test_broadcast_column_times_matrix_grad():
    rng = np.random.default_rng(3)
    col = gc.Param(rng.normal(size=(4, 1)), "col")
    mat = gc.Param(rng.normal(size=(4, 3)), "mat")
    gc.backprop(gc.tsum(gc.mul(col, mat)))
    assert np.allclose(col.grad, mat.data.sum(axis=1, keepdims=True))
    assert np.allclose(mat.grad, np.broadcast_to(col.data, (4, 3)))


def test_incompatible_shapes_raise():
    with pytest.raises(ValueError):
        gc.add(gc.Tensor(np.zeros((2, 3))), gc.Tensor(np.zeros((4, 5))))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        w = gc.Param(rng.normal(size=(3, 3)), "w")
        x = gc.Tensor(rng.normal(size=(2, 3)))
        loss = gc.tmean(gc.square(gc.affine(gc.silu(gc.affine(x, w)), w)))
        gc.backprop(loss)
        return loss.item(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_no_grad_disables_recording():
    w = gc.Param(np.ones((2, 2)), "w")
    with gc.no_grad():
        y = gc.affine(gc.Tensor(np.ones((1, 2))), w)
    assert not y.requires_grad
    gc.backprop(gc.tsum(gc.square(gc.affine(gc.Tensor(np.ones((1, 2))), w))))
    assert w.grad.any()


def test_finite_diff_simple_cases():
    w = gc.Param(np.array([[2.0]]), "w")
    g = gc.finite_diff_grad(lambda: float(w.data[0, 0] ** 2), [w])
    assert abs(g[0][0, 0] - 4.0) < 1e-6
    g = gc.finite_diff_grad(lambda: 3.14, [w])
    assert abs(g[0][0, 0]) < 1e-9


def test_adam_first_step_closed_form():
    p = gc.Param(np.zeros(4), "p")
    st = gc.init_adam([p], lr=1e-5)
    p.grad[...] = 1.0
    gc.adam_step([p], st)
    # bias-corrected m_hat = v_hat = 1 on step 1 -> delta = -lr / (1 + eps)
    assert np.allclose(p.data, -1e-5, rtol=1e-6)
    assert st["p"].step == 1
    assert np.array_equal(p.grad, np.zeros(4))


def test_adam_zero_grad_keeps_params():
    p = gc.Param(np.array([1.0, -2.0]), "p")
    st = gc.init_adam([p], lr=0.1)
    gc.adam_step([p], st)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert st["p"].step == 1


def test_adam_converges_on_quadratic():
    p = gc.Param(np.array([0.0]), "p")
    st = gc.init_adam([p], lr=0.1)
    for _ in range(100):
        loss = gc.tsum(gc.square(gc.sub(p, gc.Tensor([3.0]))))
        gc.backprop(loss)
        gc.adam_step([p], st)
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_rejects_nonfinite_grads():
    p = gc.Param(np.zeros(2), "bad_param")
    st = gc.init_adam([p], lr=0.1)
    p.grad[0] = np.nan
    with pytest.raises(FloatingPointError, match="bad_param"):
        gc.adam_step([p], st)


def test_shared_upstream_grad_not_corrupted():
    # y = a + b with equal shapes hands the same grad object to both parents;
    # accumulation must not alias them together.
    a = gc.Param(np.ones(3), "a")
    b = gc.Param(np.ones(3), "b")
    s = gc.add(a, b)
    loss = gc.tsum(gc.add(gc.mul(s, s), a))
    gc.backprop(loss)
    # d/da [ (a+b)^2 + a ] = 2(a+b) + 1 = 5, d/db = 2(a+b) = 4
    assert np.allclose(a.grad, 5.0)
    assert np.allclose(b.grad, 4.0)
