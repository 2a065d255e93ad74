import zlib

import numpy as np
import pytest

from dcseg import numerics as nx


def test_relu_and_normalize_examples():
    assert nx.relu(nx.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    np.testing.assert_allclose(nx.l2_normalize_rows(nx.Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])


def test_identity_kernel_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 3))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data, x)


def test_square_sum_gradient():
    g = nx.Graph(lambda t: {"y": nx.sum(t["x"] * t["x"])})
    g.forward({"x": np.array([1.0, 2.0])})
    np.testing.assert_allclose(g.backward(1.0)["x"], [2.0, 4.0])


def test_log_softmax_two_logit_gradient():
    g = nx.Graph(lambda t: {"y": nx.gather(nx.log_softmax(t["x"]), [0])})
    g.forward({"x": np.zeros(2)})
    np.testing.assert_allclose(g.backward(np.ones(1))["x"], [0.5, -0.5])


def test_backward_before_forward():
    g = nx.Graph(lambda t: {"y": nx.sum(t["x"])})
    with pytest.raises(nx.GraphStateError):
        g.backward(1.0)


def test_unreachable_param_gets_zero():
    g = nx.Graph(lambda t: {"y": nx.sum(t["a"])}, params={"a": np.ones(3), "b": np.ones(2)})
    g.forward({})
    grads = g.backward(1.0)
    np.testing.assert_array_equal(grads["b"], np.zeros(2))


def test_nonfinite_input_rejected():
    g = nx.Graph(lambda t: {"y": nx.sum(t["x"])})
    with pytest.raises(nx.EvaluationError):
        g.forward({"x": np.array([1.0, np.nan])})


def test_shape_errors_name_node():
    with pytest.raises(nx.ShapeError, match="matmul node"):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError, match="add node"):
        nx.add(nx.Tensor(np.ones(3)), nx.Tensor(np.ones(4)))
    with pytest.raises(nx.ShapeError):
        nx.conv2d(nx.Tensor(np.ones((1, 4, 4, 2))), nx.Tensor(np.ones((3, 3, 3, 3))))


def test_softmax_overflow_and_normalization():
    x = nx.Tensor(np.array([[700.0, -700.0, 0.0], [-700.0, -700.0, -699.0]]))
    p = nx.softmax(x).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(nx.log_softmax(x).data))


def test_fd_check_quadratic_and_kink():
    assert nx.finite_diff_check(lambda x: (float((x ** 2).sum()), 2 * x), np.array([3.0])) <= 1e-8
    # |x| at 0: central difference is 0 while any subgradient choice of 1 is off by 1
    err = nx.finite_diff_check(lambda x: float(np.abs(x).sum()), np.array([0.0]), grad=np.array([1.0]))
    assert err == pytest.approx(1.0)


def test_fd_check_names_coordinate():
    def f(x):
        with np.errstate(invalid="ignore"):
            return float(np.log(x).sum())

    with pytest.raises(nx.EvaluationError, match=r"\(1,\)"):
        nx.finite_diff_check(f, np.array([1.0, 1e-6]), grad=np.zeros(2))


def _op_cases():
    # (name, input shapes, builder)
    return [
        ("add", [(3, 4), (4,)], lambda a, b: nx.add(a, b)),
        ("mul", [(3, 4), (3, 1)], lambda a, b: nx.mul(a, b)),
        ("scale", [(5,)], lambda a: nx.scale(a, -2.5)),
        ("relu", [(4, 5)], lambda a: nx.relu(a)),
        ("exp", [(6,)], lambda a: nx.exp(a)),
        ("log", [(6,)], lambda a: nx.log(nx.exp(a))),
        ("sum", [(3, 4)], lambda a: nx.sum(a, axis=1)),
        ("mean", [(3, 4)], lambda a: nx.mean(a, axis=0)),
        ("max", [(3, 5)], lambda a: nx.max(a, axis=1)),
        ("softmax", [(3, 5)], lambda a: nx.softmax(a)),
        ("log_softmax", [(3, 5)], lambda a: nx.log_softmax(a)),
        ("matmul", [(3, 4), (4, 2)], lambda a, b: nx.matmul(a, b)),
        ("gather", [(5, 3)], lambda a: nx.gather(a, [0, 2, 2, 4])),
        ("reshape", [(2, 6)], lambda a: nx.reshape(a, (3, 4))),
        ("transpose", [(2, 3, 4)], lambda a: nx.transpose(a, (2, 0, 1))),
        ("l2_normalize", [(4, 3)], lambda a: nx.l2_normalize_rows(a)),
        ("conv3x3", [(2, 5, 6, 3), (4, 3, 3, 3)], lambda x, w: nx.conv2d(x, w)),
        ("conv3x3s2", [(2, 6, 6, 3), (4, 3, 3, 3)], lambda x, w: nx.conv2d(x, w, stride=2)),
        ("conv1x1s2", [(1, 4, 4, 2), (3, 2, 1, 1)], lambda x, w: nx.conv2d(x, w, stride=2)),
        ("gap", [(2, 3, 4, 5)], lambda a: nx.global_avg_pool(a)),
        ("upsample", [(1, 2, 3, 2)], lambda a: nx.upsample_nearest(a, 2)),
    ]


@pytest.mark.parametrize("name,shapes,fn", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_primitive_gradients(name, shapes, fn):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for trial in range(20):
        inputs = [rng.normal(size=s) for s in shapes]
        probe = rng.normal(size=fn(*[nx.Tensor(v) for v in inputs]).shape)
        for k in range(len(inputs)):
            leaves = [nx.Tensor(v, requires_grad=True) for v in inputs]
            out = fn(*leaves)
            out.backward(probe)

            def f(x, k=k):
                args = [nx.Tensor(x if j == k else v) for j, v in enumerate(inputs)]
                return float((fn(*args).data * probe).sum())

            assert nx.finite_diff_check(f, inputs[k], grad=leaves[k].grad) <= 1e-4, (name, trial, k)


def test_three_layer_graph():
    rng = np.random.default_rng(7)
    params = {"w1": rng.normal(size=(4, 6)), "w2": rng.normal(size=(6, 5)), "w3": rng.normal(size=(5, 3))}
    x = rng.normal(size=(8, 4))

    def build(t):
        h = nx.relu(t["x"] @ t["w1"])
        h = nx.exp(nx.scale(h @ t["w2"], 0.1))
        return {"y": nx.mean(nx.log_softmax(h @ t["w3"]))}

    g = nx.Graph(build, params)
    g.forward({"x": x})
    grads = g.backward(1.0)
    for name in params:
        def f(v, name=name):
            p = dict(params)
            p[name] = v
            return float(nx.Graph(build, p).forward({"x": x})["y"])

        assert nx.finite_diff_check(f, params[name], grad=grads[name]) <= 1e-4


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(5, 3, 3, 3))
    a = nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data
    b = nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data
    assert a.tobytes() == b.tobytes()
