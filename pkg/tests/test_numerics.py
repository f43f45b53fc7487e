import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from imageome import numerics as nx
from imageome.numerics import _pykernels, backend, ptn

SEEDS = range(100)


def _params(rng, *shapes, low=-1.0, high=1.0):
    return [nx.Tensor(rng.uniform(low, high, size=s), requires_grad=True) for s in shapes]


def _scalarize(out, rng):
    """Random linear read-out so every output element contributes a distinct weight."""
    w = rng.uniform(-1, 1, size=out.shape)
    return nx.tsum(nx.mul(out, w))


def _away_from_zero(rng, shape, margin=0.2):
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _build(name, rng):
    """(params, forward) for one primitive on random inputs."""
    if name == "add":
        a, b = _params(rng, (3, 4), (4,))
        return [a, b], lambda: nx.add(a, b)
    if name == "sub":
        a, b = _params(rng, (3, 4), (3, 1))
        return [a, b], lambda: nx.sub(a, b)
    if name == "mul":
        a, b = _params(rng, (2, 3), (2, 3))
        return [a, b], lambda: nx.mul(a, b)
    if name == "div":
        a = _params(rng, (2, 3))[0]
        b = nx.Tensor(_away_from_zero(rng, (2, 3), 0.5), requires_grad=True)
        return [a, b], lambda: nx.div(a, b)
    if name == "sqrt":
        a = _params(rng, (5,), low=0.1, high=1.0)[0]
        return [a], lambda: nx.sqrt(a)
    if name == "square":
        a = _params(rng, (5,))[0]
        return [a], lambda: nx.square(a)
    if name == "absolute":
        a = nx.Tensor(_away_from_zero(rng, (6,), 0.01), requires_grad=True)
        return [a], lambda: nx.absolute(a)
    if name == "leaky_relu":
        a = nx.Tensor(_away_from_zero(rng, (6,), 0.01), requires_grad=True)
        return [a], lambda: nx.leaky_relu(a, 0.1)
    if name == "sum_axis":
        a = _params(rng, (3, 4))[0]
        return [a], lambda: nx.tsum(a, axis=0)
    if name == "mean":
        a = _params(rng, (3, 4))[0]
        return [a], lambda: nx.mean(a, axis=1, keepdims=True)
    if name == "reshape":
        a = _params(rng, (2, 6))[0]
        return [a], lambda: nx.reshape(a, (3, 4))
    if name == "index":
        a = _params(rng, (5, 3))[0]
        idx = rng.integers(0, 5, size=7)
        return [a], lambda: nx.index(a, idx)
    if name == "slice":
        a = _params(rng, (5, 3))[0]
        return [a], lambda: nx.index(a, (slice(1, 4), slice(None)))
    if name == "concat":
        a, b = _params(rng, (2, 3), (2, 2))
        return [a, b], lambda: nx.concat([a, b], axis=1)
    if name == "transpose":
        a = _params(rng, (2, 3))[0]
        return [a], lambda: nx.transpose(a)
    if name == "matmul":
        a, b = _params(rng, (3, 4), (4, 2))
        return [a, b], lambda: nx.matmul(a, b)
    if name == "linear":
        x, w, b = _params(rng, (3, 4), (4, 2), (2,))
        return [x, w, b], lambda: nx.linear(x, w, b)
    if name == "conv2d":
        x, w = _params(rng, (2, 3, 3, 2), (3, 3, 2, 2))
        return [x, w], lambda: nx.conv2d(x, w)
    if name == "log_softmax":
        a = _params(rng, (3, 4))[0]
        return [a], lambda: nx.log_softmax(a)
    if name == "softmax":
        a = _params(rng, (3, 4))[0]
        return [a], lambda: nx.softmax(a)
    if name == "cross_entropy":
        a = _params(rng, (4, 3))[0]
        y = rng.integers(0, 3, size=4)
        return [a], lambda: nx.cross_entropy(a, y)
    if name == "mean_abs_error":
        a = _params(rng, (4, 2))[0]
        b = nx.Tensor(a.data + _away_from_zero(rng, (4, 2), 0.01), requires_grad=True)
        return [a, b], lambda: nx.mean_abs_error(a, b)
    raise KeyError(name)


PRIMITIVES = ["add", "sub", "mul", "div", "sqrt", "square", "absolute", "leaky_relu", "sum_axis",
              "mean", "reshape", "index", "slice", "concat", "transpose", "matmul", "linear",
              "conv2d", "log_softmax", "softmax", "cross_entropy", "mean_abs_error"]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_matches_finite_differences(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        params, fwd = _build(name, rng)
        readout = rng.uniform(-1, 1, size=fwd().shape)

        def loss():
            return nx.tsum(nx.mul(fwd(), readout))

        analytic = nx.grad(loss(), params)
        numeric = nx.finite_difference_grads(loss, params, h=1e-6)
        worst = max(worst, nx.max_relative_error(analytic, numeric))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.2e}"


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1, b1, w2, b2 = _params(rng, (3, 5), (5,), (5, 2), (2,))
    x = rng.uniform(-1, 1, size=(4, 3))
    y = np.array([0, 1, 1, 0])

    def loss():
        return nx.cross_entropy(nx.linear(nx.leaky_relu(nx.linear(x, w1, b1)), w2, b2), y)

    params = [w1, b1, w2, b2]
    err = nx.max_relative_error(nx.grad(loss(), params), nx.finite_difference_grads(loss, params))
    assert err < 1e-5


def test_square_derivative_at_three():
    x = nx.Tensor(3.0, requires_grad=True)
    (g,) = nx.grad(nx.mul(x, x), [x])
    assert g == pytest.approx(6.0)


def test_mean_abs_error_subgradient_zero_at_zero_residual():
    a = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (g,) = nx.grad(nx.mean_abs_error(a, np.array([1.0, 2.0])), [a])
    assert np.array_equal(g, np.zeros(2))


def test_backward_requires_scalar_loss():
    a = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nx.grad(nx.mul(a, 2.0), [a])


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    assert np.allclose(nx.matmul(np.eye(3), A).data, A)


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4, 3))
    w = np.zeros((3, 3, 3, 3))
    w[1, 1] = np.eye(3)
    assert np.allclose(nx.conv2d(x, w).data, x)


def test_cross_entropy_uniform_logits_is_log_k():
    k = 7
    ce = nx.cross_entropy(np.zeros((4, k)), np.array([0, 3, 6, 2]))
    assert float(ce.data) == pytest.approx(np.log(k))


def test_shape_error_names_op_and_dims():
    with pytest.raises(nx.ShapeError) as e:
        nx.matmul(np.ones((2, 3)), np.ones((4, 5)))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_straight_through_forward_and_backward():
    z = nx.Tensor(np.array([0.9, 0.8]), requires_grad=True)
    out = nx.straight_through(z, np.array([1.0, 1.0]))
    assert np.array_equal(out.data, [1.0, 1.0])
    g = np.array([0.3, -2.0])
    (gz,) = nx.grad(nx.tsum(nx.mul(out, g)), [z])
    assert np.array_equal(gz, g)


def test_straight_through_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.straight_through(np.ones(2), np.ones(3))


def test_straight_through_composite_finite_differences():
    rng = np.random.default_rng(3)
    z = nx.Tensor(rng.uniform(-1, 1, size=5), requires_grad=True)
    zq = rng.uniform(-1, 1, size=5)
    target = zq + _away_from_zero(rng, (5,), 0.05)

    def loss():
        return nx.mean_abs_error(nx.straight_through(z, zq), target)

    err = nx.max_relative_error(nx.grad(loss(), [z]), nx.finite_difference_grads(loss, [z]))
    assert err < 1e-5


def test_stop_gradient_blocks_gradient():
    a = nx.Tensor(np.ones(3), requires_grad=True)
    (g,) = nx.grad(nx.tsum(nx.mul(nx.stop_gradient(a), a)), [a])
    assert np.array_equal(g, np.ones(3))


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(3, 3, 3, 2))
    assert np.array_equal(nx.conv2d(x, w).data, nx.conv2d(x, w).data)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
                  elements=st.floats(-1e3, 1e3)),
       st.data())
def test_concat_then_slice_is_identity(a, data):
    cut = data.draw(st.integers(0, a.shape[1]))
    left, right = a[:, :cut], a[:, cut:]
    joined = nx.concat([left, right], axis=1)
    assert np.array_equal(nx.index(joined, (slice(None), slice(0, cut))).data, left)
    assert np.array_equal(nx.index(joined, (slice(None), slice(cut, None))).data, right)


# kernels ----------------------------------------------------------------------------

@pytest.mark.skipif("cython" not in backend.available(), reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(5))
def test_compiled_kernels_agree_with_numpy(seed):
    from imageome.numerics import _ckernels
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    gy = rng.normal(size=(3, 5, 6, 4))
    assert np.allclose(_ckernels.conv2d_forward(x, w), _pykernels.conv2d_forward(x, w), atol=1e-12)
    for a, b in zip(_ckernels.conv2d_backward(x, w, gy), _pykernels.conv2d_backward(x, w, gy)):
        assert np.allclose(a, b, atol=1e-12)
    z, codes = rng.normal(size=(40, 3)), rng.normal(size=(9, 3))
    ic, dc = _ckernels.nearest_codes(z, codes)
    ip, dp = _pykernels.nearest_codes(z, codes)
    assert np.array_equal(ic, ip) and np.allclose(dc, dp)


def test_nearest_codes_ties_pick_lowest_index():
    codes = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    for k in [_pykernels] + ([__import__("imageome.numerics._ckernels", fromlist=["x"])]
                             if "cython" in backend.available() else []):
        idx, _ = k.nearest_codes(np.array([[0.0, 0.0], [2.0, 0.0]]), codes)
        assert idx.tolist() == [0, 0]


def test_backend_switch_round_trip():
    before = backend.name
    backend.use("python")
    assert backend.kernels is _pykernels
    with pytest.raises(ValueError):
        backend.use("fortran")
    backend.use(before)


# PTN format -------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_ptn_round_trip(a):
    back = ptn.loads(ptn.dumps(a))
    assert back.shape == a.shape
    assert np.array_equal(back.astype(np.float32), a)


def test_ptn_layout_is_little_endian_float32():
    buf = ptn.dumps(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"PTN1"
    assert np.frombuffer(buf[4:16], "<u4").tolist() == [2, 1, 3]
    assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("buf", [b"", b"PTN2\x00\x00\x00\x00", b"PTN1\x01\x00\x00\x00\x05\x00\x00\x00" + b"\x00" * 8])
def test_ptn_rejects_malformed(buf):
    with pytest.raises(ptn.PTNFormatError):
        ptn.loads(buf)


def test_ptn_file_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    ptn.save(tmp_path / "a.ptn", a)
    assert np.array_equal(ptn.load(tmp_path / "a.ptn"), a)


# optimizer --------------------------------------------------------------------------

def test_adam_zero_learning_rate_leaves_params_unchanged():
    p = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.copy()
    nx.Adam([p], lr=0.0).step([np.array([0.5, 0.5])])
    assert np.array_equal(p.data, before)


def test_adam_first_step_moves_by_learning_rate():
    p = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    nx.Adam([p], lr=0.1).step([np.array([3.0, -0.01])])
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_adam_minimises_quadratic():
    p = nx.Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = nx.Adam([p], lr=0.1)
    for _ in range(500):
        opt.step(nx.grad(nx.tsum(nx.square(p)), [p]))
    assert np.abs(p.data).max() < 1e-2
