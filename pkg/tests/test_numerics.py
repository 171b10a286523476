import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossgait import numerics as nx
from crossgait.numerics import Tensor, default_dtype


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(t64(np.eye(2)), b).data, b.data)


def test_matmul_zeros():
    out = nx.matmul(t64([[1, 2], [3, 4]]), t64(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    oracle = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nx.matmul(t64(a), t64(b)).data, oracle, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- conv2d -------------------------------------------------------------------

def conv_oracle(x, k, stride, padding):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for r in range(ho):
            for c in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[ci, r * stride + i, c * stride + j] * k[o, ci, i, j]
                out[o, r, c] = acc
    return out


def test_conv_1x1_identity(rng):
    x = rng.normal(size=(1, 5, 6))
    out = nx.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_input_interior():
    out = nx.conv2d(t64(np.full((1, 6, 6), 7.0)), t64(np.ones((1, 1, 3, 3))), 1, 0)
    np.testing.assert_array_equal(out.data, np.full((1, 4, 4), 63.0))


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv_matches_nested_sum(rng, stride, padding):
    x, k = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    out = nx.conv2d(t64(x), t64(k), stride, padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, k, stride, padding), atol=1e-10)


def test_conv_batched_equals_per_image(rng):
    x, k = rng.normal(size=(3, 2, 7, 5)), rng.normal(size=(4, 2, 3, 3))
    out = nx.conv2d(t64(x), t64(k), 1, 1).data
    for n in range(3):
        np.testing.assert_allclose(out[n], conv_oracle(x[n], k, 1, 1), atol=1e-10)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(nx.ConvConfigError):
        nx.conv2d(t64(np.ones((1, 4, 4))), t64(np.ones((1, 1, 2, 2))))
    with pytest.raises(nx.DimensionError):
        nx.conv2d(t64(np.ones((2, 4, 4))), t64(np.ones((1, 1, 3, 3))))
    with pytest.raises(nx.ConvConfigError):
        nx.conv2d(t64(np.ones((1, 2, 2))), t64(np.ones((1, 1, 3, 3))), 1, 0)


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(nx.softmax_rows(t64([[0, 0, 0]])).data, [[1 / 3] * 3])


def test_softmax_no_overflow():
    out = nx.softmax_rows(t64([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_direct_formula():
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nx.softmax_rows(t64([[1, 2, 3]])).data[0], e / e.sum(), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    out = nx.softmax_rows(t64([row])).data
    assert abs(out.sum() - 1) < 1e-6
    assert np.all(out > 0) and np.all(out <= 1)


# -- elementwise and reductions -------------------------------------------------

def test_relu():
    np.testing.assert_array_equal(nx.relu(t64([-1, 0, 2])).data, [0, 0, 2])


def test_add_zeros_identity(rng):
    x = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(nx.add(t64(x), t64(np.zeros((3, 2)))).data, x)


def test_add_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.add(t64(np.ones((2, 3))), t64(np.ones((3, 2))))


def test_mean_over_axis():
    np.testing.assert_array_equal(nx.mean(t64(np.ones((4, 3))), axis=0).data, np.ones(3))


def test_sub_and_mul_scalar():
    np.testing.assert_array_equal(nx.sub(t64([3, 4]), t64([1, 1])).data, [2, 3])
    np.testing.assert_array_equal(nx.mul_scalar(t64([3, 4]), 0.5).data, [1.5, 2])


def test_max_over_axis_values():
    np.testing.assert_array_equal(nx.max_over_axis(t64([[1, 5], [3, 2]]), 0).data, [3, 5])


def test_max_single_slice_identity(rng):
    x = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(nx.max_over_axis(t64(x), 0).data, x[0])


def test_max_matches_loop(rng):
    x = rng.normal(size=(5, 4, 3))
    for axis in range(3):
        out = nx.max_over_axis(t64(x), axis).data
        moved = np.moveaxis(x, axis, 0)
        oracle = moved[0].copy()
        for s in moved[1:]:
            oracle = np.where(s > oracle, s, oracle)
        np.testing.assert_array_equal(out, oracle)


def test_max_tie_routes_gradient_to_lowest_index():
    x = t64([[2.0, 2.0, 1.0]], grad=True)
    nx.sum(nx.max_over_axis(x, 1)).backward()
    np.testing.assert_array_equal(x.grad, [[1, 0, 0]])


def test_max_empty_axis():
    with pytest.raises(nx.DimensionError):
        nx.max_over_axis(t64(np.ones((0, 3))), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_max_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(6, 3))
    perm = r.permutation(6)
    np.testing.assert_array_equal(nx.max_over_axis(t64(x), 0).data, nx.max_over_axis(t64(x[perm]), 0).data)


# -- backward -------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = t64(rng.normal(size=(3, 4)), grad=True)
    nx.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_constant_populates_nothing():
    x = t64([1.0, 2.0])
    loss = nx.sum(x)
    loss.backward()
    assert x.grad is None and loss.grad is None


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(nx.ContractError):
        nx.mul_scalar(x, 2.0).backward()


def test_backward_accumulates_and_is_reproducible(rng):
    x = t64(rng.normal(size=(3, 4)), grad=True)
    w = t64(rng.normal(size=(4, 2)), grad=True)

    def f():
        return nx.sum(nx.square(nx.softmax_rows(nx.matmul(x, w))))

    f().backward()
    first = x.grad.copy()
    f().backward()
    np.testing.assert_allclose(x.grad, 2 * first)
    x.grad = None
    f().backward()
    assert np.array_equal(x.grad, first)


def test_backward_softmax_matmul_matches_finite_differences(rng):
    x = t64(rng.normal(size=(3, 4)), grad=True)
    w = t64(rng.normal(size=(4, 5)), grad=True)
    rep = nx.grad_check(lambda a, b: nx.sum(nx.square(nx.softmax_rows(nx.matmul(a, b)))), [x, w])
    assert rep.max_rel_error < 1e-4


def test_non_finite_is_reported():
    with pytest.raises(nx.NonFiniteError):
        nx.mul_scalar(t64([1e308]), 10.0)


# -- gradCheck harness ------------------------------------------------------------

def test_gradcheck_linear_is_exact(rng):
    x = t64(rng.normal(size=(4,)), grad=True)
    c = t64(rng.normal(size=(4,)))
    assert nx.grad_check(lambda a: nx.sum(nx.mul(a, c)), [x]).max_rel_error < 1e-7


def test_gradcheck_detects_corrupted_gradient(rng):
    x = t64(rng.normal(size=(3, 3)), grad=True)
    fn = lambda a: nx.sum(nx.square(a))  # noqa: E731
    bad = [2 * x.data + 0.5]
    assert nx.grad_check(fn, [x], analytic=bad).max_rel_error > 1e-2


SHAPES = [(2, 3), (4, 1), (3, 5)]


def _random(shape, seed, positive=False):
    r = np.random.default_rng(seed)
    a = r.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return t64(a, grad=True)


OPS = {
    "add": lambda a, b: nx.sum(nx.square(nx.add(a, b))),
    "sub": lambda a, b: nx.sum(nx.square(nx.sub(a, b))),
    "mul": lambda a, b: nx.sum(nx.mul(a, b)),
    "relu": lambda a, b: nx.sum(nx.mul(nx.relu(a), b)),
    "mean": lambda a, b: nx.sum(nx.square(nx.mean(nx.mul(a, b), axis=0))),
    "max": lambda a, b: nx.sum(nx.square(nx.max_over_axis(nx.add(a, b), 0))),
    "softmax": lambda a, b: nx.sum(nx.mul(nx.softmax_rows(a), b)),
    "log_softmax": lambda a, b: nx.sum(nx.mul(nx.log_softmax(a), b)),
    "norm": lambda a, b: nx.sum(nx.vector_norm(nx.add(a, b), axis=1)),
    "transpose": lambda a, b: nx.sum(nx.mul(nx.transpose(a), nx.transpose(b))),
    "concat": lambda a, b: nx.sum(nx.square(nx.concat([a, b], axis=0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("shape", SHAPES)
def test_every_op_passes_gradcheck(name, shape):
    fn = OPS[name]
    a, b = _random(shape, 1), _random(shape, 2)
    # keep relu and max away from their kinks
    if name == "relu":
        a.data[np.abs(a.data) < 1e-3] = 0.1
    assert nx.grad_check(fn, [a, b]).max_rel_error < 1e-4


@pytest.mark.parametrize("shape", [(1, 2, 5, 5), (2, 1, 6, 7), (1, 3, 4, 4)])
def test_conv_passes_gradcheck(shape):
    x = _random(shape, 3)
    k = _random((2, shape[1], 3, 3), 4)
    for stride in (1, 2):
        rep = nx.grad_check(lambda a, b: nx.sum(nx.square(nx.conv2d(a, b, stride, 1))), [x, k])
        assert rep.max_rel_error < 1e-4


@pytest.mark.parametrize("shapes", [((2, 3), (3, 4)), ((2, 3, 4), (4, 2)), ((3, 2, 2), (3, 2, 5))])
def test_matmul_passes_gradcheck(shapes):
    a, b = _random(shapes[0], 5), _random(shapes[1], 6)
    assert nx.grad_check(lambda x, y: nx.sum(nx.square(nx.matmul(x, y))), [a, b]).max_rel_error < 1e-4


# -- Adam -------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)}
    p["w"].grad = np.array([0.3, -7.0, 1e-3])
    before = p["w"].data.copy()
    state = nx.OptimizerState.for_params(p, 1e-3)
    nx.adam_step(p, state)
    np.testing.assert_allclose(before - p["w"].data, 1e-3 * np.sign([0.3, -7.0, 1e-3]), atol=1e-6)
    assert state.step_count == 1


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    state = nx.OptimizerState.for_params(p)
    state.first_moment["w"][:] = 1.0
    state.second_moment["w"][:] = 1.0
    p["w"].grad = np.zeros(2)
    nx.adam_step(p, state)
    np.testing.assert_allclose(state.first_moment["w"], 0.9)
    np.testing.assert_allclose(state.second_moment["w"], 0.999)
    # m_hat / sqrt(v_hat) is nonzero only because of the seeded moments
    p2 = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    s2 = nx.OptimizerState.for_params(p2)
    p2["w"].grad = np.zeros(2)
    nx.adam_step(p2, s2)
    np.testing.assert_array_equal(p2["w"].data, [1.0, 2.0])


def test_adam_descends_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    params = {"x": x}
    state = nx.OptimizerState.for_params(params, 0.1)
    for _ in range(100):
        x.grad = None
        nx.sum(nx.square(x)).backward()
        nx.adam_step(params, state)
    assert abs(x.item()) < 0.05


def test_adam_missing_grad():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(nx.ContractError):
        nx.adam_step(p, nx.OptimizerState.for_params(p))


def test_default_dtype_context():
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
