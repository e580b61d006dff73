import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv3d, naive_conv_transpose3d
from xseg3d.errors import ShapeError, TapeError
from xseg3d.rng import Rng
from xseg3d.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    dropout,
    grad,
    grad_check,
    kernels,
    mean,
    mul,
    neg,
    precision,
    prelu,
    relu,
    sigmoid,
    sub,
    sum as tsum,
)

SEEDS = range(20)
TOL = 1e-5


def rand(rng, *shape):
    return rng.normal(size=shape)


def away_from_zero(rng, *shape):
    # keeps kinks of relu/prelu out of the finite-difference stencil
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)


def weighted(out, rng):
    # a random linear read-out exercises every output element with a distinct weight
    return tsum(mul(out, Tensor(rng.normal(size=out.shape), dtype=out.dtype)))


# ------------------------------------------------------------------ examples


def test_identity_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5, 6))
    w = np.zeros((3, 3, 1, 1, 1))
    for c in range(3):
        w[c, c] = 1
    out = conv3d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_kernel_sums_27():
    out = conv3d(Tensor(np.ones((1, 1, 4, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))))
    assert out.shape == (1, 1, 2, 2, 2)
    np.testing.assert_array_equal(out.data, 27.0)


def test_transpose_output_extent():
    out = conv_transpose3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))), stride=2)
    assert out.shape == (1, 1, 4, 4, 4)


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (3, 1, 0)])
def test_conv_matches_direct_summation(k, s, p):
    rng = np.random.default_rng(k * 10 + s)
    x = rng.normal(size=(2, 3, 5, 6, 4))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=p).data
    ref = naive_conv3d(x, w, (s,) * 3, (p,) * 3) + b.reshape(1, -1, 1, 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (1, 1, 0)])
def test_conv_transpose_matches_scatter(k, s, p):
    rng = np.random.default_rng(k + s + p)
    x = rng.normal(size=(1, 3, 3, 2, 4))
    w = rng.normal(size=(3, 2, k, k, k))
    out = conv_transpose3d(Tensor(x), Tensor(w), stride=s, padding=p).data
    ref = naive_conv_transpose3d(x, w, (s,) * 3, (p,) * 3)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_batch_norm_training_normalizes():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.5, size=(2, 3, 4, 5, 6))
    out, (rm, rv) = batch_norm(Tensor(x), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)
    m = out.data.mean(axis=(0, 2, 3, 4))
    v = out.data.var(axis=(0, 2, 3, 4))
    assert np.all(np.abs(m) < 1e-6)
    assert np.all(np.abs(v - 1) < 1e-4)
    n = x.size // 3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3, 4)) * n / (n - 1))


def test_batch_norm_eval_uses_running_stats():
    x = np.random.default_rng(2).normal(size=(1, 2, 3, 3, 3))
    out, stats = batch_norm(Tensor(x), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=False)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_array_equal(stats[0], 0)


def test_batch_norm_needs_two_values():
    with pytest.raises(ShapeError):
        batch_norm(Tensor(np.ones((1, 1, 1, 1, 1))), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), training=True)


def test_prelu_definition():
    out = prelu(Tensor(np.array([[-2.0]])), Tensor(np.array([0.25])))
    assert out.data.item() == -0.5
    x = np.random.default_rng(3).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(prelu(Tensor(x), Tensor(np.zeros(3))).data, relu(Tensor(x)).data)


def test_prelu_rejects_bad_alpha():
    with pytest.raises(ShapeError):
        prelu(Tensor(np.ones((1, 3, 2))), Tensor(np.ones(2)))


def test_dropout_identity_cases():
    x = np.random.default_rng(4).normal(size=(3, 4))
    np.testing.assert_array_equal(dropout(Tensor(x), 0.0, True, Rng(0)).data, x)
    np.testing.assert_array_equal(dropout(Tensor(x), 0.7, False, Rng(0)).data, x)
    with pytest.raises(ValueError):
        dropout(Tensor(x), 1.0, True, Rng(0))


def test_dropout_law_of_large_numbers():
    out = dropout(Tensor(np.ones(10**6)), 0.2, True, Rng(7)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) == {0.0, 1.25}


def test_elementwise_examples():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    c = concat([Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 4, 4, 4)))], axis=1)
    assert c.shape == (1, 5, 4, 4, 4)
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 4, 4, 5)))], axis=1)
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_backward_examples():
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
    (g,) = grad(lambda t: tsum(t), x)
    np.testing.assert_array_equal(g, 1.0)
    y = Tensor(3.0, requires_grad=True)
    (g,) = grad(lambda t: tsum(mul(t, t)), y)
    assert g == 6.0


def test_backward_needs_seed_for_tensor_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(TapeError):
        backward(tape, y)
    g = backward(tape, y, seed=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g[x], [2.0, 0.0, 4.0])


def test_backward_is_repeatable():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
    with Tape() as tape:
        out = tsum(sigmoid(conv3d(x, w, padding=1)))
    a = backward(tape, out)
    b = backward(tape, out)
    np.testing.assert_array_equal(a[x], b[x])
    np.testing.assert_array_equal(a[w], b[w])


def test_grad_check_on_sum_is_exact():
    x = np.random.default_rng(7).normal(size=(3, 4))
    assert grad_check(lambda t: tsum(t), [x]) < 1e-12


def test_ops_do_not_mutate_inputs_and_tape_appends():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(1, 2, 4, 4, 4))
    w0 = rng.normal(size=(2, 2, 3, 3, 3))
    x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
    with Tape() as tape:
        h = conv3d(x, w, padding=1)
        n1 = len(tape.nodes)
        h2, _ = batch_norm(h, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)
        n2 = len(tape.nodes)
        out = tsum(prelu(h2, np.full(2, 0.25)))
    assert n1 < n2 < len(tape.nodes)
    backward(tape, out)
    np.testing.assert_array_equal(x.data, x0)
    np.testing.assert_array_equal(w.data, w0)
    assert not x.data.flags.writeable


def test_precision_context_sets_default_dtype():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# ------------------------------------------------------------------ gradient suite, 64-bit


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 4, size=3))
    a, b = rand(rng, *shape), rand(rng, *shape)
    pos = rng.uniform(0.5, 2.0, size=shape)
    w = rng.normal(size=shape)
    read = lambda t: tsum(mul(t, Tensor(w)))  # noqa: E731
    assert grad_check(lambda x, y: read(add(x, y)), [a, b]) < TOL
    assert grad_check(lambda x, y: read(sub(x, y)), [a, b]) < TOL
    assert grad_check(lambda x: read(neg(x)), [a]) < TOL
    assert grad_check(lambda x, y: read(mul(x, y)), [a, b]) < TOL
    assert grad_check(lambda x, y: read(div(x, y)), [a, pos]) < TOL
    assert grad_check(lambda x: read(sigmoid(x)), [a]) < TOL
    assert grad_check(lambda x: read(relu(x)), [away_from_zero(rng, *shape)]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_broadcasting(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = rand(rng, 2, 3, 4), rand(rng, 1, 3, 1)
    w = rng.normal(size=(2, 3, 4))
    assert grad_check(lambda x, y: tsum(mul(mul(x, y), Tensor(w))), [a, b]) < TOL
    assert grad_check(lambda x, y: tsum(mul(div(x, add(mul(y, y), 1.0)), Tensor(w))), [a, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_concat(seed):
    rng = np.random.default_rng(200 + seed)
    x = rand(rng, 2, 3, 2, 3, 2)
    y = rand(rng, 2, 1, 2, 3, 2)
    assert grad_check(lambda t: weighted(tsum(t, axis=(2, 3)), np.random.default_rng(seed)), [x]) < TOL
    assert grad_check(lambda t: weighted(mean(t, axis=1, keepdims=True), np.random.default_rng(seed)), [x]) < TOL
    assert grad_check(lambda t: mean(mul(t, t)), [x]) < TOL
    assert grad_check(lambda a, b: weighted(concat([a, b], axis=1), np.random.default_rng(seed)), [x, y]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv3d(seed):
    rng = np.random.default_rng(300 + seed)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    spatial = tuple(int(n) for n in rng.integers(k, k + 3, size=3))
    x = rand(rng, 1, 2, *spatial)
    w = rand(rng, 2, 2, k, k, k)
    b = rand(rng, 2)
    f = lambda a, ww, bb: weighted(conv3d(a, ww, bb, stride=s, padding=p), np.random.default_rng(seed))  # noqa: E731
    assert grad_check(f, [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv_transpose3d(seed):
    rng = np.random.default_rng(400 + seed)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, max(1, (k + 1) // 2)))
    x = rand(rng, 1, 2, *rng.integers(2, 4, size=3))
    w = rand(rng, 2, 3, k, k, k)
    b = rand(rng, 3)
    f = lambda a, ww, bb: weighted(conv_transpose3d(a, ww, bb, stride=s, padding=p), np.random.default_rng(seed))  # noqa: E731
    assert grad_check(f, [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_batch_norm(seed):
    rng = np.random.default_rng(500 + seed)
    x = rand(rng, 2, 3, 2, 3, 2) * 2 + 1
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    for training in (True, False):
        def f(a, g, b, training=training):
            return weighted(batch_norm(a, g, b, rm, rv, training)[0], np.random.default_rng(seed))

        assert grad_check(f, [x, gamma, beta]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_prelu(seed):
    rng = np.random.default_rng(600 + seed)
    x = away_from_zero(rng, 2, 3, 2, 2, 2)
    for alpha in (rng.uniform(0.05, 0.5, 3), rng.uniform(0.05, 0.5, 1)):
        f = lambda a, al: weighted(prelu(a, al), np.random.default_rng(seed))  # noqa: E731
        assert grad_check(f, [x, alpha]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_dropout_fixed_mask(seed):
    rng = np.random.default_rng(700 + seed)
    x = rand(rng, 2, 3, 4)
    # the same rng stream per call gives every evaluation the same mask
    f = lambda a: weighted(dropout(a, 0.3, True, Rng(seed)), np.random.default_rng(seed))  # noqa: E731
    assert grad_check(f, [x]) < TOL


# ------------------------------------------------------------------ adjointness


def conv_adjoint_error(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    ci, co = (int(c) for c in rng.integers(1, 4, size=2))
    # compatible shapes: the transposed conv maps Y back onto exactly X's extent
    spatial = tuple(int(k - 2 * p + s * m) for m in rng.integers(max(1, p), 4, size=3))
    n = int(rng.integers(1, 3))
    X = rng.normal(size=(n, ci) + spatial)
    W = rng.normal(size=(co, ci, k, k, k))
    AX = conv3d(Tensor(X), Tensor(W), stride=s, padding=p).data
    Y = rng.normal(size=AX.shape)
    # transposed conv takes (in=co, out=ci) weights, which is W itself
    ATY_full = conv_transpose3d(Tensor(Y), Tensor(W), stride=s, padding=p).data
    assert ATY_full.shape == X.shape
    lhs = float(np.sum(AX * Y))
    rhs = float(np.sum(X * ATY_full))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


@pytest.mark.parametrize("seed", range(50))
def test_conv_adjointness(seed):
    assert conv_adjoint_error(seed) < 1e-10


# ------------------------------------------------------------------ backends


def test_backends_agree_bitwise():
    backends = kernels.available_backends()
    if "compiled" not in backends:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(9)
    for dtype in (np.float32, np.float64):
        x = rng.normal(size=(2, 3, 7, 6, 5)).astype(dtype)
        w = rng.normal(size=(4, 3, 3, 3, 3)).astype(dtype)
        for stride in ((1, 1, 1), (2, 2, 2), (1, 2, 1)):
            outs = {n: kernels.conv3d_forward(x, w, stride, impl=m) for n, m in backends.items()}
            np.testing.assert_array_equal(outs["compiled"], outs["python"])
            g = rng.normal(size=outs["python"].shape).astype(dtype)
            gi = {n: kernels.conv3d_backward_input(g, w, stride, x.shape[2:], impl=m) for n, m in backends.items()}
            np.testing.assert_array_equal(gi["compiled"], gi["python"])
            gw = {n: kernels.conv3d_backward_weight(x, g, stride, w.shape[2:], impl=m) for n, m in backends.items()}
            np.testing.assert_array_equal(gw["compiled"], gw["python"])


def test_slab_chunking_does_not_change_results(monkeypatch):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 2, 9, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    whole = kernels.conv3d_forward(x, w, (1, 1, 1))
    monkeypatch.setattr(kernels, "MAX_COLUMN_ELEMENTS", 2 * 54 * 25)
    sliced = kernels.conv3d_forward(x, w, (1, 1, 1))
    np.testing.assert_allclose(sliced, whole, rtol=1e-13)
    np.testing.assert_allclose(whole, naive_conv3d(x, w), rtol=1e-12)


# ------------------------------------------------------------------ properties


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 2),
    st.tuples(st.integers(3, 6), st.integers(3, 6), st.integers(3, 6)),
    st.integers(0, 2**31 - 1),
)
def test_conv_output_extent_property(k, s, p, spatial, seed):
    p = min(p, k - 1)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 1) + spatial)
    out = conv3d(Tensor(x), Tensor(rng.normal(size=(2, 1, k, k, k))), stride=s, padding=p)
    assert out.shape[2:] == tuple((n + 2 * p - k) // s + 1 for n in spatial)
    back = conv_transpose3d(out, Tensor(rng.normal(size=(2, 1, k, k, k))), stride=s, padding=p)
    assert back.shape[2:] == tuple((n - 1) * s - 2 * p + k for n in out.shape[2:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)

    def run():
        h = conv3d(Tensor(x), Tensor(w), padding=1)
        h = dropout(h, 0.2, True, Rng(seed))
        return sigmoid(h).data.tobytes()

    assert run() == run()
