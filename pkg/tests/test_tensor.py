import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from goalback import tensor as T
from goalback.errors import ContractError, DimensionError, TrainingError
from gradcheck import numeric_grad, rel_err


def check_grads(build, *arrays, tol=1e-4):
    """build(*tensors) -> scalar Tensor; compares autodiff to central differences."""
    params = [T.parameter(a) for a in arrays]
    build(*params).backward()
    for p in params:
        num = numeric_grad(lambda: float(build(*params).data), p.data)
        assert rel_err(p.grad, num) < tol


def test_matmul_identity_and_hand_arithmetic():
    out = T.matmul(T.Tensor([[1, 0], [0, 1]]), T.Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])
    assert T.matmul(T.Tensor([[1, 2]]), T.Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    w = rng.normal(size=(3, 2))
    check_grads(lambda x, y: T.sum(T.matmul(x, y) * w), a, b, tol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_silu_values():
    x = T.Tensor([0.0, 1.0, 40.0, -40.0])
    out = T.silu(x).data
    assert out[0] == 0.0
    # oracle: 1 * sigma(1) evaluated directly
    assert out[1] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-15)
    assert out[1] == pytest.approx(0.7310585786300049)
    assert out[2] == pytest.approx(40.0)
    assert abs(out[3]) < 1e-15


def test_layer_norm_examples():
    g, b = T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))
    np.testing.assert_allclose(T.layer_norm(T.Tensor([[1.0, 3.0]]), g, b).data, [[-1.0, 1.0]], atol=1e-5)
    g4, b4 = T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(T.Tensor([[2.5] * 4]), g4, b4).data, [[0.0] * 4])


def test_layer_norm_empty_dim():
    with pytest.raises(DimensionError):
        T.layer_norm(T.Tensor(np.ones((2, 0))), T.Tensor(np.ones(0)), T.Tensor(np.zeros(0)))


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x, g, b = rng.uniform(-2, 2, (3, 5)), rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
    w = rng.normal(size=(3, 5))
    check_grads(lambda x, g, b: T.sum(T.layer_norm(x, g, b) * w), x, g, b, tol=1e-5)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    big = T.softmax_rows(T.Tensor([[1000.0, 0.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0, 0.0]], atol=1e-300)
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([np.log([1.0, 2.0, 3.0])])).data,
                               [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(float, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(T.Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


OPS = {
    "silu": lambda x: T.silu(x),
    "sigmoid": lambda x: T.sigmoid(x),
    "softmax": lambda x: T.softmax_rows(x),
    "log_softmax": lambda x: T.log_softmax_rows(x),
    "exp": lambda x: T.exp(x),
    "clamp_min": lambda x: T.clamp_min(x, 0.3),
    "bce": lambda x: T.bce_with_logits(x, np.linspace(0, 1, x.shape[-1])),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "mean0": lambda x: T.mean(x, axis=0),
    "concat": lambda x: T.concat([x, T.mul(x, x)], axis=-1),
    "pick": lambda x: T.pick(x, np.arange(x.shape[0]) % x.shape[1]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_elementwise_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 4))
    if name == "clamp_min":
        # keep away from the kink
        x[np.abs(x - 0.3) < 1e-3] += 0.01
    op = OPS[name]
    probe = op(T.Tensor(x)).data
    w = rng.normal(size=probe.shape)
    check_grads(lambda t: T.sum(op(t) * w), x, tol=1e-4)


def test_log_gradient():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 2, (2, 3))
    check_grads(lambda t: T.sum(T.log(t) * 1.7), x)


def test_broadcast_add_reduces_gradient():
    rng = np.random.default_rng(4)
    check_grads(lambda a, b: T.sum((a + b) * (a + b)), rng.normal(size=(3, 4)), rng.normal(size=4))


def test_straight_through_degenerate_and_identity_gradient():
    rng = np.random.default_rng(5)
    dist = T.parameter([[1.0, 0.0, 0.0]] * 4)
    out = T.straight_through_sample(dist, rng)
    np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0]] * 4)
    T.sum(out).backward()
    np.testing.assert_array_equal(dist.grad, np.ones((4, 3)))


def test_straight_through_frequency():
    # Monte-Carlo oracle: fair coin over 1e5 draws
    rng = np.random.default_rng(6)
    dist = T.Tensor(np.full((100_000, 2), 0.5))
    out = T.straight_through_sample(dist, rng).data
    assert np.all(out.sum(axis=1) == 1.0)
    assert 0.49 <= out[:, 0].mean() <= 0.51


def test_straight_through_rejects_unnormalized():
    with pytest.raises(ContractError):
        T.straight_through_sample(T.Tensor([[0.5, 0.4]]), np.random.default_rng(0))


def test_adam_zero_gradient_and_first_step():
    p = {"w": T.parameter([1.0, -2.0])}
    state = T.AdamState(lr=0.1)
    T.adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1

    q = {"x": T.parameter([3.0])}
    st_ = T.AdamState(lr=0.1)
    T.adam_step(q, {"x": np.array([1.0])}, st_)
    # first bias-corrected step is lr * g / (|g| + eps)
    assert q["x"].data[0] == pytest.approx(3.0 - 0.1, abs=1e-6)
    T.adam_step(q, {"x": np.array([1.0])}, st_)
    assert st_.step == 2


def test_adam_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="enc.w"):
        T.adam_step({"enc.w": T.parameter([1.0])}, {"enc.w": np.array([np.nan])}, T.AdamState())


def test_backward_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    grads = []
    for _ in range(2):
        a = T.parameter(x)
        T.sum(T.silu(T.matmul(a, T.Tensor(x.T)))).backward()
        grads.append(a.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_shared_subgraph_accumulates():
    a = T.parameter([2.0])
    y = a * a + a * 3.0
    T.sum(y).backward()
    assert a.grad[0] == pytest.approx(7.0)


def test_weights_roundtrip(tmp_path):
    path = tmp_path / "w.btw"
    arrays = {"enc.l0.w": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "dec.b": np.zeros(4)}
    T.save_tensors(path, arrays)
    raw = path.read_bytes()
    assert raw[:4] == b"BTW1"
    assert int.from_bytes(raw[4:8], "little") == 3
    back = T.load_tensors(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
