import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdgns import nn
from vdgns.nn import (
    AdamState,
    ParameterSet,
    Tape,
    Tensor,
    adam_step,
    add,
    broadcast_rows,
    concat_cols,
    gather_rows,
    gradient_check,
    init_lstm,
    init_mlp,
    load_parameters,
    lstm_step,
    matmul,
    mlp_forward,
    mse_loss,
    mul,
    save_parameters,
    scale,
    segment_sum,
    sigmoid,
    slice_cols,
    tanh,
)


def sum_all(t):
    """Reduce a tensor to a 1x1 scalar using only taped primitives."""
    right = matmul(t, Tensor(np.ones((t.cols, 1))))
    return matmul(Tensor(np.ones((1, t.rows))), right)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_sum_gradient_closed_form_and_fd():
    rng = np.random.default_rng(3)
    params = ParameterSet()
    a = params.add("a", rng.standard_normal((3, 4)))
    b_val = rng.standard_normal((4, 2))
    b = Tensor(b_val)

    with Tape() as tape:
        loss = sum_all(matmul(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b_val.T, rtol=1e-12)

    err = gradient_check(lambda: sum_all(matmul(a, b)), params)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# tanh


def test_tanh_zero():
    assert tanh(Tensor([[0.0]])).item() == 0.0


def test_tanh_saturation():
    params = ParameterSet()
    x = params.add("x", [[50.0]])
    with Tape() as tape:
        y = tanh(x)
    assert abs(y.item() - 1.0) < 1e-12
    tape.backward(y)
    assert abs(x.grad[0, 0]) < 1e-12


def test_tanh_backward_matches_fd():
    rng = np.random.default_rng(7)
    params = ParameterSet()
    x = params.add("x", rng.standard_normal((2, 3)))
    target = Tensor(rng.standard_normal((2, 3)))
    err = gradient_check(lambda: mse_loss(tanh(x), target), params)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# mlp


def test_mlp_zero_params_zero_input():
    params = ParameterSet()
    for i, (fi, fo) in enumerate([(3, 48), (48, 48)]):
        params.add(f"net.layer{i}.W", np.zeros((fi, fo)))
        params.add(f"net.layer{i}.b", np.zeros((1, fo)))
    out = mlp_forward(params, "net", Tensor(np.zeros((1, 3))), [3, 48, 48])
    np.testing.assert_array_equal(out.data, np.zeros((1, 48)))


def test_mlp_vertex_widths():
    rng = np.random.default_rng(0)
    params = ParameterSet()
    init_mlp(params, "net", [10, 48, 48], rng)
    out = mlp_forward(params, "net", Tensor(rng.standard_normal((5, 10))), [10, 48, 48])
    assert out.shape == (5, 48)


def test_mlp_missing_parameter():
    params = ParameterSet()
    with pytest.raises(KeyError, match="net.layer0.W"):
        mlp_forward(params, "net", Tensor(np.zeros((1, 3))), [3, 4, 4])


def test_mlp_gradients_match_fd():
    rng = np.random.default_rng(11)
    params = ParameterSet()
    init_mlp(params, "net", [4, 6, 3], rng)
    x = Tensor(rng.standard_normal((2, 4)))
    target = Tensor(rng.standard_normal((2, 3)))
    err = gradient_check(
        lambda: mse_loss(mlp_forward(params, "net", x, [4, 6, 3]), target), params)
    assert err < 1e-4


def test_mlp_forward_deterministic():
    rng = np.random.default_rng(5)
    params = ParameterSet()
    init_mlp(params, "net", [4, 8, 2], rng)
    x = Tensor(rng.standard_normal((3, 4)))
    a = mlp_forward(params, "net", x, [4, 8, 2]).data
    b = mlp_forward(params, "net", x, [4, 8, 2]).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# lstm


def _zero_lstm(input_size=5, hidden=32):
    params = ParameterSet()
    params.add("cell.Wx", np.zeros((input_size, 4 * hidden)))
    params.add("cell.Wh", np.zeros((hidden, 4 * hidden)))
    params.add("cell.b", np.zeros((1, 4 * hidden)))
    return params


def test_lstm_zero_weights_give_zero_state():
    params = _zero_lstm()
    h, c = lstm_step(params, "cell", Tensor(np.ones((1, 5))),
                     Tensor(np.zeros((1, 32))), Tensor(np.zeros((1, 32))))
    np.testing.assert_array_equal(h.data, np.zeros((1, 32)))
    np.testing.assert_array_equal(c.data, np.zeros((1, 32)))


def test_lstm_saturated_forget_gate_keeps_cell():
    hidden = 32
    params = _zero_lstm(hidden=hidden)
    b = params["cell.b"].data
    b[0, 0:hidden] = -50.0          # input gate ~ 0
    b[0, hidden:2 * hidden] = 50.0  # forget gate ~ 1
    c_prev = np.random.default_rng(1).standard_normal((1, hidden))
    h, c = lstm_step(params, "cell", Tensor(np.ones((1, 5))),
                     Tensor(np.zeros((1, hidden))), Tensor(c_prev))
    np.testing.assert_allclose(c.data, c_prev, atol=1e-12)


def test_lstm_gate_gradients_match_fd():
    rng = np.random.default_rng(13)
    params = ParameterSet()
    init_lstm(params, "cell", 5, 4, rng)
    x = Tensor(rng.standard_normal((1, 5)))
    h0 = Tensor(rng.standard_normal((1, 4)))
    c0 = Tensor(rng.standard_normal((1, 4)))
    target = Tensor(rng.standard_normal((1, 4)))

    def loss():
        h, c = lstm_step(params, "cell", x, h0, c0)
        return mse_loss(h, target)

    assert gradient_check(loss, params) < 1e-4


def test_lstm_hidden_width_mismatch():
    params = _zero_lstm()
    with pytest.raises(ValueError, match="lstm_step"):
        lstm_step(params, "cell", Tensor(np.zeros((1, 5))),
                  Tensor(np.zeros((1, 32))), Tensor(np.zeros((1, 16))))


# ---------------------------------------------------------------------------
# mse


def test_mse_identical_is_zero():
    x = Tensor([[1.0, 2.0]])
    assert mse_loss(x, Tensor([[1.0, 2.0]])).item() == 0.0


def test_mse_hand_case():
    assert mse_loss(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]])).item() == 2.5


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2))))


def test_mse_gradient_closed_form():
    rng = np.random.default_rng(17)
    params = ParameterSet()
    pred = params.add("pred", rng.standard_normal((3, 2)))
    target_val = rng.standard_normal((3, 2))
    with Tape() as tape:
        loss = mse_loss(pred, Tensor(target_val))
    tape.backward(loss)
    np.testing.assert_allclose(pred.grad, 2.0 * (pred.data - target_val) / 6.0,
                               rtol=1e-12)
    assert gradient_check(lambda: mse_loss(pred, Tensor(target_val)), params) < 1e-8


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradient_keeps_parameters():
    params = ParameterSet()
    w = params.add("w", [[1.0, -2.0]])
    state = AdamState(params)
    w.grad = np.zeros_like(w.data)
    adam_step(params, state, lr=0.1)
    np.testing.assert_array_equal(w.data, [[1.0, -2.0]])
    assert state.step == 1


def test_adam_first_step_is_lr_sized():
    params = ParameterSet()
    w = params.add("w", [[0.0]])
    state = AdamState(params)
    w.grad = np.array([[1.0]])
    adam_step(params, state, lr=0.1)
    # bias-corrected m/sqrt(v) is exactly 1 on the first step
    assert w.data[0, 0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_converges_on_quadratic():
    params = ParameterSet()
    w = params.add("w", [[0.0]])
    state = AdamState(params)
    for _ in range(100):
        with Tape() as tape:
            loss = mse_loss(w, Tensor([[3.0]]))
        tape.backward(loss)
        adam_step(params, state, lr=0.1)
    assert abs(w.data[0, 0] - 3.0) < 0.5


def test_adam_missing_gradient_raises():
    params = ParameterSet()
    params.add("w", [[1.0]])
    state = AdamState(params)
    with pytest.raises(RuntimeError, match="no gradient"):
        adam_step(params, state)


# ---------------------------------------------------------------------------
# gradient_check on reference losses


def test_gradient_check_quadratic_is_exact():
    rng = np.random.default_rng(23)
    params = ParameterSet()
    w = params.add("w", rng.standard_normal((2, 3)))
    err = gradient_check(lambda: mse_loss(w, Tensor(np.zeros((2, 3)))), params)
    assert err < 1e-8


def test_gradient_check_tanh_chain():
    rng = np.random.default_rng(29)
    params = ParameterSet()
    x = params.add("x", rng.standard_normal((2, 4)) * 0.5)
    target = Tensor(rng.standard_normal((2, 4)))
    err = gradient_check(lambda: mse_loss(tanh(tanh(tanh(x))), target), params)
    assert err < 1e-6


def test_gradient_check_rejects_nonfinite_loss():
    params = ParameterSet()
    params.add("w", [[1.0]])
    with pytest.raises(FloatingPointError):
        gradient_check(lambda: Tensor([[np.nan]]), params)


# ---------------------------------------------------------------------------
# structural ops


def test_concat_slice_roundtrip_and_grads():
    rng = np.random.default_rng(31)
    params = ParameterSet()
    a = params.add("a", rng.standard_normal((3, 2)))
    b = params.add("b", rng.standard_normal((3, 4)))
    target = Tensor(rng.standard_normal((3, 2)))

    def loss():
        cat = concat_cols([a, b])
        return mse_loss(slice_cols(cat, 0, 2), target)

    assert gradient_check(loss, params) < 1e-6
    cat = concat_cols([a, b])
    np.testing.assert_array_equal(cat.data[:, 2:6], b.data)


def test_gather_rows_fanout_accumulates():
    params = ParameterSet()
    x = params.add("x", [[1.0, 2.0], [3.0, 4.0]])
    with Tape() as tape:
        picked = gather_rows(x, [0, 0, 1])
        loss = scale(sum_all(picked), 1.0)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [1.0, 1.0]])


def test_gather_rows_sparse_backward_path():
    rng = np.random.default_rng(37)
    params = ParameterSet()
    x = params.add("x", rng.standard_normal((50, 48)))
    idx = rng.integers(0, 50, size=3000)
    with Tape() as tape:
        loss = sum_all(gather_rows(x, idx))
    tape.backward(loss)
    expected = np.bincount(idx, minlength=50).astype(float)[:, None] * np.ones((1, 48))
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_segment_sum_matches_loop():
    rng = np.random.default_rng(41)
    params = ParameterSet()
    x = params.add("x", rng.standard_normal((10, 3)))
    seg = rng.integers(0, 4, size=10)
    out = segment_sum(x, seg, 4)
    manual = np.zeros((4, 3))
    for row, s in zip(x.data, seg):
        manual[s] += row
    np.testing.assert_allclose(out.data, manual, rtol=1e-12)
    target = Tensor(rng.standard_normal((4, 3)))
    assert gradient_check(lambda: mse_loss(segment_sum(x, seg, 4), target),
                          params) < 1e-6


def test_broadcast_rows_grad_sums():
    params = ParameterSet()
    p = params.add("p", [[1.0, -1.0]])
    with Tape() as tape:
        loss = sum_all(broadcast_rows(p, 5))
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, [[5.0, 5.0]])


def test_mul_sigmoid_grads():
    rng = np.random.default_rng(43)
    params = ParameterSet()
    a = params.add("a", rng.standard_normal((2, 3)))
    b = params.add("b", rng.standard_normal((2, 3)))
    target = Tensor(rng.standard_normal((2, 3)))
    err = gradient_check(lambda: mse_loss(mul(sigmoid(a), tanh(b)), target), params)
    assert err < 1e-4


def test_bias_add_broadcast_grad():
    rng = np.random.default_rng(47)
    params = ParameterSet()
    b = params.add("b", rng.standard_normal((1, 3)))
    x = Tensor(rng.standard_normal((4, 3)))
    target = Tensor(rng.standard_normal((4, 3)))
    assert gradient_check(lambda: mse_loss(add(x, b), target), params) < 1e-6


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 8),
    inner=st.integers(1, 8),
    cols=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
)
def test_property_matmul_backward_matches_fd(rows, inner, cols, seed):
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    a = params.add("a", rng.standard_normal((rows, inner)))
    b = params.add("b", rng.standard_normal((inner, cols)))
    target = Tensor(rng.standard_normal((rows, cols)))
    err = gradient_check(lambda: mse_loss(matmul(a, b), target), params)
    assert err < 1e-4


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 8),
    cols=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
    op_name=st.sampled_from(["tanh", "sigmoid", "mul", "add", "scale"]),
)
def test_property_elementwise_backward_matches_fd(rows, cols, seed, op_name):
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    a = params.add("a", rng.standard_normal((rows, cols)))
    b = params.add("b", rng.standard_normal((rows, cols)))
    target = Tensor(rng.standard_normal((rows, cols)))
    ops = {
        "tanh": lambda: tanh(a),
        "sigmoid": lambda: sigmoid(a),
        "mul": lambda: mul(a, b),
        "add": lambda: add(a, b),
        "scale": lambda: scale(a, 1.7),
    }
    err = gradient_check(lambda: mse_loss(ops[op_name](), target), params)
    assert err < 1e-4


def test_no_nonfinite_from_bounded_inputs():
    rng = np.random.default_rng(53)
    x = Tensor(rng.uniform(-1e3, 1e3, size=(16, 16)))
    for op in (tanh, sigmoid):
        out = op(x)
        assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# parameter set and serialization


def test_parameter_set_rejects_duplicates():
    params = ParameterSet()
    params.add("w", [[1.0]])
    with pytest.raises(KeyError):
        params.add("w", [[2.0]])


def test_parameter_iteration_is_lexicographic():
    params = ParameterSet()
    params.add("z", [[1.0]])
    params.add("a", [[1.0]])
    params.add("m", [[1.0]])
    assert [name for name, _ in params.items()] == ["a", "m", "z"]


def test_parameters_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(59)
    params = ParameterSet()
    init_mlp(params, "net", [7, 5, 3], rng)
    init_lstm(params, "cell", 4, 6, rng)
    path = tmp_path / "params.bin"
    save_parameters(params, path)
    loaded = load_parameters(path)
    assert loaded.names() == params.names()
    for name, t in params.items():
        assert np.array_equal(loaded[name].data, t.data)
    save_parameters(loaded, tmp_path / "params2.bin")
    assert (tmp_path / "params.bin").read_bytes() == (tmp_path / "params2.bin").read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_parameters(path)


def test_load_rejects_truncation(tmp_path):
    rng = np.random.default_rng(61)
    params = ParameterSet()
    params.add("w", rng.standard_normal((3, 3)))
    path = tmp_path / "params.bin"
    save_parameters(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_parameters(path)
