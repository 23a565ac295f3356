"""Tensor/tape core tests: pinned closed forms, tape discipline, and
randomized finite-difference gradient checks (100 cases per op)."""

import concurrent.futures
import math

import numpy as np
import pytest

from fedcsap.numerics import (
    NonFiniteError,
    ParameterStore,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    add,
    add_rowvec,
    backward,
    backward_fault,
    concat,
    finite_diff_check,
    finite_diff_check_blocks,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    set_finiteness_checks,
    sgd_step,
    sigmoid,
    slice_cols,
    softmax,
    sub,
    transpose,
)


# ---------------------------------------------------------------------------
# forward closed forms


def test_matmul_identity():
    out = matmul(np.eye(2), [[5.0], [7.0]])
    assert np.array_equal(out.data, [[5.0], [7.0]])


def test_matmul_row_sums():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 2)))


def test_softmax_symmetry():
    out = softmax(np.array([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_closed_form():
    out = softmax(np.array([0.0, math.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    for _ in range(20):
        v = rng.normal(size=6) * 10.0
        c = float(rng.normal() * 50.0)
        a = softmax(v, axis=0).data
        b = softmax(v + c, axis=0).data
        assert np.max(np.abs(a - b)) < 1e-12


def test_softmax_rows_sum_to_one():
    # holds for any input with |v| <= 100
    rng = np.random.default_rng(12)
    for _ in range(100):
        v = rng.uniform(-100.0, 100.0, size=(3, 5))
        s = softmax(v, axis=1).data
        assert np.all(s > 0.0)
        assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-12


def test_sigmoid_at_zero():
    assert sigmoid(np.array([0.0])).data[0] == 0.5


def test_relu_values():
    out = relu(np.array([-3.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_layer_norm_constant_row_is_zero():
    x = np.full((2, 4), 3.7)
    out = layer_norm(x, np.ones(4), np.zeros(4))
    assert np.max(np.abs(out.data)) < 1e-6


def test_layer_norm_two_point_closed_form():
    out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-5)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_reduce_mean_all_axes():
    out = reduce_mean(np.array([[1.0, 3.0], [5.0, 7.0]]))
    assert out.data.shape == ()
    assert out.item() == 4.0


def test_reduce_empty_selection_is_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = reduce_sum(x, axes=())
    assert np.array_equal(out.data, x)


def test_reduce_mean_linearity():
    rng = np.random.default_rng(13)
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        a = float(rng.normal())
        lhs = reduce_mean(a * x).item()
        rhs = a * reduce_mean(x).item()
        assert abs(lhs - rhs) < 1e-12


def test_l2_normalize_closed_form():
    out = l2_normalize(np.array([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8], atol=1e-12)


def test_l2_normalize_idempotent():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(4, 5))
    once = l2_normalize(x).data
    twice = l2_normalize(once).data
    assert np.max(np.abs(once - twice)) < 1e-12


def test_l2_normalize_self_cosine_is_one():
    rng = np.random.default_rng(15)
    for _ in range(20):
        v = rng.normal(size=7)
        u = l2_normalize(v).data
        assert abs(float(u @ u) - 1.0) < 1e-12


def test_l2_normalize_zero_vector_maps_to_zero():
    out = l2_normalize(np.zeros(5))
    assert np.array_equal(out.data, np.zeros(5))


def test_elementwise_rejects_nonscalar_broadcast():
    with pytest.raises(ShapeError):
        add(np.zeros((2, 3)), np.zeros(3))


# ---------------------------------------------------------------------------
# tensor and tape discipline


def test_grad_buffer_present_iff_requires_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 2.0])
    assert a.grad is not None and np.array_equal(a.grad, [0.0, 0.0])
    assert b.grad is None


def test_item_rejects_nonscalar():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(mul(x, x))
    backward(tape, y)
    assert np.allclose(x.grad, [6.0])


def test_disconnected_parameter_grad_is_exactly_zero():
    x = Tensor([3.0], requires_grad=True)
    unused = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(mul(x, x))
    backward(tape, y)
    assert np.array_equal(unused.grad, [0.0, 0.0])


def test_backward_twice_errors():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(mul(x, x))
    backward(tape, y)
    with pytest.raises(TapeError):
        backward(tape, y)


def test_backward_rejects_nonscalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(TapeError):
        backward(tape, y)


def test_backward_rejects_foreign_loss():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape_a:
        y = reduce_sum(mul(x, x))
    with Tape():
        pass
    fresh = Tape()
    with pytest.raises(TapeError):
        backward(fresh, y)
    backward(tape_a, y)  # the owner still works


def test_recording_onto_consumed_tape_errors_until_reset():
    x = Tensor([2.0], requires_grad=True)
    tape = Tape()
    with tape:
        y = reduce_sum(mul(x, x))
    backward(tape, y)
    with pytest.raises(TapeError):
        with tape:
            mul(x, x)
    tape.reset()
    x.zero_grad()
    with tape:
        y = reduce_sum(mul(x, x))
    backward(tape, y)
    assert np.allclose(x.grad, [4.0])


def test_no_grad_suppresses_recording():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad
        assert len(tape) == 0


def test_ops_outside_tape_do_not_track():
    x = Tensor([2.0], requires_grad=True)
    y = mul(x, x)
    assert not y.requires_grad


def test_innermost_tape_wins():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            y = reduce_sum(mul(x, x))
        assert inner.owns(y) and not outer.owns(y)
        assert len(outer) == 0


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(16)
    W = rng.normal(size=(5, 5))
    x = rng.normal(size=(5, 3))

    def run():
        w = Tensor(W, requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(sigmoid(matmul(w, Tensor(x))))
        backward(tape, loss)
        return w.grad.copy()

    assert np.array_equal(run(), run())


def test_distinct_tapes_on_distinct_threads():
    # fedruntime trains clients in parallel; each worker gets its own tape
    def worker(seed: int) -> float:
        rng = np.random.default_rng(seed)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        expected = None
        for _ in range(50):
            w.zero_grad()
            with Tape() as tape:
                loss = reduce_sum(mul(w, w))
            backward(tape, loss)
            if expected is None:
                expected = 2.0 * w.data
            assert np.allclose(w.grad, expected)
        return float(np.sum(w.grad))

    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(worker, range(8)))
    assert len(results) == 8


def test_nonfinite_output_is_a_hard_error():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        scale(np.array([1e308]), 1e10)


def test_finiteness_checks_can_be_disabled():
    old = set_finiteness_checks(False)
    try:
        with np.errstate(over="ignore"):
            out = scale(np.array([1e308]), 1e10)
        assert np.isinf(out.data[0])
    finally:
        set_finiteness_checks(old)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        scale(np.array([1e308]), 1e10)


# ---------------------------------------------------------------------------
# parameter store and sgd


def test_register_rejects_duplicates_and_frozen_tensors():
    ps = ParameterStore()
    ps.register("w", Tensor([1.0], requires_grad=True))
    with pytest.raises(KeyError):
        ps.register("w", Tensor([2.0], requires_grad=True))
    with pytest.raises(ValueError):
        ps.register("frozen", Tensor([1.0]))


def test_sgd_zero_lr_is_bitwise_noop():
    rng = np.random.default_rng(17)
    ps = ParameterStore()
    w = ps.register("w", Tensor(rng.normal(size=(3, 3)), requires_grad=True))
    before = w.data.copy()
    with Tape() as tape:
        loss = reduce_sum(mul(w, w))
    backward(tape, loss)
    sgd_step(ps, lr=0.0)
    assert np.array_equal(w.data, before)
    assert np.array_equal(w.grad, np.zeros_like(before))


def test_sgd_pinned_step():
    ps = ParameterStore()
    p = ps.register("p", Tensor([2.0], requires_grad=True))
    p.grad[...] = 4.0
    sgd_step(ps, lr=0.5)
    assert np.array_equal(p.data, [0.0])
    assert np.array_equal(p.grad, [0.0])


def test_sgd_two_steps_equal_one_accumulated_step_on_linear_model():
    # linear loss => constant gradient, so the equivalence is exact
    c = np.array([1.5, -2.0, 0.25])
    eta = 0.1

    def make():
        ps = ParameterStore()
        ps.register("p", Tensor([4.0, 1.0, -3.0], requires_grad=True))
        return ps

    def grad_pass(ps):
        with Tape() as tape:
            loss = reduce_sum(mul(ps["p"], Tensor(c)))
        backward(tape, loss)

    two = make()
    for _ in range(2):
        grad_pass(two)
        sgd_step(two, eta)

    one = make()
    grad_pass(one)
    grad_pass(one)  # grads accumulate across passes until zeroed
    sgd_step(one, eta)

    assert np.array_equal(two["p"].data, one["p"].data)


def test_load_arrays_validates_names_and_shapes():
    ps = ParameterStore()
    ps.register("w", Tensor(np.zeros((2, 2)), requires_grad=True))
    with pytest.raises(KeyError):
        ps.load_arrays({"other": np.zeros((2, 2))})
    with pytest.raises(ShapeError):
        ps.load_arrays({"w": np.zeros(3)})


def test_store_copy_is_deep():
    ps = ParameterStore()
    w = ps.register("w", Tensor([1.0, 2.0], requires_grad=True))
    dup = ps.copy()
    dup["w"].data[0] = 99.0
    assert w.data[0] == 1.0


# ---------------------------------------------------------------------------
# finite-difference oracle


def test_fd_check_linear_is_near_exact():
    rng = np.random.default_rng(18)
    ps = ParameterStore()
    p = ps.register("p", Tensor(rng.normal(size=6), requires_grad=True))
    c = Tensor(rng.normal(size=6))
    err = finite_diff_check(lambda: reduce_sum(mul(p, c)), ps)
    assert err < 1e-9


def test_fd_check_quadratic():
    rng = np.random.default_rng(19)
    ps = ParameterStore()
    p = ps.register("p", Tensor(rng.normal(size=5), requires_grad=True))
    err = finite_diff_check(lambda: reduce_sum(mul(p, p)), ps, h=1e-5)
    assert err < 1e-7


def test_fd_check_rejects_bad_step():
    ps = ParameterStore()
    ps.register("p", Tensor([1.0], requires_grad=True))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: reduce_sum(ps["p"]), ps, h=0.0)


def test_fd_check_reports_per_block_errors():
    rng = np.random.default_rng(20)
    ps = ParameterStore()
    a = ps.register("a", Tensor(rng.normal(size=3), requires_grad=True))
    b = ps.register("b", Tensor(rng.normal(size=3), requires_grad=True))
    report = finite_diff_check_blocks(lambda: reduce_sum(mul(a, b)), ps)
    assert set(report) == {"a", "b"}
    assert max(report.values()) < 1e-9


def test_fd_check_catches_a_corrupted_backward_rule():
    # negative control: doubling matmul's upstream gradient must be detected
    rng = np.random.default_rng(21)
    ps = ParameterStore()
    w = ps.register("w", Tensor(rng.normal(size=(3, 3)), requires_grad=True))
    x = Tensor(rng.normal(size=(3, 2)))

    def f():
        return reduce_sum(sigmoid(matmul(w, x)))

    assert finite_diff_check(f, ps) < 1e-6
    ps.zero_grads()
    with backward_fault("matmul", scale=2.0):
        corrupted = finite_diff_check(f, ps)
    assert corrupted > 1e-2


def test_grad_of_matmul_sum_matches_row_sums():
    rng = np.random.default_rng(22)
    ps = ParameterStore()
    a = ps.register("a", Tensor(rng.normal(size=(3, 4)), requires_grad=True))
    b = Tensor(rng.normal(size=(4, 2)))
    err = finite_diff_check(lambda: reduce_sum(matmul(a, b)), ps)
    assert err < 1e-6
    with Tape() as tape:
        loss = reduce_sum(matmul(a, b))
    backward(tape, loss)
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    assert np.allclose(a.grad, expected, atol=1e-12)


def test_sigmoid_derivative_at_zero():
    ps = ParameterStore()
    x = ps.register("x", Tensor([0.0], requires_grad=True))
    with Tape() as tape:
        loss = reduce_sum(sigmoid(x))
    backward(tape, loss)
    assert abs(x.grad[0] - 0.25) < 1e-15
    x.zero_grad()
    err = finite_diff_check(lambda: reduce_sum(sigmoid(x)), ps)
    assert err < 1e-8


def test_backward_sigmoid_of_matmul_vs_oracle():
    rng = np.random.default_rng(23)
    ps = ParameterStore()
    w = ps.register("W", Tensor(rng.normal(size=(3, 3)), requires_grad=True))
    x = Tensor(rng.normal(size=(3, 1)))
    err = finite_diff_check(lambda: reduce_sum(sigmoid(matmul(w, x))), ps)
    assert err < 1e-6


def test_layer_norm_gradient_vs_oracle():
    rng = np.random.default_rng(24)
    ps = ParameterStore()
    x = ps.register("x", Tensor(rng.normal(size=(3, 4)), requires_grad=True))
    g = ps.register("g", Tensor(rng.normal(size=4), requires_grad=True))
    b = ps.register("b", Tensor(rng.normal(size=4), requires_grad=True))
    err = finite_diff_check(lambda: reduce_sum(mul(layer_norm(x, g, b), layer_norm(x, g, b))), ps)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# randomized per-op gradient property checks

N_CASES = 100


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    # scalar loss with a distinct coefficient per output coordinate, so a
    # wrong gradient in any slot shows up
    return reduce_sum(mul(out, Tensor(weights)))


def _away_from_zero(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # kinked ops (relu, abs) get inputs clear of the kink; the kink
    # convention itself is pinned by dedicated tests
    return np.where(np.abs(arr) < margin, arr + np.sign(arr) * margin + (arr == 0) * margin, arr)


def _case_matmul(rng, ps):
    a = ps.register("a", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    b = ps.register("b", Tensor(rng.normal(size=(3, 2)), requires_grad=True))
    w = rng.normal(size=(2, 2))
    return lambda: _weighted_sum(matmul(a, b), w)


def _case_transpose(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    w = rng.normal(size=(3, 2))
    return lambda: _weighted_sum(transpose(x), w)


def _binary_case(op):
    def build(rng, ps):
        a = ps.register("a", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
        if rng.uniform() < 0.3:  # exercise the scalar-operand path too
            b = ps.register("b", Tensor(rng.normal(size=(1,)), requires_grad=True))
        else:
            b = ps.register("b", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
        w = rng.normal(size=(2, 3))
        return lambda: _weighted_sum(op(a, b), w)

    return build


def _case_scale(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    c = float(rng.normal())
    w = rng.normal(size=(2, 3))
    return lambda: _weighted_sum(scale(x, c), w)


def _kinked_case(op):
    def build(rng, ps):
        data = _away_from_zero(rng.normal(size=(2, 3)))
        x = ps.register("x", Tensor(data, requires_grad=True))
        w = rng.normal(size=(2, 3))
        return lambda: _weighted_sum(op(x), w)

    return build


def _case_sigmoid(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    w = rng.normal(size=(2, 3))
    return lambda: _weighted_sum(sigmoid(x), w)


def _case_reshape(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 6)), requires_grad=True))
    w = rng.normal(size=(3, 4))
    return lambda: _weighted_sum(reshape(x, (3, 4)), w)


def _case_concat(rng, ps):
    axis = int(rng.integers(0, 2))
    a = ps.register("a", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    b = ps.register("b", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    w = rng.normal(size=(4, 3) if axis == 0 else (2, 6))
    return lambda: _weighted_sum(concat([a, b], axis=axis), w)


def _case_slice_cols(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 5)), requires_grad=True))
    start = int(rng.integers(0, 4))
    stop = int(rng.integers(start + 1, 6))
    w = rng.normal(size=(2, stop - start))
    return lambda: _weighted_sum(slice_cols(x, start, stop), w)


def _case_add_rowvec(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(3, 4)), requires_grad=True))
    v = ps.register("v", Tensor(rng.normal(size=4), requires_grad=True))
    w = rng.normal(size=(3, 4))
    return lambda: _weighted_sum(add_rowvec(x, v), w)


def _reduce_case(op):
    def build(rng, ps):
        x = ps.register("x", Tensor(rng.normal(size=(2, 3)), requires_grad=True))
        axes = [None, 0, 1, (0, 1)][int(rng.integers(0, 4))]
        out_shape = np.empty((2, 3)).sum(axis=axes).shape
        w = rng.normal(size=out_shape)
        return lambda: _weighted_sum(op(x, axes=axes), w)

    return build


def _softmax_case(op):
    def build(rng, ps):
        x = ps.register("x", Tensor(rng.normal(size=(2, 4)) * 2.0, requires_grad=True))
        axis = int(rng.integers(0, 2))
        w = rng.normal(size=(2, 4))
        return lambda: _weighted_sum(op(x, axis=axis), w)

    return build


def _case_layer_norm(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 4)), requires_grad=True))
    g = ps.register("g", Tensor(rng.normal(size=4) + 1.0, requires_grad=True))
    b = ps.register("b", Tensor(rng.normal(size=4), requires_grad=True))
    w = rng.normal(size=(2, 4))
    return lambda: _weighted_sum(layer_norm(x, g, b), w)


def _case_l2_normalize(rng, ps):
    x = ps.register("x", Tensor(rng.normal(size=(2, 4)), requires_grad=True))
    w = rng.normal(size=(2, 4))
    return lambda: _weighted_sum(l2_normalize(x), w)


OP_CASES = {
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "add": _binary_case(add),
    "sub": _binary_case(sub),
    "mul": _binary_case(mul),
    "scale": _case_scale,
    "relu": _kinked_case(relu),
    "abs": _kinked_case(absolute),
    "sigmoid": _case_sigmoid,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "slice_cols": _case_slice_cols,
    "add_rowvec": _case_add_rowvec,
    "reduce_sum": _reduce_case(reduce_sum),
    "reduce_mean": _reduce_case(reduce_mean),
    "softmax": _softmax_case(softmax),
    "log_softmax": _softmax_case(log_softmax),
    "layer_norm": _case_layer_norm,
    "l2_normalize": _case_l2_normalize,
}


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_gradients_match_finite_differences(op_name):
    build = OP_CASES[op_name]
    worst = 0.0
    for case in range(N_CASES):
        rng = np.random.default_rng([hash(op_name) % (2**32), case])
        ps = ParameterStore()
        f = build(rng, ps)
        err = finite_diff_check(f, ps, h=1e-5)
        worst = max(worst, err)
    assert worst < 1e-5, f"{op_name}: max rel err {worst}"
