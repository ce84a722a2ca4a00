"""Engine tests: primitive semantics, scope rules, cache ledger, and
backward correctness against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokentune.engine import (BackwardError, NonFiniteError, ShapeError,
                              Tape, gelu_array, simulate_peak_bytes)
from tokentune.verify import finite_diff_grad, relative_error


def rng_for(seed):
    return np.random.default_rng(np.random.SeedSequence([seed, 77]))


# ---- forward values ---------------------------------------------------------

def test_matmul_of_ones_caches_both_operands():
    t = Tape()
    c = t.matmul(t.input(np.ones((2, 3))), t.input(np.ones((3, 4))))
    assert np.array_equal(c.value, np.full((2, 4), 3.0))
    assert t.cached_activation_elements() == 6 + 12


def test_matmul_in_disabled_scope_same_values_zero_cache():
    t1 = Tape()
    out1 = t1.matmul(t1.input(np.ones((2, 3))), t1.input(np.ones((3, 4))))
    t2 = Tape()
    with t2.no_grad():
        out2 = t2.matmul(t2.input(np.ones((2, 3))), t2.input(np.ones((3, 4))))
    assert np.array_equal(out1.value, out2.value)
    assert t2.cached_activation_elements() == 0


def test_softmax_symmetric_row():
    t = Tape()
    out = t.softmax_rows(t.input(np.array([[0.0, 0.0]])))
    assert np.allclose(out.value, [[0.5, 0.5]])


def test_softmax_rows_sum_to_one_and_masked_entries_vanish():
    t = Tape()
    scores = np.array([[1.0, 2.0, -1e30], [0.5, -1e30, -1e30]])
    p = t.softmax_rows(t.input(scores)).value
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert p[0, 2] == 0.0 and p[1, 1] == 0.0


def test_empty_tape_cached_elements_zero():
    assert Tape().cached_activation_elements() == 0


def test_scope_restored_on_error_and_nested_query():
    t = Tape()
    assert t.grad_enabled
    with t.no_grad():
        assert not t.grad_enabled
        with t.no_grad():
            assert not t.grad_enabled
        assert not t.grad_enabled
    assert t.grad_enabled
    with pytest.raises(RuntimeError):
        with t.no_grad():
            raise RuntimeError("boom")
    assert t.grad_enabled


def test_disabled_body_matmul_caches_nothing():
    t = Tape()
    a = t.input(rng_for(0).normal(size=(3, 3)))
    with t.no_grad():
        node = t.matmul(a, a)
    assert node.cached_elements() == 0
    assert not node.requires_grad


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_outputs_identical_with_and_without_tracking(seed):
    r = rng_for(seed)
    x = r.normal(size=(3, 4))
    w = r.normal(size=(4, 4))

    def run(disabled):
        t = Tape()
        xn, wn = t.input(x), t.input(w)
        if disabled:
            with t.no_grad():
                return t.softmax_rows(t.gelu(t.matmul(xn, wn))).value
        return t.softmax_rows(t.gelu(t.matmul(xn, wn))).value

    assert np.array_equal(run(False), run(True))


# ---- backward ---------------------------------------------------------------

def test_linear_loss_gradient_is_broadcast_input():
    # loss = sum(W x): dL/dW[i, j] = x[j]
    x = np.array([[1.0], [2.0], [3.0]])
    t = Tape()
    w = t.param("w", rng_for(1).normal(size=(2, 3)))
    prod = t.matmul(w, t.constant(x))
    loss = t.matmul(t.mean_rows(prod), t.constant(np.array([[2.0]])))
    grads = t.backward(loss)
    assert np.allclose(grads["w"], np.tile(x.T, (2, 1)))


def test_backward_twice_errors():
    t = Tape()
    a = t.input(np.ones((1, 1)))
    loss = t.matmul(a, a)
    t.backward(loss)
    with pytest.raises(BackwardError):
        t.backward(loss)


def test_backward_needs_scalar_loss():
    t = Tape()
    a = t.input(np.ones((2, 2)))
    with pytest.raises(BackwardError):
        t.backward(a)


def test_disabled_node_contributes_exactly_zero():
    """A node recorded under a disabled scope must behave exactly like the
    same value substituted as a constant."""
    r = rng_for(3)
    x = r.normal(size=(2, 3))
    w1 = r.normal(size=(3, 3))
    w2 = r.normal(size=(3, 1))

    def grads(disable):
        t = Tape()
        w1n = t.param("w1", w1)
        w2n = t.param("w2", w2)
        xn = t.input(x)
        if disable:
            with t.no_grad():
                mid = t.gelu(t.matmul(xn, w1n))
        else:
            mid = t.constant(gelu_array(x @ w1))
        out = t.matmul(mid, w2n)
        return t.backward(t.mean_rows(out))

    g_disabled = grads(True)
    g_const = grads(False)
    assert "w1" not in g_disabled and "w1" not in g_const
    assert np.array_equal(g_disabled["w2"], g_const["w2"])


def test_dense_layer_matches_hand_formula_with_disabled_rows():
    """Two-row dense layer; the second row's output is recorded under a
    disabled scope. dW must equal h_sel^T (dL/da_sel * gelu'(z_sel))."""
    r = rng_for(4)
    h = r.normal(size=(2, 2))
    w = r.normal(size=(2, 2))
    b = r.normal(size=(1, 2))
    t = Tape()
    wn, bn = t.param("w", w), t.param("b", b)
    hn = t.constant(h)
    sel = t.gelu(t.add(t.matmul(t.select_rows(hn, [0]), wn), bn))
    with t.no_grad():
        unsel = t.gelu(t.add(t.matmul(t.select_rows(hn, [1]), wn), bn))
    both = t.concat_rows([sel, unsel])
    loss = t.matmul(t.mean_rows(both), t.constant(np.ones((2, 1))))
    grads = t.backward(loss)

    z = h[:1] @ w + b
    upstream = np.full((1, 2), 0.5)  # mean over 2 rows, then sum of coords
    eps = 1e-7
    sigma_prime = (gelu_array(z + eps) - gelu_array(z - eps)) / (2 * eps)
    dw_hand = h[:1].T @ (upstream * sigma_prime)
    db_hand = upstream * sigma_prime
    assert relative_error(grads["w"], dw_hand) < 1e-6
    assert relative_error(grads["b"], db_hand) < 1e-6


# ---- random-graph finite differences ----------------------------------------

def _build_graph(params, data, dtype):
    """Deterministic little graph touching every differentiable primitive."""
    t = Tape()
    x = t.input(data["x"].astype(dtype))
    w1 = t.param("w1", params["w1"])
    b1 = t.param("b1", params["b1"])
    gamma = t.param("gamma", params["gamma"])
    beta = t.param("beta", params["beta"])
    w2 = t.param("w2", params["w2"])
    h = t.add(t.matmul(x, w1), b1)
    h = t.layer_norm(h, gamma, beta)
    h = t.gelu(h)
    att = t.softmax_rows(t.scale(t.matmul(h, h, transpose_b=True), 0.7))
    h = t.matmul(att, h)
    h = t.concat_cols([t.select_cols(h, [0, 1]), t.select_cols(h, [2, 3])])
    h = t.concat_rows([t.select_rows(h, [0]), t.select_rows(h, [1, 2])])
    pooled = t.mean_rows(h)
    logits = t.matmul(pooled, w2)
    return t, t.cross_entropy(logits, data["targets"])


def _graph_case(seed, dtype):
    r = rng_for(seed)
    d = 4
    params = {
        "w1": r.normal(0, 0.8, (d, d)).astype(dtype),
        "b1": r.normal(0, 0.5, (1, d)).astype(dtype),
        "gamma": (1.0 + 0.2 * r.normal(size=(1, d))).astype(dtype),
        "beta": r.normal(0, 0.3, (1, d)).astype(dtype),
        "w2": r.normal(0, 0.8, (d, 5)).astype(dtype),
    }
    data = {"x": r.normal(0, 1.0, (3, d)), "targets": [int(r.integers(5))]}
    return params, data


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences_float64(seed):
    params, data = _graph_case(seed, np.float64)
    tape, loss = _build_graph(params, data, np.float64)
    analytic = tape.backward(loss)
    step = 1e-5

    def loss_value():
        _, node = _build_graph(params, data, np.float64)
        return float(node.value[0, 0])

    # The central-difference oracle itself resolves gradients only down to
    # ~|L|*ulp/(2*step); below that, disagreement is oracle noise, not an
    # engine error. 64 ulp-equivalents gives a safe deterministic floor.
    noise_floor = 64.0 * abs(loss_value()) * 2.0 ** -53 / (2.0 * step)
    numeric = finite_diff_grad(loss_value, params, step=step)
    for name, (coords, values) in numeric.items():
        a = analytic[name].reshape(-1)[coords]
        bound = noise_floor + 1e-6 * np.maximum(np.abs(a), np.abs(values))
        worst = np.max(np.abs(a - values) - bound)
        assert worst <= 0, f"{name}: exceeds fd tolerance by {worst} (seed {seed})"


@pytest.mark.parametrize("seed", range(0, 100, 10))
def test_float32_backward_matches_float64_numeric_oracle(seed):
    params64, data = _graph_case(seed, np.float64)
    params32 = {k: v.astype(np.float32) for k, v in params64.items()}
    tape, loss = _build_graph(params32, data, np.float32)
    analytic = tape.backward(loss)

    def loss_value():
        _, node = _build_graph(params64, data, np.float64)
        return float(node.value[0, 0])

    numeric = finite_diff_grad(loss_value, params64, step=1e-5)
    for name, (coords, values) in numeric.items():
        rel = relative_error(
            analytic[name].astype(np.float64).reshape(-1)[coords], values)
        assert rel < 1e-4, f"{name}: rel err {rel} (seed {seed})"


# ---- ledger properties --------------------------------------------------------

def test_cache_ledger_monotone_in_tracked_set():
    r = rng_for(9)
    x = r.normal(size=(4, 4))
    w = r.normal(size=(4, 4))

    def cached(track_x, track_w):
        t = Tape()
        xn = t.input(x, requires_grad=track_x)
        wn = t.input(w, requires_grad=track_w)
        t.gelu(t.matmul(xn, wn))
        return t.cached_activation_elements()

    c_none = cached(False, False)
    c_x = cached(True, False)
    c_both = cached(True, True)
    assert c_none == 0
    assert c_none <= c_x <= c_both


def test_param_saves_are_not_charged_to_the_activation_ledger():
    t = Tape()
    x = t.input(np.ones((2, 3)))
    w = t.param("w", np.ones((3, 4)), trainable=False)
    t.matmul(x, w)
    # only w is saved (for dL/dx); it is a parameter, so zero is charged
    assert t.cached_activation_elements() == 0


def test_live_cache_returns_to_zero_after_backward():
    r = rng_for(10)
    t = Tape()
    x = t.input(r.normal(size=(3, 3)))
    w = t.param("w", r.normal(size=(3, 1)))
    loss = t.mean_rows(t.matmul(t.gelu(x), w))
    loss = t.matmul(loss, t.constant(np.ones((1, 1))))
    assert t.live_cached_elements() > 0
    t.backward(loss)
    assert t.live_cached_elements() == 0
    assert t.cached_activation_elements() > 0  # the ledger persists


def test_debug_cache_untracked_inflates_ledger_only():
    r = rng_for(11)
    x = r.normal(size=(3, 3))

    def run(flag):
        t = Tape(debug_cache_untracked=flag)
        with t.no_grad():
            out = t.gelu(t.matmul(t.input(x), t.input(x)))
        return out.value, t.cached_activation_elements()

    v_off, c_off = run(False)
    v_on, c_on = run(True)
    assert np.array_equal(v_off, v_on)
    assert c_off == 0 and c_on > 0


# ---- errors -------------------------------------------------------------------

def test_shape_error_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as err:
        t.matmul(t.input(np.ones((2, 3))), t.input(np.ones((2, 3))))
    assert "matmul" in str(err.value)
    assert "(2, 3)" in str(err.value)


def test_non_finite_output_raises():
    t = Tape()
    big = t.input(np.full((1, 1), 1e308))
    with pytest.raises(NonFiniteError):
        t.matmul(t.scale(big, 1e100), t.constant(np.ones((1, 1))))


def test_cross_entropy_target_range_checked():
    t = Tape()
    with pytest.raises(ShapeError):
        t.cross_entropy(t.input(np.zeros((1, 3))), [5])


# ---- hypothesis round trips -----------------------------------------------------

@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6), st.integers(2, 6))
@settings(max_examples=30, deadline=None)
def test_select_concat_round_trip_bitwise(seed, rows, cols):
    r = rng_for(seed)
    x = r.normal(size=(rows, cols))
    perm = r.permutation(rows)
    t = Tape()
    xn = t.input(x)
    selected = t.select_rows(xn, perm)
    back = t.select_rows(selected, np.argsort(perm))
    assert np.array_equal(back.value, x)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_layer_norm_rows_standardized(seed):
    r = rng_for(seed)
    x = r.normal(2.0, 3.0, size=(4, 8))
    t = Tape()
    out = t.layer_norm(t.input(x), t.constant(np.ones((1, 8))),
                       t.constant(np.zeros((1, 8))))
    assert np.allclose(out.value.mean(axis=1), 0.0, atol=1e-10)
    assert np.allclose(out.value.std(axis=1), 1.0, atol=1e-3)


def test_simulate_peak_counts_retained_saves():
    r = rng_for(12)
    t = Tape()
    x = t.input(r.normal(size=(4, 4)))
    h = t.gelu(t.matmul(x, x))
    t.mean_rows(h)
    peak, retained = simulate_peak_bytes(t)
    assert peak >= retained > 0
