"""Tape autodiff: forward semantics vs scalar-loop oracles, gradients vs
central finite differences, Adam behavior, checkpoint round-trips."""

import numpy as np
import pytest

from reki import tensor as T
from reki.errors import NumericError, RekiError, ShapeError


# ------------------------------------------------------------------
# scalar-loop re-implementations (oracles; no numpy vector math)
# ------------------------------------------------------------------

def loop_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def loop_softmax_row(row):
    mx = max(row)
    e = [pow(2.718281828459045235360287, v - mx) for v in row]
    z = sum(e)
    return [v / z for v in e]


def loop_sigmoid(v):
    import math
    return 1.0 / (1.0 + math.exp(-v))


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = T.const(rng.normal(size=(3, 5)))
    eye = T.const(np.eye(3))
    out = T.matmul(eye, a)
    np.testing.assert_array_equal(out.data, a.data)


def test_softmax_uniform_on_equal_logits():
    out = T.softmax_rowwise(T.const([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_rows_sum_to_one_and_open_interval():
    rng = np.random.default_rng(3)
    x = T.const(rng.normal(scale=8.0, size=(40, 7)))
    y = T.softmax_rowwise(x).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y > 0) and np.all(y < 1)


def test_random_chains_match_scalar_loop_oracle():
    """Forward values of short random op chains agree with loop math to 1e-12."""
    rng = np.random.default_rng(42)
    for trial in range(25):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        c = rng.normal(size=(4, 3))
        x = T.matmul(T.const(a), T.const(b))
        x = T.add(x, T.const(c))
        x = T.relu(x)
        x = T.softmax_rowwise(x)
        expected = loop_matmul(a.tolist(), b.tolist())
        expected = [[max(v + c[i][j], 0.0) for j, v in enumerate(row)] for i, row in enumerate(expected)]
        expected = [loop_softmax_row(row) for row in expected]
        np.testing.assert_allclose(x.data, expected, atol=1e-12)


def test_sigmoid_matches_pointwise_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(scale=3.0, size=(5, 4))
    y = T.sigmoid(T.const(x)).data
    for i in range(5):
        for j in range(4):
            assert abs(y[i, j] - loop_sigmoid(x[i, j])) < 1e-12


def test_mean_rows_and_sum_all():
    x = T.const([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_allclose(T.mean_rows(x).data, [[3.0, 4.0]])
    assert float(T.sum_all(x).data) == 21.0


def test_concat_slice_roundtrip():
    rng = np.random.default_rng(5)
    a = T.const(rng.normal(size=(3, 2)))
    b = T.const(rng.normal(size=(3, 4)))
    cat = T.concat_cols([a, b])
    np.testing.assert_array_equal(T.slice_cols(cat, 2, 6).data, b.data)


def test_repeat_and_segment_sum_are_adjoint_shapes():
    x = T.const(np.arange(6.0).reshape(2, 3))
    rep = T.repeat_rows(x, 4)
    assert rep.data.shape == (8, 3)
    back = T.segment_sum_rows(rep, 4)
    np.testing.assert_allclose(back.data, 4.0 * x.data)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(T.const(np.zeros((2, 3))), T.const(np.zeros((3, 2))))


def test_checked_mode_rejects_nonfinite():
    old = T.set_checked(True)
    try:
        with pytest.raises(NumericError):
            T.mul(T.const([[1e308]]), T.const([[1e308]]))
    finally:
        T.set_checked(old)


# ------------------------------------------------------------------
# backward
# ------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = T.param(np.random.default_rng(0).normal(size=(3, 4)))
    with T.Tape() as tape:
        loss = T.sum_all(x)
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads[x.uid], np.ones((3, 4)))


def test_sigmoid_grad_at_zero_weight():
    """loss = sigmoid(w . x) at w=0 has gradient 0.25 * x."""
    rng = np.random.default_rng(1)
    x = T.const(rng.normal(size=(1, 6)))
    w = T.param(np.zeros((6, 1)))
    with T.Tape() as tape:
        loss = T.sum_all(T.sigmoid(T.matmul(x, w)))
    grads = T.backward(tape, loss)
    np.testing.assert_allclose(grads[w.uid], 0.25 * x.data.T, atol=1e-12)


def test_nonscalar_loss_rejected():
    x = T.param(np.ones((2, 2)))
    with T.Tape() as tape:
        y = T.relu(x)
    with pytest.raises(ShapeError):
        T.backward(tape, y)


def test_fanout_accumulates():
    x = T.param(np.array([[2.0, 3.0]]))
    with T.Tape() as tape:
        y = T.mul(x, x)
        loss = T.sum_all(y)
    grads = T.backward(tape, loss)
    np.testing.assert_allclose(grads[x.uid], 2.0 * x.data)


def _random_graph_loss(params):
    """A small composite touching most primitives, used in several tests."""
    w1, w2, bias, scale = params["w1"], params["w2"], params["b"], params["s"]
    x = params["x"]
    h = T.relu(T.add(T.matmul(x, w1), bias))
    h = T.scale_rows(h, scale)
    gate = T.softmax_rowwise(T.matmul(h, w2))
    picked = T.slice_cols(gate, 0, 1)
    pooled = T.mean_rows(T.concat_cols([picked, T.sigmoid(picked)]))
    return T.sum_all(pooled)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = {
        "w1": T.param(rng.normal(size=(5, 8), scale=0.7)),
        "w2": T.param(rng.normal(size=(8, 4), scale=0.7)),
        "b": T.param(rng.normal(size=(1, 8), scale=0.2)),
        "s": T.param(rng.uniform(0.5, 1.5, size=(6, 1))),
        "x": T.param(rng.normal(size=(6, 5))),
    }
    report = T.grad_check(_random_graph_loss, params, step=1e-6, n_coords=96, seed=2)
    assert report.max_rel_error < 1e-4, report


def test_embedding_lookup_grad_scatters():
    table = T.param(np.zeros((5, 3)))
    ids = np.array([1, 3, 1])
    with T.Tape() as tape:
        rows = T.embedding_lookup(table, ids)
        loss = T.sum_all(rows)
    grads = T.backward(tape, loss)
    expected = np.zeros((5, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(grads[table.uid], expected)


def test_bce_against_hand_values():
    p = T.const([[0.5]])
    assert abs(float(T.bce_mean(p, [[1.0]]).data) - np.log(2.0)) < 1e-12
    near_perfect = T.bce_mean(T.const([[1.0]]), [[1.0]])
    assert float(near_perfect.data) < 1e-10


def test_bce_batch_matches_scalar_oracle():
    import math
    rng = np.random.default_rng(9)
    p = rng.uniform(0.01, 0.99, size=(50, 1))
    y = (rng.uniform(size=(50, 1)) < 0.5).astype(float)
    got = float(T.bce_mean(T.const(p), y).data)
    want = sum(-(y[i, 0] * math.log(p[i, 0]) + (1 - y[i, 0]) * math.log(1 - p[i, 0]))
               for i in range(50)) / 50
    assert abs(got - want) < 1e-12


# ------------------------------------------------------------------
# Adam
# ------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = T.param(np.array([[1.0, -2.0]]))
    st = T.AdamState()
    T.adam_step([p], {p.uid: np.zeros((1, 2))}, st)
    np.testing.assert_array_equal(p.data, [[1.0, -2.0]])


def test_adam_first_step_matches_hand_computation():
    """After one step from zero state the update is -lr * g / (|g| + eps')."""
    g = np.array([[0.3, -0.7]])
    p = T.param(np.zeros((1, 2)))
    st = T.AdamState()
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    T.adam_step([p], {p.uid: g}, st, lr=lr, beta1=b1, beta2=b2, eps=eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = -lr * m_hat / (np.sqrt(v_hat) + eps)
    np.testing.assert_allclose(p.data, expected, atol=1e-15)


def test_adam_trajectories_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = T.param(rng.normal(size=(3, 3)))
        st = T.AdamState()
        for _ in range(25):
            with T.Tape() as tape:
                loss = T.sum_all(T.mul(p, p))
            grads = T.backward(tape, loss)
            T.adam_step([p], grads, st, lr=0.05)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


# ------------------------------------------------------------------
# grad_check packaging & checkpoints
# ------------------------------------------------------------------

def test_grad_check_identity_loss_zero_error():
    params = {"x": T.param(np.array([[1.0, 2.0, 3.0]]))}
    report = T.grad_check(lambda ps: T.sum_all(ps["x"]), params, n_coords=3)
    assert report.max_rel_error < 1e-9


def test_grad_check_rejects_bad_closure_arity():
    params = {"x": T.param(np.ones((1, 1)))}
    with pytest.raises(RekiError):
        T.grad_check(lambda: None, params)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    params = {
        "layer0.w": T.param(rng.normal(size=(7, 3))),
        "layer0.b": T.param(rng.normal(size=(1, 3))),
    }
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, params)
    loaded = T.load_checkpoint(path)
    assert set(loaded) == set(params)
    for name, p in params.items():
        np.testing.assert_array_equal(loaded[name], p.data)


def test_checkpoint_crc_detects_corruption(tmp_path):
    params = {"w": T.param(np.ones((2, 2)))}
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, params)
    raw = bytearray(path.read_bytes())
    raw[15] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(RekiError, match="CRC"):
        T.load_checkpoint(path)
