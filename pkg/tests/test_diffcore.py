import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstack.diffcore import (
    CheckpointFormatError, Context, Graph, NumericError, OracleError, Parameter, ShapeError, StateError,
    StepAbortedError, backward, decode_checkpoint, encode_checkpoint, finite_difference_gradient, load_checkpoint,
    make_rng, no_grad, ops, relative_error, save_checkpoint, sgd_step,
)
from brainstack.harness.gradsuite import run_gradcheck


# evaluate

def test_square_graph():
    g = Graph(lambda ctx, x: ops.mul(x, x))
    assert g.evaluate({"x": 3.0})["out"].data == 9.0


def test_identity_graph(rng):
    x = rng.standard_normal((3, 4))
    out = Graph(lambda ctx, x: x).evaluate({"x": x})["out"].data
    np.testing.assert_array_equal(out, x)


def test_softmax_closed_form():
    out = Graph(lambda ctx, x: ops.softmax(x)).evaluate({"x": np.array([0.0, math.log(2.0)])})["out"].data
    # oracle: exp(s_i) / sum exp(s_j) = (1, 2) / 3
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-15)


def test_graph_records_nodes_in_execution_order():
    g = Graph(lambda ctx, x: ops.elu(ops.scale(x, 2.0)))
    g.evaluate({"x": np.ones(3)})
    assert [n.op for n in g.nodes] == ["scale", "elu"]


def test_shape_error_names_node():
    with pytest.raises(ShapeError) as err:
        ops.matmul(np.ones((2, 3)), np.ones((4, 5)))
    assert "matmul" in str(err.value)


def test_non_finite_output_is_numeric_error():
    g = Graph(lambda ctx, x: ops.scale(x, 1e308))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        g.evaluate({"x": np.array([10.0])})


def test_dropout_only_in_train_mode(rng):
    x = rng.standard_normal((4, 50))
    np.testing.assert_array_equal(ops.dropout(x, 0.5, Context("eval")).data, x)
    y = ops.dropout(x, 0.5, Context("train", seed=3)).data
    kept = y != 0
    assert 0 < kept.mean() < 1
    np.testing.assert_allclose(y[kept], 2.0 * x[kept])


def test_dropout_deterministic_given_seed(rng):
    x = rng.standard_normal((4, 50))
    a = ops.dropout(x, 0.3, Context("train", seed=[1, 2])).data
    b = ops.dropout(x, 0.3, Context("train", seed=[1, 2])).data
    c = ops.dropout(x, 0.3, Context("train", seed=[1, 3])).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_norm_train_vs_eval(rng):
    x = 3.0 + 2.0 * rng.standard_normal((64, 3, 10))
    rm, rv = np.zeros(3), np.ones(3)
    y = ops.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, Context("train")).data
    assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2)) - 1.0) < 1e-5)
    assert np.all(rm != 0)  # running stats moved
    rm2, rv2 = np.zeros(3), np.ones(3)
    y_eval = ops.batch_norm(x, np.ones(3), np.zeros(3), rm2, rv2, Context("eval")).data
    np.testing.assert_allclose(y_eval, x / np.sqrt(1 + 1e-5))
    np.testing.assert_array_equal(rm2, 0.0)


def test_evaluate_bit_reproducible(rng):
    x = rng.standard_normal((4, 8))
    f = Graph(lambda ctx, x: ops.dropout(ops.elu(x), 0.2, ctx))
    a = f.evaluate({"x": x}, mode="train", seed=7)["out"].data
    b = f.evaluate({"x": x}, mode="train", seed=7)["out"].data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_probability_vector(xs):
    p = ops.softmax(np.array(xs)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


# backward

def test_backward_square():
    x = Parameter("x", 3.0)
    backward(ops.mul(x, x))
    assert x.grad == 6.0


def test_backward_product():
    x, y = Parameter("x", 2.0), Parameter("y", 5.0)
    backward(ops.mul(x, y))
    assert (x.grad, y.grad) == (5.0, 2.0)


def test_untouched_parameter_gets_zero_gradient():
    x, unused = Parameter("x", 2.0), Parameter("u", np.ones(3))
    g = Graph(lambda ctx: ops.mul(x, x), params=[x, unused])
    g.evaluate()
    grads = g.backward()
    np.testing.assert_array_equal(grads["u"], 0.0)


def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        Graph(lambda ctx: None).backward()


def test_backward_needs_scalar():
    x = Parameter("x", np.ones(3))
    with pytest.raises(ShapeError):
        backward(ops.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = Parameter("x", 2.0)
    with no_grad():
        y = ops.mul(x, x)
    assert backward(y) == []
    assert x.grad is None or np.all(x.grad == 0)


def test_cnet_graph_matches_finite_differences():
    from brainstack.experts import CNetConfig, cnet_forward, init_expert
    from brainstack.objective import cross_entropy
    cfg = CNetConfig(in_channels=4, time_len=64, temporal_kernel=8, temporal_filters=2, depth_multiplier=2,
                     separable_kernel=4, pool1=4, pool2=4, feature_dim=4, num_classes=3)
    ps = init_expert(cfg, seed=0)
    r = make_rng(0, "test", "cnet4x64")
    x, y = r.standard_normal((2, 4, 64)), np.array([0, 2])
    loss = lambda: cross_entropy(cnet_forward(x, ps, Context("train", seed=1), cfg).logits, y)  # noqa: E731
    backward(loss())
    analytic = np.concatenate([p.grad.ravel() for p in ps])
    with no_grad():
        fd = finite_difference_gradient(lambda: float(loss().data), list(ps), 1e-3)
    numeric = np.concatenate([fd[p.pid].ravel() for p in ps])
    assert relative_error(analytic, numeric) < 1e-4


# finite differences

def test_fd_sin():
    x = Parameter("x", 0.0)
    g = finite_difference_gradient(lambda: math.sin(float(x.data)), [x], 1e-5)
    assert abs(g["x"] - 1.0) < 1e-8


def test_fd_constant():
    x = Parameter("x", np.ones(3))
    g = finite_difference_gradient(lambda: 4.2, [x], 1e-3)
    np.testing.assert_array_equal(g["x"], 0.0)


def test_fd_detects_non_determinism():
    x = Parameter("x", 1.0)
    calls = iter(range(100))
    with pytest.raises(OracleError):
        finite_difference_gradient(lambda: float(next(calls)), [x], 1e-3)


def test_fd_cross_entropy_self_consistency():
    from brainstack.objective import cross_entropy
    z = Parameter("z", np.array([[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]]))
    y = np.array([2, 1])
    backward(cross_entropy(z, y))
    fd = finite_difference_gradient(lambda: float(cross_entropy(z, y).data), [z], 1e-3)
    assert relative_error(z.grad, fd["z"]) < 1e-4


def test_gradcheck_primitives_small_sample():
    results = run_gradcheck("ops", seeds=range(3))
    bad = [(r.name, r.seed, r.max_rel_err) for r in results if not r.passed]
    assert not bad


# sgd_step

def _param_with_grad(theta, grad):
    p = Parameter("p", float(theta))
    p.grad = np.array(float(grad))
    return p


def test_sgd_plain():
    p = _param_with_grad(1.0, 2.0)
    sgd_step([p], lr=0.1)
    assert p.data == pytest.approx(0.8, abs=1e-15)
    assert p.grad == 0.0


def test_sgd_momentum_two_steps():
    p = _param_with_grad(0.0, 1.0)
    sgd_step([p], lr=0.1, momentum=0.9)
    p.grad = np.array(1.0)
    sgd_step([p], lr=0.1, momentum=0.9)
    # oracle: v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19
    assert p.data == pytest.approx(-0.29, abs=1e-12)


def test_sgd_pure_decay():
    p = _param_with_grad(1.0, 0.0)
    sgd_step([p], lr=0.1, weight_decay=1e-4)
    assert p.data == pytest.approx(0.99999, abs=1e-15)


def test_sgd_non_finite_grad_aborts_whole_step():
    a, b = _param_with_grad(1.0, 1.0), _param_with_grad(1.0, np.nan)
    b.pid = "bad"
    with pytest.raises(StepAbortedError) as err:
        sgd_step([a, b], lr=0.1)
    assert err.value.pid == "bad"
    assert a.data == 1.0


def test_sgd_rejects_bad_hyperparameters():
    p = _param_with_grad(1.0, 1.0)
    with pytest.raises(ValueError):
        sgd_step([p], lr=0.0)
    with pytest.raises(ValueError):
        sgd_step([p], lr=0.1, momentum=1.0)


def test_parameter_shapes_agree(rng):
    p = Parameter("w", rng.standard_normal((3, 2)))
    assert p.grad.shape == p.data.shape == p.momentum.shape


# checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    tensors = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32([1.5]),
               "scalar": np.array(2.0, dtype=np.float32), "ünï": rng.standard_normal((2, 1, 3)).astype(np.float32)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(tensors, path)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_bad_magic():
    buf = bytearray(encode_checkpoint({"x": np.ones(2, np.float32)}))
    buf[:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError) as err:
        decode_checkpoint(bytes(buf))
    assert err.value.offset == 0


def test_checkpoint_truncated():
    buf = encode_checkpoint({"x": np.ones(5, np.float32)})
    for cut in (3, 10, len(buf) - 1):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(buf[:cut])


# rng

def test_make_rng_streams_independent_and_reproducible():
    a = make_rng(0, "init", "w").standard_normal(4)
    assert np.array_equal(a, make_rng(0, "init", "w").standard_normal(4))
    assert not np.array_equal(a, make_rng(0, "init", "v").standard_normal(4))
    assert not np.array_equal(a, make_rng(1, "init", "w").standard_normal(4))
