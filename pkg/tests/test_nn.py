import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import LOSS_KINDS, relative_error
from unlearnlab.nn import (
    Checkpoint, CheckpointFormatError, CrossEntropy, KLToReference, LayerSpec, ModelSpec, SpecError,
    backward, forward, init_checkpoint, interpolate, l2_param_distance, load, mlp_tiny, perturb,
    save, softmax, zero_checkpoint,
)
from unlearnlab.nn.checkpoint import dumps, loads


def dense_2x2() -> ModelSpec:
    return ModelSpec((2,), (LayerSpec("fc", "dense", (2, 2)),), (), 2)


# -- forward ------------------------------------------------------------------

def test_zero_network_gives_uniform_softmax():
    spec = mlp_tiny(5, 4, 8)
    logits, _ = forward(zero_checkpoint(spec), np.random.default_rng(0).normal(size=(7, 5)))
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 0.25)


def test_eval_forward_is_bitwise_deterministic():
    ck = init_checkpoint(mlp_tiny(5, 3), 1)
    x = np.random.default_rng(1).normal(size=(9, 5)).astype(np.float32)
    a, trace = forward(ck, x, "eval")
    b, _ = forward(ck, x, "eval")
    assert trace is None
    assert a.tobytes() == b.tobytes()


def test_single_dense_layer_matches_hand_product():
    spec = dense_2x2()
    ck = Checkpoint(spec, np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5]), np.zeros(0), np.ones(0))
    x = np.array([[1.0, -1.0], [2.0, 0.5]])
    logits, _ = forward(ck, x)
    # x @ [[1, 2], [3, 4]] + [0.5, -0.5]
    expected = np.array([[1 - 3 + 0.5, 2 - 4 - 0.5], [2 + 1.5 + 0.5, 4 + 2 - 0.5]])
    np.testing.assert_allclose(logits, expected)


def test_forward_rejects_wrong_input_shape():
    ck = init_checkpoint(mlp_tiny(5, 3), 0)
    with pytest.raises(SpecError):
        forward(ck, np.zeros((4, 6), np.float32))


def test_train_forward_updates_running_stats_with_momentum():
    ck = init_checkpoint(mlp_tiny(3, 2, 4), 0)
    x = np.random.default_rng(0).normal(2.0, 1.0, size=(32, 3)).astype(np.float32)
    _, trace = forward(ck, x, "train")
    h = x @ ck.tensor("fc1", "W") + ck.tensor("fc1", "b")
    np.testing.assert_allclose(trace.bn_mean[:4], 0.1 * h.mean(axis=0), rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6))
def test_softmax_rows_sum_to_one(vals):
    z = np.array(vals, dtype=np.float32).reshape(2, 3)
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-5)


# -- backward ------------------------------------------------------------------

@pytest.mark.parametrize("net", ["mlp", "conv"])
@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_gradient_matches_finite_differences(net, kind):
    err, n_params = relative_error(net, kind)
    assert n_params <= 200
    assert err <= 1e-4


def test_kl_between_identical_logits_is_zero():
    ck = init_checkpoint(mlp_tiny(4, 3, 6), 0).astype(np.float64)
    x = np.random.default_rng(0).normal(size=(8, 4))
    logits, trace = forward(ck, x, "train")
    loss, grad = backward(trace, KLToReference(logits.copy()))
    assert abs(loss) < 1e-12
    assert np.abs(grad).max() < 1e-12


def test_saturated_cross_entropy_is_near_zero():
    logits = np.array([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    loss, _, _ = CrossEntropy(np.array([0, 2]))(logits, {})
    assert loss < 1e-20


def test_backward_needs_train_trace_and_matching_targets():
    ck = init_checkpoint(mlp_tiny(4, 3, 6), 0)
    x = np.zeros((4, 4), np.float32)
    _, trace = forward(ck, x, "eval")
    with pytest.raises(ValueError):
        backward(trace, CrossEntropy(np.zeros(4, int)))
    _, trace = forward(ck, x, "train")
    with pytest.raises(ValueError):
        backward(trace, CrossEntropy(np.zeros(3, int)))


def test_backward_is_deterministic():
    ck = init_checkpoint(mlp_tiny(4, 3, 6), 2)
    x = np.random.default_rng(2).normal(size=(8, 4)).astype(np.float32)
    y = np.arange(8) % 3
    g1 = backward(forward(ck, x, "train")[1], CrossEntropy(y))[1]
    g2 = backward(forward(ck, x, "train")[1], CrossEntropy(y))[1]
    assert g1.tobytes() == g2.tobytes()


# -- distances and interpolation -------------------------------------------------

def test_l2_distance_examples():
    a = init_checkpoint(mlp_tiny(4, 3), 0)
    assert l2_param_distance(a, a) == 0.0
    p = a.params.copy()
    p[5] += 3.0
    assert l2_param_distance(a, a.replace(params=p)) == pytest.approx(3.0, rel=1e-6)


def test_l2_distance_matches_naive_loop_and_ignores_running_stats():
    a = init_checkpoint(mlp_tiny(4, 3), 0)
    b = init_checkpoint(mlp_tiny(4, 3), 1).replace(bn_var=np.full(a.spec.n_bn, 7.0, np.float32))
    total = 0.0
    for u, v in zip(a.params.tolist(), b.params.tolist()):
        total += (u - v) ** 2
    assert l2_param_distance(a, b) == pytest.approx(total ** 0.5, rel=1e-6)


def test_l2_distance_rejects_spec_mismatch():
    with pytest.raises(SpecError):
        l2_param_distance(init_checkpoint(mlp_tiny(4, 3), 0), init_checkpoint(mlp_tiny(4, 2), 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_l2_distance_is_a_metric(s1, s2, s3):
    spec = mlp_tiny(3, 2, 4)
    a, b, c = (init_checkpoint(spec, s) for s in (s1, s2, s3))
    ab, bc, ac = l2_param_distance(a, b), l2_param_distance(b, c), l2_param_distance(a, c)
    assert ab == pytest.approx(l2_param_distance(b, a))
    assert ac <= ab + bc + 1e-6


def test_interpolate_endpoints_and_midpoint():
    spec = dense_2x2()
    a = Checkpoint(spec, np.array([0.0, 2.0, 0, 0, 0, 0]), np.zeros(0), np.ones(0))
    b = Checkpoint(spec, np.array([2.0, 0.0, 0, 0, 0, 0]), np.zeros(0), np.ones(0))
    assert interpolate(a, b, 0.0).equals(a)
    assert interpolate(a, b, 1.0).equals(b)
    np.testing.assert_array_equal(interpolate(a, b, 0.5).params[:2], [1.0, 1.0])
    with pytest.raises(ValueError):
        interpolate(a, b, 1.5)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1))
def test_interpolate_is_symmetric_and_keeps_variance_positive(alpha):
    spec = mlp_tiny(3, 2, 4)
    rng = np.random.default_rng(0)
    a = init_checkpoint(spec, 0).replace(bn_var=rng.uniform(0.01, 3, spec.n_bn).astype(np.float32))
    b = init_checkpoint(spec, 1).replace(bn_var=rng.uniform(0.01, 3, spec.n_bn).astype(np.float32))
    ab, ba = interpolate(a, b, alpha), interpolate(b, a, 1 - alpha)
    np.testing.assert_allclose(ab.params, ba.params, atol=1e-6)
    np.testing.assert_allclose(ab.bn_var, ba.bn_var, atol=1e-6)
    assert np.all(ab.bn_var > 0)
    assert np.all(interpolate(a, b, alpha, bn_interp="std").bn_var > 0)


# -- perturbations -----------------------------------------------------------------

def test_attenuate_halves_every_weight():
    spec = mlp_tiny(3, 2, 4)
    ck = init_checkpoint(spec, 0)
    ck = ck.replace(params=np.full(spec.n_params, 2.0, np.float32),
                    bn_var=np.full(spec.n_bn, 3.0, np.float32))
    out = perturb(ck, "attenuate", 0.5)
    np.testing.assert_array_equal(out.params, 1.0)
    np.testing.assert_array_equal(out.bn_var, 3.0)


def test_dropout_zeroes_exactly_twenty_of_one_hundred():
    spec = ModelSpec((9,), (LayerSpec("fc", "dense", (9, 10)),), (), 10)
    assert spec.n_params == 100
    ck = Checkpoint(spec, np.full(100, 2.0, np.float32), np.zeros(0, np.float32),
                    np.ones(0, np.float32))
    out = perturb(ck, "dropout", 0.2, seed=4)
    assert int((out.params == 0).sum()) == 20
    assert perturb(ck, "dropout", 0.2, seed=4).equals(out)


def test_gaussian_perturbation():
    ck = init_checkpoint(mlp_tiny(3, 2, 4), 0)
    assert perturb(ck, "gaussian", 0.0).equals(ck)
    noisy = perturb(ck, "gaussian", 0.02, seed=1)
    d = (noisy.params - ck.params).astype(np.float64)
    assert 0.01 < d.std() < 0.03
    assert perturb(ck, "gaussian", 0.02, seed=1).equals(noisy)


def test_weights_only_perturbation_leaves_biases():
    ck = init_checkpoint(mlp_tiny(3, 2, 4), 0)
    out = perturb(ck, "attenuate", 0.5, weights_only=True)
    np.testing.assert_array_equal(out.tensor("fc1", "b"), ck.tensor("fc1", "b"))
    np.testing.assert_allclose(out.tensor("fc1", "W"), 0.5 * ck.tensor("fc1", "W"))


@pytest.mark.parametrize("kind,mag", [("attenuate", 0.0), ("dropout", 1.0), ("dropout", -0.1),
                                      ("gaussian", -1.0), ("blur", 0.1)])
def test_perturb_rejects_invalid_magnitude(kind, mag):
    with pytest.raises(ValueError):
        perturb(init_checkpoint(mlp_tiny(3, 2, 4), 0), kind, mag)


# -- checkpoint files --------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    spec = mlp_tiny(6, 3, 8)
    ck = init_checkpoint(spec, 0).replace(
        bn_mean=rng.normal(size=spec.n_bn).astype(np.float32),
        bn_var=rng.uniform(0.1, 2, spec.n_bn).astype(np.float32), step_count=123)
    back = load(save(ck, tmp_path / "a.ulck"))
    assert back.params.tobytes() == ck.params.tobytes()
    assert back.bn_mean.tobytes() == ck.bn_mean.tobytes()
    assert back.bn_var.tobytes() == ck.bn_var.tobytes()
    assert back.step_count == 123 and back.spec_hash == ck.spec_hash
    assert back.content_hash() == ck.content_hash()


def test_spec_hash_survives_serialization():
    spec = mlp_tiny(6, 3, 8)
    assert ModelSpec.from_dict(spec.to_dict()).hash == spec.hash


def test_checkpoint_file_errors():
    data = dumps(init_checkpoint(mlp_tiny(3, 2, 4), 0))
    with pytest.raises(CheckpointFormatError, match="magic"):
        loads(b"XXXXX" + data[5:])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        loads(data[:-3])
