import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab import audit
from unlearnlab.nn import (
    CosineRepresentation, Entropy, EuclideanRepresentation, KLToReference, eval_taps, forward,
    l2_param_distance,
)
from unlearnlab.nn.losses import cross_entropy_per_example
from unlearnlab.train import split_accuracy
from unlearnlab.unlearn import (
    METHODS, RETAIN_ONLY, InvalidParameter, UnlearnConfig, _BODIES, _Ctx, compose_two_phase,
    distance_push_gradient, ssd_dampen, unlearn,
)


def cfg(method, epochs=3, lr=1e-3, **params):
    return UnlearnConfig(method, lr=lr, epochs=epochs, batch_size=64, seed=1, params=params)


@pytest.fixture(scope="module")
def results(world):
    """Every method once, with its access log."""
    out = {}
    for m in METHODS + ("finetune",):
        a = audit.AccessAudit(strict=True)
        out[m] = (unlearn(world.pretrained, world.bundle, cfg(m), audit=a), a)
    return out


# -- configuration -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidParameter):
        UnlearnConfig("gradient_surgery")
    with pytest.raises(InvalidParameter):
        UnlearnConfig("scrub", params={"alpha": 1})
    with pytest.raises(InvalidParameter):
        UnlearnConfig("scrub", lr=0)
    with pytest.raises(InvalidParameter):
        UnlearnConfig("scrub", epochs=-1)
    c = UnlearnConfig("cbft")
    assert c.lr == 1e-5 and c.epochs == 100 and c.weight_decay == 0
    assert c.resolved()["lambda_mid"] == 1e-3 and c.resolved()["loss_cap"] == 50
    assert UnlearnConfig.from_dict(c.to_dict()) == c


def test_default_magnitudes():
    assert UnlearnConfig("weight_distortion").resolved()["magnitude"] == 0.02
    assert UnlearnConfig("weight_attenuation").resolved()["magnitude"] == 0.5
    assert UnlearnConfig("weight_dropout").resolved()["magnitude"] == 0.2
    assert UnlearnConfig("catastrophic_forgetting").resolved() == {"norm": "l2", "coeff": 1e-3}
    tar = UnlearnConfig("tar").resolved()
    assert (tar["inner_steps"], tar["lambda_align"], tar["lambda_entropy"]) == (4, 1.0, 1.0)


@pytest.mark.parametrize("method,params", [
    ("weight_dist_reg", {"lambda_dist": 0.0}), ("weight_dist_reg", {"lambda_dist": -1.0}),
    ("catastrophic_forgetting", {"norm": "l3"}), ("ssd", {"select_threshold": 0.0}),
    ("circuit_breakers", {"c_forget": -1.0}), ("weight_dropout", {"magnitude": 1.5}),
    ("tar", {"inner_steps": -1}),
])
def test_invalid_method_parameters(world, method, params):
    with pytest.raises(InvalidParameter):
        unlearn(world.pretrained, world.bundle, cfg(method, **params))


# -- shared contract -------------------------------------------------------------------

@pytest.mark.parametrize("method", METHODS + ("finetune",))
def test_method_contract(world, results, method):
    res, log = results[method]
    assert res.checkpoint.spec_hash == world.pretrained.spec_hash
    assert res.pretrained_hash == world.pretrained.content_hash()
    assert res.distance == pytest.approx(l2_param_distance(res.checkpoint, world.pretrained))
    assert res.steps == res.checkpoint.step_count - world.pretrained.step_count
    assert np.all(np.isfinite(res.checkpoint.params))
    read = log.roles_read(purpose="train")
    assert read <= {"retain", "forget"}
    assert ("forget" in read) == (method not in RETAIN_ONLY)
    assert log.passed


@pytest.mark.parametrize("method", ["scrub", "random_relabel", "weight_distortion", "tar"])
def test_methods_are_deterministic(world, results, method):
    again = unlearn(world.pretrained, world.bundle, cfg(method))
    assert again.checkpoint.equals(results[method][0].checkpoint)
    assert list(map(repr, again.records)) == list(map(repr, results[method][0].records))


@pytest.mark.parametrize("method", ["scrub", "weight_distortion", "weight_dropout", "ssd"])
def test_zero_epochs_is_identity(world, method):
    res = unlearn(world.pretrained, world.bundle, cfg(method, epochs=0))
    assert res.checkpoint.equals(world.pretrained) and res.distance == 0.0


def test_forget_aware_methods_beat_plain_finetuning(world, results):
    assert split_accuracy(world.pretrained, world.bundle.forget) >= 0.9
    baseline = split_accuracy(results["finetune"][0].checkpoint, world.bundle.forget)
    for m in ("scrub", "neggrad_plus"):
        assert split_accuracy(results[m][0].checkpoint, world.bundle.forget) <= baseline - 0.3, m
    # one-shot dampening is allowed to cost retain accuracy
    for m in set(METHODS) - {"ssd"}:
        assert split_accuracy(results[m][0].checkpoint, world.bundle.retain) >= 0.9, m


# -- fine-tuning with a norm penalty ---------------------------------------------------------

def test_l1_gives_more_near_zero_weights_than_l2(world):
    l1 = unlearn(world.pretrained, world.bundle, cfg("l1_sparse", coeff=0.05)).checkpoint
    l2 = unlearn(world.pretrained, world.bundle, cfg("catastrophic_forgetting", coeff=0.05)).checkpoint
    frac = lambda ck: float(np.mean(np.abs(ck.params) < 2e-3))  # noqa: E731
    assert frac(l1) > frac(l2)


def test_zero_sigma_distortion_is_plain_finetuning(world, results):
    res = unlearn(world.pretrained, world.bundle, cfg("weight_distortion", magnitude=0.0))
    assert res.checkpoint.equals(results["finetune"][0].checkpoint)


# -- SCRUB and NegGrad+ ----------------------------------------------------------------------

def test_scrub_teacher_kl_is_zero_at_start(world):
    x = world.bundle.retain.x[:32]
    logits, _ = eval_taps(world.pretrained, x)
    loss, dl, _ = KLToReference(logits.copy())(logits, {})
    assert abs(loss) < 1e-6 and np.abs(dl).max() < 1e-7


def _ctx(world, method, **params):
    c = cfg(method, **params)
    return _Ctx(world.pretrained.copy(), world.pretrained, world.bundle.retain,
                world.bundle.forget, c, c.resolved(), 4)


def test_neggrad_alternates_and_ascends(world):
    ctx = _ctx(world, "neggrad_plus", forget_batch_size=8)
    n, step = _BODIES["neggrad_plus"](ctx)
    assert n == 2 * 3 * math.ceil(len(world.bundle.retain) / 64)
    cur = world.pretrained
    _, g_forget, _, _ = step(1, cur)
    fb = ctx.forget_stream(n // 2, 8)[0]
    x, y = world.bundle.forget.x[fb], world.bundle.forget.y[fb]

    def batch_loss(ck):
        logits, _ = forward(ck, x, "train")
        return cross_entropy_per_example(logits.astype(np.float64), y).mean()

    moved = cur.replace(params=cur.params - 1e-3 * g_forget)
    assert batch_loss(moved) > batch_loss(cur)


def test_neggrad_cap_skips_ascent(world):
    ctx = _ctx(world, "neggrad_plus", loss_cap=1e-9)
    _, step = _BODIES["neggrad_plus"](ctx)
    assert step(1, world.pretrained)[1] is None
    assert step(0, world.pretrained)[1] is not None


# -- Circuit Breakers ------------------------------------------------------------------------

def test_representation_terms_at_the_reference(world):
    x = world.bundle.forget.x
    _, taps = eval_taps(world.pretrained, x)
    e, _, _ = EuclideanRepresentation(taps)(None, taps)
    c, _, _ = CosineRepresentation(taps)(None, taps)
    assert e == 0.0 and c == pytest.approx(1.0, abs=1e-5)


def test_circuit_breakers_without_forget_term_keeps_forget_set(world):
    res = unlearn(world.pretrained, world.bundle, cfg("circuit_breakers", c_forget=0.0))
    before = split_accuracy(world.pretrained, world.bundle.forget)
    assert split_accuracy(res.checkpoint, world.bundle.forget) >= before - 0.15


# -- SSD -------------------------------------------------------------------------------------

def test_ssd_equal_importance_selects_nothing():
    rng = np.random.default_rng(0)
    f = rng.uniform(0.1, 1, 50)
    p = rng.normal(size=50)
    out, factor = ssd_dampen(p, f, f.copy(), alpha=2.0, lam=1.0)
    np.testing.assert_array_equal(out, p)
    assert np.all(factor == 1)


def test_ssd_zero_dampening_zeroes_selected():
    p = np.arange(1.0, 11.0)
    out, _ = ssd_dampen(p, np.full(10, 1e-3), np.ones(10), alpha=1.0, lam=0.0)
    np.testing.assert_array_equal(out, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20), st.just(0.0) | st.floats(1e-3, 5))
def test_ssd_factors_in_unit_interval(seed, alpha, lam):
    rng = np.random.default_rng(seed)
    fr, ff = rng.exponential(size=30), rng.exponential(size=30)
    _, factor = ssd_dampen(rng.normal(size=30), fr, ff, alpha, lam)
    sel = ff > alpha * fr
    assert np.all(factor[~sel] == 1)
    assert np.all((factor[sel] >= 0) & (factor[sel] <= 1))
    if lam > 0:
        assert np.all(factor[sel] > 0)


# -- Weight Dist Reg and CBFT --------------------------------------------------------------------

def test_distance_gradient():
    anchor = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(distance_push_gradient(anchor, anchor, 0.5), 0)
    p = anchor + np.array([3.0, 0, 4.0, 0])
    g = distance_push_gradient(p, anchor, 0.5)
    np.testing.assert_allclose(g, -0.5 / 2 * np.array([0.6, 0, 0.8, 0]))


def test_distance_push_moves_further_than_finetuning(world, results):
    res = unlearn(world.pretrained, world.bundle, cfg("weight_dist_reg", lambda_dist=300.0))
    assert res.distance > 2 * results["finetune"][0].distance


def test_cbft_with_skipped_midpoint_is_plain_finetuning(world, results):
    capped = unlearn(world.pretrained, world.bundle, cfg("cbft", loss_cap=1e-9))
    assert capped.checkpoint.equals(results["finetune"][0].checkpoint)
    off = unlearn(world.pretrained, world.bundle, cfg("cbft", lambda_mid=0.0))
    assert off.checkpoint.equals(results["finetune"][0].checkpoint)


# -- TAR -----------------------------------------------------------------------------------------

def test_entropy_is_maximal_and_flat_at_uniform_predictions():
    h, d, _ = Entropy()(np.zeros((5, 4)), {})
    assert h == pytest.approx(math.log(4))
    assert np.abs(d).max() < 1e-12


def test_tar_without_inner_steps_runs(world):
    res = unlearn(world.pretrained, world.bundle, cfg("tar", epochs=1, inner_steps=0))
    assert res.steps > 0 and np.all(np.isfinite(res.checkpoint.params))


# -- two-phase composition -------------------------------------------------------------------------

def test_two_phase_accounts_budgets_separately(world, results):
    first, second = cfg("scrub", epochs=2), cfg("weight_dist_reg", epochs=1)
    res = compose_two_phase(world.pretrained, world.bundle, first, second)
    assert res.method == "scrub+weight_dist_reg"
    assert [p["method"] for p in res.phases] == ["scrub", "weight_dist_reg"]
    assert res.steps == sum(p["steps"] for p in res.phases)
    assert res.distance == pytest.approx(l2_param_distance(res.checkpoint, world.pretrained))


def test_two_phase_starts_from_first_output(world, results):
    res = compose_two_phase(world.pretrained, world.bundle, cfg("noop"), cfg("finetune"))
    assert res.checkpoint.equals(results["finetune"][0].checkpoint)
    both = compose_two_phase(world.pretrained, world.bundle, cfg("noop"), cfg("noop"))
    assert both.checkpoint.equals(world.pretrained)
