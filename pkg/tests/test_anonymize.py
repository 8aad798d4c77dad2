import json
import math

import numpy as np
import pytest

from attrcloak import autodiff as ad
from attrcloak.anonymize import (
    AttackSpec, AttackSpecError, IdentityTerm, NoEligibleSamplesError, PreconditionError,
    attribute_objective, batch_attack, check_constraints, init_perturbation, load_results,
    reparameterize, run_attack, save_results, summarize, total_objective,
)
from attrcloak.data import AttributeSchema, LabeledSample
from attrcloak.models import AttributeNet, EmbeddingNet

from gradcheck import assert_gradients_match, central_difference
from toys import (
    LOGISTIC_IMAGE, logistic_grid_optimum, logistic_net, logistic_sample, objective_and_gradient,
    objective_value, small_instance, table_net,
)


# -- reparameterization -------------------------------------------------------

def test_init_reproduces_image():
    img = np.array([0.0, 0.25, 0.5, 0.9, 1.0]).reshape(1, 5, 1)
    w0 = init_perturbation(img, 1e-6)
    assert np.allclose(reparameterize(img, w0), np.clip(img, 1e-6, 1 - 1e-6), atol=1e-12)


def test_init_at_half_is_minus_half():
    w0 = init_perturbation(np.full((1, 1, 1), 0.5))
    assert w0.item() == pytest.approx(-0.5, abs=1e-15)


def test_reparameterize_zero_is_half():
    assert reparameterize(np.zeros((1, 1, 1)), np.zeros((1, 1, 1))).item() == 0.5


def test_reparameterize_tape_matches_numpy():
    rng = np.random.default_rng(0)
    img, w = rng.uniform(0, 1, (2, 2, 1)), rng.normal(0, 2, (2, 2, 1))
    with ad.Tape() as tape:
        t = reparameterize(img, tape.variable(w))
    assert np.allclose(t.value, reparameterize(img, w), atol=1e-15)


def test_reparameterize_derivative():
    rng = np.random.default_rng(1)
    img, w = rng.uniform(0, 1, (3,)), rng.normal(0, 1, (3,))
    with ad.Tape() as tape:
        wv = tape.variable(w)
        g = tape.backward(ad.total(reparameterize(img, wv)))[wv]
    num = central_difference(lambda v: reparameterize(img, v).sum(), [w])[0]
    assert_gradients_match([g], [num])
    assert np.allclose(g, 0.5 * (1 - np.tanh(img + w) ** 2), atol=1e-12)


@pytest.mark.parametrize("w", [-40.0, -5.0, 0.0, 5.0, 40.0])
def test_box_holds_for_any_w(w):
    t = reparameterize(np.full((1, 1, 1), 0.3), np.full((1, 1, 1), w))
    assert 0.0 <= t.item() <= 1.0


# -- attribute objective --------------------------------------------------------

def test_suppress_confident_true_class():
    assert attribute_objective(np.array([0.9, 0.1]), 0).item() == pytest.approx(0.8)


def test_suppress_already_flipped_clamps_at_minus_c():
    v = attribute_objective(np.array([0.2, 0.8]), 0, confidence=0.1).item()
    assert v == pytest.approx(-0.1)


def test_preserve_three_class():
    v = attribute_objective(np.array([0.3, 0.3, 0.4]), 2, mode="preserve").item()
    assert v == pytest.approx(0.0)


def test_suppress_fixed_target():
    v = attribute_objective(np.array([0.5, 0.3, 0.2]), 0, target=2).item()
    assert v == pytest.approx(0.3)


def test_suppress_target_equal_true_rejected():
    with pytest.raises(ValueError):
        attribute_objective(np.array([0.5, 0.5]), 1, target=1)


def test_objective_class_out_of_range():
    with pytest.raises(ValueError):
        attribute_objective(np.array([0.5, 0.5]), 2)


# -- total objective ------------------------------------------------------------

def test_total_objective_at_identity_point():
    # with T = I the distortion and identity terms vanish
    net = table_net([0.9, 0.1], [0.3, 0.7])
    img = np.full((1, 1, 1), 0.5)
    spec = AttackSpec(suppress={0: None}, preserve={1})
    v = total_objective(img, init_perturbation(img), spec, net, (0, 1)).item()
    # suppress term 0.9 - 0.1, preserve term clamps at -c = 0
    assert v == pytest.approx(0.8)


def test_total_objective_distortion_term():
    net = table_net([0.9, 0.1])
    img = np.full((1, 1, 1), 0.5)
    spec = AttackSpec(suppress={0: None}, distortion_weight=2.0)
    w = np.full((1, 1, 1), 0.5)  # tanh(1)
    t = 0.5 * (math.tanh(1.0) + 1)
    v = total_objective(img, w, spec, net, (0,)).item()
    assert v == pytest.approx(0.8 + 2.0 * (t - 0.5) ** 2, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_total_objective_gradient(seed):
    image, net, spec, labels, w = small_instance(seed)
    _, g = objective_and_gradient(image, net, spec, labels, w)
    num = central_difference(lambda v: objective_value(image, net, spec, labels, v), [w])[0]
    assert_gradients_match([g], [num])


def test_total_objective_logit_space_gradient():
    image, net, spec, labels, w = small_instance(7, identity=False, confidence=0.5)
    spec.score_space = "logit"
    _, g = objective_and_gradient(image, net, spec, labels, w)
    num = central_difference(lambda v: objective_value(image, net, spec, labels, v), [w])[0]
    assert_gradients_match([g], [num])


# -- constraint checks -------------------------------------------------------------

def test_check_constraints_flipped_and_kept():
    net = table_net([0.3, 0.7], [0.1, 0.8, 0.1])
    img = np.zeros((1, 1, 1))
    v = check_constraints(net, img, img, AttackSpec(suppress={0: None}, preserve={1}), (0, 1))
    assert v.feasible and v.suppressed == {0: True} and v.preserved == {1: True}


def test_check_constraints_unflipped():
    net = table_net([0.7, 0.3], [0.1, 0.8, 0.1])
    img = np.zeros((1, 1, 1))
    v = check_constraints(net, img, img, AttackSpec(suppress={0: None}, preserve={1}), (0, 1))
    assert not v.feasible and v.suppressed == {0: False}


def test_check_constraints_broken_preserve():
    net = table_net([0.3, 0.7], [0.5, 0.4, 0.1])
    img = np.zeros((1, 1, 1))
    assert not check_constraints(net, img, img, AttackSpec(suppress={0: None}, preserve={1}), (0, 1)).feasible


def test_check_constraints_margin():
    net = table_net([0.46, 0.54])
    img = np.zeros((1, 1, 1))
    spec = AttackSpec(suppress={0: None}, confidence=0.1)
    assert check_constraints(net, img, img, spec, (0,)).feasible
    assert not check_constraints(net, img, img, spec, (0,), required_margin=0.1).feasible


def test_identity_distance_equal_to_tau_passes():
    shape = (2, 2, 1)
    net = AttributeNet.init(AttributeSchema.of(("a", 2)), shape, hidden=(4,))
    emb = EmbeddingNet.init(shape, 2)
    rng = np.random.default_rng(0)
    img, anon = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
    d = float(np.linalg.norm(emb.embed_numpy(img) - emb.embed_numpy(anon)))
    exact = check_constraints(net, img, anon, AttackSpec(identity=IdentityTerm(emb, tau=d)), (0,))
    below = check_constraints(net, img, anon, AttackSpec(identity=IdentityTerm(emb, tau=np.nextafter(d, 0))), (0,))
    assert exact.identity is True and exact.feasible
    assert below.identity is False and not below.feasible


# -- the attack ---------------------------------------------------------------------

def test_empty_spec_is_fixed_point():
    net = logistic_net()
    res = run_attack(net, logistic_sample(), AttackSpec(iterations=50))
    assert res.success and res.first_feasible == 0
    assert res.distortion < 1e-12
    assert np.allclose(res.T, LOGISTIC_IMAGE, atol=1e-7)


def test_logistic_matches_grid_search():
    best = logistic_grid_optimum()
    res = run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, iterations=500))
    assert res.success
    assert abs(res.distortion - best) <= 0.05 * best
    assert res.attributes[0]["post_class"] == 1


def test_attack_output_in_open_box():
    res = run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, iterations=200))
    assert res.T.min() > 0 and res.T.max() < 1
    assert res.T.dtype == np.float64 and np.array_equal(res.T, res.T.astype(np.float32))


def test_attack_confidence_margin():
    res = run_attack(logistic_net(), logistic_sample(),
                     AttackSpec(suppress={0: None}, confidence=0.2, iterations=500))
    assert res.success and res.attributes[0]["post_margin"] >= 0.2


def test_zero_iterations_reports_failure_for_real_constraint():
    res = run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, iterations=0))
    assert not res.success and res.first_feasible is None


def test_precondition_misclassified():
    sample = LabeledSample("bad", LOGISTIC_IMAGE.astype(np.float32), (1,), 0, "test")
    with pytest.raises(PreconditionError) as err:
        run_attack(logistic_net(), sample, AttackSpec(suppress={0: None}))
    assert err.value.misclassified == ["a"]


def test_overlapping_spec_rejected():
    with pytest.raises(AttackSpecError):
        run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, preserve={0}))


def test_target_equal_true_rejected():
    with pytest.raises(AttackSpecError):
        run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: 0}))


# -- batches ------------------------------------------------------------------------

def _batch_samples():
    return [LabeledSample(f"s{i}", np.array([0.5 + 0.05 * i, 0.4]).reshape(1, 2, 1).astype(np.float32),
                          (0,), 0, "test") for i in range(4)]


def test_batch_no_eligible():
    bad = [LabeledSample("x", LOGISTIC_IMAGE.astype(np.float32), (1,), 0, "test")]
    with pytest.raises(NoEligibleSamplesError):
        batch_attack(bad, AttackSpec(suppress={0: None}, iterations=5), logistic_net())


def test_batch_empty():
    with pytest.raises(NoEligibleSamplesError):
        batch_attack([], AttackSpec(suppress={0: None}), logistic_net())


def test_batch_filters_and_is_deterministic():
    samples = _batch_samples() + [LabeledSample("bad", LOGISTIC_IMAGE.astype(np.float32), (1,), 0, "test")]
    spec = AttackSpec(suppress={0: None}, iterations=60)
    a = batch_attack(samples, spec, logistic_net())
    b = batch_attack(samples, spec, logistic_net())
    assert a.summary["eligible"] == 4 and a.summary["filtered_out"] == 1
    for x, y in zip(a.results, b.results):
        assert np.array_equal(x.T, y.T) and np.array_equal(x.w, y.w)


def test_batch_parallel_matches_serial():
    spec = AttackSpec(suppress={0: None}, iterations=40)
    a = batch_attack(_batch_samples(), spec, logistic_net(), jobs=1)
    b = batch_attack(_batch_samples(), spec, logistic_net(), jobs=2)
    assert [r.sample_id for r in a.results] == [r.sample_id for r in b.results]
    assert all(np.array_equal(x.T, y.T) for x, y in zip(a.results, b.results))


def test_success_rate_is_mean_of_flags():
    spec = AttackSpec(suppress={0: None}, iterations=30)
    results = batch_attack(_batch_samples(), spec, logistic_net()).results
    results[1].success = False
    s = summarize(results, spec, logistic_net().schema)
    assert s["success_rate"] == pytest.approx(np.mean([r.success for r in results]))
    assert s["successes"] == sum(r.success for r in results)


def test_results_round_trip(tmp_path):
    batch = batch_attack(_batch_samples(), AttackSpec(suppress={0: None}, iterations=30), logistic_net())
    save_results(batch, tmp_path)
    doc, images = load_results(tmp_path)
    assert [s["id"] for s in doc["samples"]] == [r.sample_id for r in batch.results]
    for r in batch.results:
        assert np.array_equal(images[r.sample_id], r.T)
    json.dumps(doc)
