import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from mesasfl.attacks import (
    AdaptionLoss,
    AdaptiveSpec,
    AttackSpec,
    BenignProbe,
    adaptive_train,
    apply_post_steps,
    clip_outliers_to_benign,
    fixate_layers,
    make_probe,
    metric_value_and_grad,
    noise_model,
    scale_to_max,
    scale_update_to_benign,
    sign_flip,
    truncated_jitter,
)
from mesasfl.data import PoisonSpec, gen_synthetic, poison_dataset
from mesasfl.mesas import WHOLE, compute_metric_set
from mesasfl.model import LayeredModel, MlpArchitecture, SchemaError, TrainHyperparams, train_local


def vec(values):
    return LayeredModel([("w", np.asarray(values, dtype=float))])


# -- post-hoc steps ------------------------------------------------------------

def test_sign_flip_examples(rng):
    assert sign_flip(vec([1.5, -2.0])) == vec([-1.5, 2.0])
    m = random_model(rng)
    assert sign_flip(sign_flip(m)) == m
    assert sign_flip(m).norm() == m.norm()


def test_noise_model(rng):
    m = vec(rng.normal(size=100_000))
    assert noise_model(m, 0.0, seed=1) == m
    out = noise_model(m, 0.2, seed=1)
    assert np.std((out - m).flatten()) == pytest.approx(0.2, rel=0.05)
    assert out == noise_model(m, 0.2, seed=1)
    assert out != noise_model(m, 0.2, seed=2)
    with pytest.raises(ValueError):
        noise_model(m, -0.1, seed=0)


def test_scale_examples():
    g = vec([0.0, 0.0])
    assert scale_update_to_benign(vec([3.0, 4.0]), g, 10.0, jitter_fraction=0.0) == vec([6.0, 8.0])
    same = scale_update_to_benign(vec([3.0, 4.0]), g, 5.0, jitter_fraction=0.0)
    np.testing.assert_allclose(same.flatten(), [3.0, 4.0], rtol=1e-15)
    with pytest.raises(ValueError):
        scale_update_to_benign(g, g, 1.0)
    with pytest.raises(ValueError):
        scale_update_to_benign(vec([1.0, 0.0]), g, 0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_scale_hits_target_and_keeps_direction(seed, target):
    rng = np.random.default_rng(seed)
    g = random_model(rng)
    local = g + g.unflatten(rng.normal(size=g.flat_len))
    out = scale_update_to_benign(local, g, target, jitter_fraction=0.0)
    u, v = (local - g).flatten(), (out - g).flatten()
    assert np.linalg.norm(v) == pytest.approx(target, rel=1e-9)
    assert u @ v / (np.linalg.norm(u) * np.linalg.norm(v)) == pytest.approx(1.0, abs=1e-12)


def test_jitter_stays_within_bound():
    rng = np.random.default_rng(0)
    draws = [truncated_jitter(rng, 0.03) for _ in range(2000)]
    assert max(abs(d) for d in draws) <= 0.03
    assert np.std(draws) > 0.005
    assert truncated_jitter(rng, 0.0) == 0.0


def test_fixate(rng):
    trained, donor = random_model(rng), random_model(rng)
    assert fixate_layers(trained, donor, trained.names) == donor
    assert fixate_layers(trained, donor, []) == trained
    once = fixate_layers(trained, donor, ["W2", "b2"])
    assert fixate_layers(once, donor, ["W2", "b2"]) == once
    with pytest.raises(SchemaError):
        fixate_layers(trained, donor, ["W9"])


def test_fixated_last_layer_metrics_follow_donor(rng):
    g, trained, donor = random_model(rng), random_model(rng), random_model(rng)
    out = fixate_layers(trained, donor, ["W2", "b2"])
    got, from_donor, from_trained = (compute_metric_set(m, g) for m in (out, donor, trained))
    for scope in ("W2", "b2"):
        assert got[scope] == from_donor[scope]
    for scope in ("W1", "b1"):
        assert got[scope] == from_trained[scope]


def test_clip_outliers():
    g = vec([0.0, 0.0, 0.0, 0.0])
    inside = vec([0.5, -0.5, 0.0, 1.0])
    assert clip_outliers_to_benign(inside, g, 0.1, 1.0) == inside
    assert clip_outliers_to_benign(vec([100.0, -0.01, 0.0, 0.3]), g, 0.1, 1.0) == vec([1.0, -0.1, 0.0, 0.3])
    with pytest.raises(ValueError):
        clip_outliers_to_benign(inside, g, 0.0, 1.0)
    with pytest.raises(ValueError):
        clip_outliers_to_benign(inside, g, 2.0, 1.0)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_clip_outliers_bounds_min_max_metrics(seed):
    rng = np.random.default_rng(seed)
    g = random_model(rng)
    m = g + g.unflatten(rng.normal(scale=rng.uniform(0.01, 5), size=g.flat_len))
    lo, hi = sorted(rng.uniform(0.05, 2, size=2))
    whole = compute_metric_set(clip_outliers_to_benign(m, g, lo, hi), g)[WHOLE]
    assert whole["max_abs"] <= hi * (1 + 1e-12)
    assert whole["min_nz"] >= lo * (1 - 1e-12)


# -- adaptive training ------------------------------------------------------------

def test_scale_to_max_example():
    np.testing.assert_allclose(scale_to_max([10.0, 1.0, 0.0001]), [1.0, 10.0, 100000.0], rtol=1e-12)
    assert scale_to_max([0.0, 2.0]).tolist() == [1.0, 1.0]


def test_spec_validation():
    with pytest.raises(ValueError):
        AdaptiveSpec(objectives=("COUNT",))
    with pytest.raises(ValueError):
        AdaptiveSpec(objectives=())
    with pytest.raises(ValueError):
        AdaptiveSpec(alpha=0.0)
    with pytest.raises(ValueError):
        AdaptiveSpec(targets={"EUCL": float("nan")})
    with pytest.raises(ValueError):
        AttackSpec(adaptive=AdaptiveSpec(objectives=("MIN",)))
    with pytest.raises(ValueError):
        AttackSpec(post=[{"op": "explode"}])


@pytest.mark.parametrize("objective", ["EUCL", "COS", "VAR"])
def test_metric_gradients_match_finite_differences(objective):
    rng = np.random.default_rng(3)
    glob = rng.normal(size=30)
    params = glob + rng.normal(scale=0.5, size=30)
    _, grad = metric_value_and_grad(objective, params, glob)
    h = 1e-6
    for i in range(30):
        e = np.zeros(30)
        e[i] = h
        fd = (metric_value_and_grad(objective, params + e, glob)[0]
              - metric_value_and_grad(objective, params - e, glob)[0]) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_metric_values_agree_with_detector(rng):
    g = random_model(rng)
    m = random_model(rng)
    whole = compute_metric_set(m, g)[WHOLE]
    assert metric_value_and_grad("EUCL", m.flatten(), g.flatten())[0] == pytest.approx(whole["eucl"], rel=1e-12)
    assert metric_value_and_grad("COS", m.flatten(), g.flatten())[0] == pytest.approx(whole["cos"], rel=1e-12)
    assert metric_value_and_grad("VAR", m.flatten(), g.flatten())[0] == pytest.approx(whole["var"], rel=1e-12)


def test_lambdas_frozen_from_first_batch(rng):
    g = random_model(rng)
    loss = AdaptionLoss(AdaptiveSpec(0.5, ("EUCL",), {"EUCL": 0.0}), g)
    params = g.flatten() + 1.0
    loss(params, 2.0, np.zeros_like(params))
    first = loss.lambdas.copy()
    eucl = np.linalg.norm(np.ones_like(params))
    np.testing.assert_allclose(first, [max(2.0, eucl) / eucl])
    loss(params * 3, 50.0, np.zeros_like(params))
    assert np.array_equal(loss.lambdas, first)
    with pytest.raises(ValueError):
        AdaptionLoss(AdaptiveSpec(0.5, ("COS",), {}), g)


@pytest.fixture(scope="module")
def setting():
    arch = MlpArchitecture(8, (12,), 4)
    data = gen_synthetic(4, 8, 60, 1.0, rng_seed=5)
    clean, rest = data.subset(np.arange(0, 240, 2)), data.subset(np.arange(1, 240, 2))
    g = train_local(arch.init(0), rest, TrainHyperparams(epochs=2, rng_seed=1))
    poisoned = poison_dataset(clean, PoisonSpec("pixel_trigger", pdr=0.5, target_label=0), rng_seed=2)
    return g, clean, poisoned, TrainHyperparams(epochs=2, batch_size=16, rng_seed=7)


def test_alpha_one_is_plain_training(setting):
    g, _, poisoned, hp = setting
    spec = AdaptiveSpec(1.0, ("EUCL",), {"EUCL": 0.1})
    assert adaptive_train(g, poisoned, hp, spec, global_model=g) == train_local(g, poisoned, hp)


def test_eucl_adaption_moves_toward_target(setting):
    g, clean, poisoned, hp = setting
    probe = make_probe(g, clean, hp)
    plain = compute_metric_set(train_local(g, poisoned, hp), g)[WHOLE]["eucl"]
    for target in (probe.metrics["EUCL"], probe.metrics["EUCL"] * 0.5):
        spec = AdaptiveSpec(0.3, ("EUCL",), {"EUCL": target})
        adapted = compute_metric_set(adaptive_train(g, poisoned, hp, spec, probe, g), g)[WHOLE]["eucl"]
        assert abs(adapted - target) < abs(plain - target)


def test_probe_metrics(setting):
    g, clean, _, hp = setting
    probe = make_probe(g, clean, hp)
    assert probe.benign_model == train_local(g, clean, hp)
    assert set(probe.metrics) == {"EUCL", "COS", "VAR", "MIN", "MAX"}
    spec = AdaptiveSpec(0.5, ("EUCL", "COS"), {"COS": 0.25}).with_probe_targets(probe)
    assert spec.targets["COS"] == 0.25 and spec.targets["EUCL"] == probe.metrics["EUCL"]


def test_post_steps_apply_in_order(rng):
    g = random_model(rng)
    local = g + g.unflatten(rng.normal(size=g.flat_len))
    probe = BenignProbe(random_model(rng), {"EUCL": 2.0, "MIN": 0.01, "MAX": 0.5})
    flip_then_scale = apply_post_steps(local, g, [{"op": "sign_flip"},
                                                  {"op": "scale_to_benign_eucl", "jitter": 0.0}], probe, 0)
    scale_then_flip = apply_post_steps(local, g, [{"op": "scale_to_benign_eucl", "jitter": 0.0},
                                                  {"op": "sign_flip"}], probe, 0)
    assert (flip_then_scale - g).norm() == pytest.approx(2.0, rel=1e-9)
    assert compute_metric_set(flip_then_scale, g) != compute_metric_set(scale_then_flip, g)
    staged = sign_flip(local)
    assert compute_metric_set(staged, g) != compute_metric_set(flip_then_scale, g)
    clipped = apply_post_steps(local, g, [{"op": "clip_to_benign"}], probe, 0)
    assert compute_metric_set(clipped, g)[WHOLE]["max_abs"] <= 0.5 * (1 + 1e-12)
    fixed = apply_post_steps(local, g, [{"op": "fixate", "layers": ["b2"]}], probe, 0)
    assert np.array_equal(fixed.layer("b2"), probe.benign_model.layer("b2"))


def test_needs_probe():
    assert not AttackSpec(post=[{"op": "sign_flip"}]).needs_probe
    assert AttackSpec(post=[{"op": "fixate"}]).needs_probe
    assert AttackSpec(adaptive=AdaptiveSpec()).needs_probe
