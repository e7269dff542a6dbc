import numpy as np
import pytest

from mtlattack import autodiff as ad
from mtlattack.attacks import (
    CURVE_FIELDS,
    NEAR_THRESHOLD,
    AttackConfig,
    ESConfig,
    ForwardOracle,
    attack_loss,
    es_recombine,
    es_step,
    load_curve,
    make_target,
    make_untargeted_reference,
    nes_ascend,
    render_perturbation,
    run_attack,
    save_result,
    whitebox_step,
)
from mtlattack.scenegen import MOTION_DYNAMIC, MOTION_STATIC, ROAD, VEHICLE, VOID


def _quick_cfg(**kw):
    kw.setdefault("steps", 3)
    return AttackConfig(**kw)


# -- config validation -----------------------------------------------------


def test_attack_config_validation():
    AttackConfig().validate()
    with pytest.raises(ValueError):
        AttackConfig(task="pose").validate()
    with pytest.raises(ValueError):
        AttackConfig(steps=0).validate()
    with pytest.raises(ValueError):
        AttackConfig(es=ESConfig(lr=0.01)).validate()
    with pytest.raises(ValueError):
        AttackConfig(es=ESConfig(lr=0.00005)).validate()


def test_attack_config_labels():
    assert AttackConfig(task="segmentation", mode="whitebox", objective="untargeted").label() == "segmentation_wb_untarget"
    assert AttackConfig(task="distance", mode="blackbox", objective="targeted").label() == "distance_bb_target"


# -- target construction ---------------------------------------------------


def test_untargeted_reference_is_clean_prediction(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    ref = make_untargeted_reference(clean, "distance")
    np.testing.assert_array_equal(ref.distance_map, clean.distance.data)
    ref = make_untargeted_reference(clean, "segmentation")
    np.testing.assert_array_equal(ref.labels, clean.segmentation.data.argmax(axis=0))
    ref = make_untargeted_reference(clean, "detection")
    np.testing.assert_array_equal(ref.objectness, clean.detection.data[0])


def test_targeted_distance_near_pixels_sent_far(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    rng = np.random.default_rng(0)
    ref = make_target(clean, _quick_cfg(task="distance", objective="targeted"), rng)
    near = clean.distance.data < NEAR_THRESHOLD
    assert np.all(ref.distance_map[near] == 1.0)
    np.testing.assert_array_equal(ref.distance_map[~near], clean.distance.data[~near])


def test_targeted_segmentation_erases_one_class(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    labels = clean.segmentation.data.argmax(axis=0)
    rng = np.random.default_rng(1)
    ref = make_target(clean, _quick_cfg(task="segmentation", objective="targeted"), rng)
    erased = (labels != ref.labels)
    assert np.all(np.isin(labels[erased], [VEHICLE, ROAD]))
    assert np.all(ref.labels[erased] == VOID)


def test_targeted_motion_all_static(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    rng = np.random.default_rng(2)
    ref = make_target(clean, _quick_cfg(task="motion", objective="targeted"), rng)
    assert not np.any(ref.labels == MOTION_DYNAMIC)


def test_targeted_detection_objectness_binary(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    rng = np.random.default_rng(3)
    ref = make_target(clean, _quick_cfg(task="detection", objective="targeted"), rng)
    assert set(np.unique(ref.objectness)) <= {0.0, 1.0}


# -- attack loss -----------------------------------------------------------


def test_attack_loss_zero_at_clean_reference_distance(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    ref = make_untargeted_reference(clean, "distance")
    with ad.no_grad():
        j = attack_loss(clean, ref)
    assert j.item() == pytest.approx(0.0, abs=1e-12)


def test_attack_loss_task_mismatch_raises(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    ref = make_untargeted_reference(clean, "distance")
    with pytest.raises(ValueError):
        attack_loss(clean, ref, task="motion")


# -- white-box step --------------------------------------------------------


def test_whitebox_step_moves_by_alpha_sign(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    ref = make_untargeted_reference(clean, "segmentation")
    cfg = _quick_cfg(task="segmentation")
    x1, j, _ = whitebox_step(s.frame_curr, s.frame_prev, quick_model, ref, cfg)
    delta = x1 - s.frame_curr
    assert np.isfinite(j)
    assert delta.shape == s.frame_curr.shape
    assert np.abs(delta).max() > 0  # gradient is nonzero for CE at argmax labels
    assert x1.min() >= 0.0 and x1.max() <= 1.0


def test_whitebox_step_respects_linf_budget(quick_model, small_dataset):
    s = small_dataset.test[0]
    clean = quick_model.predict(s.frame_prev, s.frame_curr)
    ref = make_untargeted_reference(clean, "segmentation")
    cfg = _quick_cfg(task="segmentation", alpha=10.0, linf_budget=0.001)
    x1, _, _ = whitebox_step(s.frame_curr, s.frame_prev, quick_model, ref, cfg, s.frame_curr)
    assert np.abs(x1 - s.frame_curr).max() <= 0.001 + 1e-7


def test_whitebox_does_not_touch_weights(quick_model, small_dataset):
    s = small_dataset.test[0]
    before = {k: v.data.copy() for k, v in quick_model.weights_.items()}
    run_attack(s, quick_model, _quick_cfg(task="distance", steps=2))
    for k, v in quick_model.weights_.items():
        np.testing.assert_array_equal(v.data, before[k])


# -- ES recombination ------------------------------------------------------


def test_es_recombine_softmax_saturates_to_best():
    # the temperature is std(f); with many equal losers and one winner the
    # winner's margin is many standard deviations and its weight approaches 1
    rng = np.random.default_rng(0)
    image = np.full((3, 4, 4), 0.5, dtype=np.float32)
    n = 101
    eps = rng.normal(0, 0.05, size=(n,) + image.shape).astype(np.float32)
    candidates = np.clip(image[None] + eps, 0, 1)
    fitness = np.zeros(n)
    fitness[40] = 1.0
    out = es_recombine(image, candidates, fitness, eps, ESConfig())
    assert np.abs(out - candidates[40]).max() < 5e-3
    # and strictly closer to the winner than the uniform average is
    uniform = candidates.mean(axis=0)
    assert np.linalg.norm(out - candidates[40]) < np.linalg.norm(uniform - candidates[40])


def test_es_recombine_equal_fitness_averages():
    image = np.full((3, 2, 2), 0.5, dtype=np.float32)
    eps = np.stack([np.full(image.shape, 0.1), np.full(image.shape, -0.1)]).astype(np.float32)
    candidates = image[None] + eps
    out = es_recombine(image, candidates, np.array([1.0, 1.0]), eps, ESConfig())
    np.testing.assert_allclose(out, image, atol=1e-6)


def test_es_recombine_nes_mode_steps_along_weighted_noise():
    image = np.full((3, 2, 2), 0.5, dtype=np.float32)
    eps = np.stack([np.full(image.shape, 0.1), np.full(image.shape, -0.1)]).astype(np.float32)
    candidates = image[None] + eps
    es = ESConfig(nes_mode=True, lr=0.001)
    fitness = np.array([2.0, 0.0])  # standardized: [+1, -1]
    out = es_recombine(image, candidates, fitness, eps, es)
    np.testing.assert_allclose(
        out - image, 0.001 * (0.1 + 0.1) * np.ones(image.shape), rtol=0, atol=1e-6
    )


def test_es_step_counts_population_queries(quick_model, small_dataset):
    s = small_dataset.test[0]
    oracle = ForwardOracle(quick_model)
    clean = oracle.predict(s.frame_prev, s.frame_curr)
    assert oracle.calls == 1
    ref = make_untargeted_reference(clean, "segmentation")
    cfg = _quick_cfg(task="segmentation", mode="blackbox")
    rng = np.random.default_rng(0)
    es_step(s.frame_curr, s.frame_prev, oracle, ref, cfg, rng)
    assert oracle.calls == 1 + cfg.es.population


def test_oracle_outputs_carry_no_gradients(quick_model, small_dataset):
    s = small_dataset.test[0]
    oracle = ForwardOracle(quick_model)
    out = oracle.predict(s.frame_prev, s.frame_curr)
    for t in (out.distance, out.segmentation, out.motion, out.detection):
        assert not t.on_graph
        assert t.grad is None
    # frozen weights never expose gradient storage either
    for w in oracle._frozen.values():
        assert not w.requires_grad and w.grad is None


# -- NES sanity on a quadratic bowl ----------------------------------------


def test_nes_ascend_on_negative_quadratic():
    rng = np.random.default_rng(0)
    c = rng.uniform(0.4, 0.6, size=100)
    u = rng.standard_normal(100)
    x0 = c + 0.1 * u / np.linalg.norm(u)
    start = np.linalg.norm(x0 - c)
    x = nes_ascend(lambda v: -np.sum((v - c) ** 2), x0, steps=200, lr=0.001,
                   sigma=0.05, population=25, rng=rng, antithetic=True)
    assert np.linalg.norm(x - c) <= 0.1 * start


def test_nes_ascend_plain_mode_improves():
    rng = np.random.default_rng(1)
    c = rng.uniform(0.4, 0.6, size=100)
    u = rng.standard_normal(100)
    x0 = c + 0.1 * u / np.linalg.norm(u)
    x = nes_ascend(lambda v: -np.sum((v - c) ** 2), x0, steps=200, lr=0.001,
                   sigma=0.05, population=25, rng=rng)
    assert np.linalg.norm(x - c) < 0.8 * np.linalg.norm(x0 - c)


def test_nes_ascend_respects_bounds():
    rng = np.random.default_rng(2)
    c = np.full(100, 2.0)  # optimum outside the box
    x0 = np.full(100, 0.9)
    x = nes_ascend(lambda v: -np.sum((v - c) ** 2), x0, steps=50, lr=0.001,
                   sigma=0.05, population=25, rng=rng, bounds=(0.0, 1.0))
    assert x.min() >= 0.0 and x.max() <= 1.0


# -- full attack loop ------------------------------------------------------


def test_run_attack_step0_equals_clean(quick_model, small_dataset):
    s = small_dataset.test[0]
    from mtlattack.metrics import evaluate_model
    clean = evaluate_model(quick_model, s)
    result = run_attack(s, quick_model, _quick_cfg(task="segmentation", steps=2))
    row0 = result.curve[0]
    assert row0["step"] == 0
    assert row0["distance_rmse"] == 0.0
    assert row0["seg_miou"] == pytest.approx(clean.seg_miou)
    assert row0["motion_miou"] == pytest.approx(clean.motion_miou)
    assert row0["det_map"] == pytest.approx(clean.det_map)
    assert result.pert_l2[0] == 0.0


def test_run_attack_curve_length_and_fields(quick_model, small_dataset):
    s = small_dataset.test[0]
    result = run_attack(s, quick_model, _quick_cfg(task="motion", steps=4))
    assert len(result.curve) == 5
    assert all(set(row) == set(CURVE_FIELDS) for row in result.curve)
    assert [row["step"] for row in result.curve] == list(range(5))
    assert len(result.pert_l2) == 5


def test_run_attack_deterministic(quick_model, small_dataset):
    s = small_dataset.test[0]
    cfg = dict(task="detection", mode="blackbox", objective="targeted", steps=2, seed=42)
    a = run_attack(s, quick_model, _quick_cfg(**cfg))
    b = run_attack(s, quick_model, _quick_cfg(**cfg))
    np.testing.assert_array_equal(a.adv_image, b.adv_image)
    assert a.curve == b.curve


def test_run_attack_perturbation_consistency(quick_model, small_dataset):
    s = small_dataset.test[0]
    result = run_attack(s, quick_model, _quick_cfg(task="distance", steps=2))
    np.testing.assert_allclose(
        result.adv_image, s.frame_curr + result.perturbation, atol=1e-6
    )


def test_render_perturbation_bounds(quick_model, small_dataset):
    s = small_dataset.test[0]
    result = run_attack(s, quick_model, _quick_cfg(task="distance", steps=1))
    img = render_perturbation(result)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert img.shape == s.frame_curr.shape


def test_save_result_roundtrip(tmp_path, quick_model, small_dataset):
    s = small_dataset.test[0]
    result = run_attack(s, quick_model, _quick_cfg(task="segmentation", steps=2))
    save_result(result, tmp_path, "sample_0000")
    data = np.load(tmp_path / "sample_0000.npz")
    np.testing.assert_array_equal(data["adv_image"], result.adv_image)
    np.testing.assert_array_equal(data["pert_l2"], result.pert_l2)
    rows = load_curve(tmp_path / "sample_0000_curve.csv")
    assert len(rows) == len(result.curve)
    for saved, orig in zip(rows, result.curve):
        assert saved["step"] == orig["step"]
        assert saved["attack_loss"] == pytest.approx(orig["attack_loss"], rel=1e-9)
