import json

import numpy as np
import pytest
import torch

from objadv.arrayio import read_array
from objadv.attacks import AttackMethod, AttackSpec, attack_batch, fgsm, perturb, pgd, project
from objadv.datagen import GroundTruthSet, SceneSpec, generate_scene
from objadv.detector import DetectorModel, assign_targets, forward
from objadv.losses import LossSelector, input_gradient, selected_loss


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(LossSelector.OBJ, AttackMethod.FGSM, 4.0, 1.0, 1)
    with pytest.raises(ValueError):
        AttackSpec(LossSelector.OBJ, AttackMethod.FGSM, 4.0, 4.0, 2)
    with pytest.raises(ValueError):
        AttackSpec.pgd(LossSelector.OBJ, 300.0)
    with pytest.raises(ValueError):
        AttackSpec.pgd(LossSelector.OBJ, -1.0)
    with pytest.raises(ValueError):
        AttackSpec.pgd(LossSelector.OBJ, 4.0, step_size=0.0)
    spec = AttackSpec.pgd("loc", 4)
    assert spec.selector is LossSelector.LOC and spec.iterations == 10 and spec.step_size == 1.0
    assert not spec.random_init


def test_project_identity_and_clamp():
    x = np.full((4, 4, 3), 100.0)
    np.testing.assert_array_equal(project(x, x, 4), x)
    y = x.copy()
    y[1, 2, 0] += 10
    out = project(y, x, 4)
    assert out[1, 2, 0] == 104.0
    out[1, 2, 0] = 100.0
    np.testing.assert_array_equal(out, x)


def test_project_sweep_and_idempotence(rng):
    x = rng.uniform(0, 255, size=(16, 16, 3))
    for _ in range(20):
        x_adv = x + rng.normal(0, 20, size=x.shape)
        p = project(x_adv, x, 6)
        assert np.abs(p - x).max() <= 6 + 1e-12
        assert p.min() >= 0 and p.max() <= 255
        np.testing.assert_array_equal(project(p, x, 6), p)
    t = torch.as_tensor(x_adv)
    np.testing.assert_array_equal(project(t, torch.as_tensor(x), 6).numpy(), project(x_adv, x, 6))


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        project(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 1)


def test_epsilon_zero_returns_clean(trained_model, tiny_test):
    image, gt = tiny_test[0]
    for spec in (AttackSpec.fgsm("total", 0.0), AttackSpec.pgd("obj", 0.0, iterations=3)):
        adv = (fgsm if spec.method is AttackMethod.FGSM else pgd)(trained_model, image, gt, spec)
        np.testing.assert_array_equal(adv.image, image.astype(np.float64))
        assert adv.linf == 0.0


@pytest.mark.parametrize("selector", list(LossSelector))
def test_fgsm_sign_oracle(trained_model, tiny_test, selector):
    image, gt = tiny_test[2]
    grad, _ = input_gradient(trained_model, image, gt, selector)
    adv = fgsm(trained_model, image, gt, AttackSpec.fgsm(selector, 4.0))
    x = image.astype(np.float64)
    expected = np.clip(x + 4.0 * np.sign(grad), 0, 255)
    np.testing.assert_array_equal(adv.image, expected)
    moved = (grad != 0) & (x >= 4) & (x <= 251)
    assert moved.any()
    np.testing.assert_array_equal(np.abs(adv.image - x)[moved], 4.0)
    np.testing.assert_array_equal(adv.image[grad == 0], x[grad == 0])


def test_fgsm_equals_single_step_pgd(trained_model, tiny_test):
    for i in range(5):
        image, gt = tiny_test[i]
        for sel in LossSelector:
            a = fgsm(trained_model, image, gt, AttackSpec.fgsm(sel, 4.0)).image
            b = pgd(trained_model, image, gt, AttackSpec.pgd(sel, 4.0, step_size=4.0, iterations=1)).image
            np.testing.assert_array_equal(a, b)


def test_method_mismatch_rejected(trained_model, tiny_test):
    image, gt = tiny_test[0]
    with pytest.raises(ValueError):
        fgsm(trained_model, image, gt, AttackSpec.pgd("obj", 4))
    with pytest.raises(ValueError):
        pgd(trained_model, image, gt, AttackSpec.fgsm("obj", 4))


def test_pgd_constraint_and_ascent(trained_model, tiny_test):
    ascended = 0
    for i in range(len(tiny_test)):
        image, gt = tiny_test[i]
        for sel in LossSelector:
            spec = AttackSpec.pgd(sel, 4.0)
            adv = pgd(trained_model, image, gt, spec)
            assert adv.linf <= 4.0 + 1e-6
            assert adv.image.min() >= 0 and adv.image.max() <= 255
        with torch.no_grad():
            raw = forward(trained_model.params, image, trained_model.config)
            clean_loss = float(selected_loss(raw, assign_targets(gt, trained_model.config), trained_model.config, "total"))
        ascended += pgd(trained_model, image, gt, AttackSpec.pgd("total", 4.0)).loss >= clean_loss
    assert ascended >= 0.9 * len(tiny_test)


def test_pgd_beats_fgsm_loss(trained_model, tiny_test):
    wins = 0
    for i in range(len(tiny_test)):
        image, gt = tiny_test[i]
        wins += pgd(trained_model, image, gt, AttackSpec.pgd("obj", 4.0)).loss >= \
            fgsm(trained_model, image, gt, AttackSpec.fgsm("obj", 4.0)).loss
    assert wins >= 0.9 * len(tiny_test)


def test_random_init_is_seeded_per_image(trained_model, tiny_test):
    image, gt = tiny_test[3]
    spec = AttackSpec.fgsm("obj", 4.0, random_init=True, seed=10)
    a = fgsm(trained_model, image, gt, spec, source_id=3).image
    b = fgsm(trained_model, image, gt, spec, source_id=3).image
    c = fgsm(trained_model, image, gt, spec, source_id=4).image
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # the batch path gives each image the same noise regardless of batching
    images = torch.as_tensor(np.stack([tiny_test[i][0] for i in range(4)]), dtype=torch.float64)
    asg = [assign_targets(tiny_test[i][1], trained_model.config) for i in range(4)]
    batch, _ = perturb(trained_model, images, asg, spec, [0, 1, 2, 3])
    np.testing.assert_array_equal(batch[3].numpy(), a)


@pytest.mark.parametrize("selector", [LossSelector.LOC, LossSelector.CLS])
def test_degenerate_empty_scene(trained_model, selector):
    image, _ = generate_scene(SceneSpec(min_objects=0, max_objects=0), 3)
    adv = pgd(trained_model, image, GroundTruthSet(), AttackSpec.pgd(selector, 4.0))
    assert adv.degenerate
    np.testing.assert_array_equal(adv.image, image.astype(np.float64))
    adv = pgd(trained_model, image, GroundTruthSet(), AttackSpec.pgd(LossSelector.OBJ, 4.0))
    assert not adv.degenerate and adv.linf > 0


def test_selector_isolation(trained_model, tiny_test):
    image, gt = tiny_test[4]
    cfg = trained_model.config
    params = {k: v.clone() for k, v in trained_model.params.items()}
    rows = [a * cfg.outputs_per_anchor + 5 + c for a in range(cfg.num_anchors) for c in range(cfg.num_classes)]
    params["head.weight"][rows] += torch.randn(len(rows), *params["head.weight"].shape[1:], dtype=torch.float64)
    params["head.bias"][rows] -= 3.0
    other = DetectorModel(cfg, params)
    spec = AttackSpec.pgd("obj", 4.0)
    a = pgd(trained_model, image, gt, spec).image
    b = pgd(other, image, gt, spec).image
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(pgd(trained_model, image, gt, AttackSpec.pgd("cls", 4.0)).image,
                              pgd(other, image, gt, AttackSpec.pgd("cls", 4.0)).image)


def test_attack_batch_limit_zero(trained_model, tiny_test):
    results, summary = attack_batch(trained_model, tiny_test, AttackSpec.fgsm("obj", 4), limit=0)
    assert results == [] and summary["count"] == 0


def test_attack_batch_matches_single(trained_model, tiny_test):
    spec = AttackSpec.pgd("total", 4, iterations=3)
    results, _ = attack_batch(trained_model, tiny_test, spec, limit=5, batch_size=2)
    assert [r.source_id for r in results] == list(range(5))
    for r in results:
        image, gt = tiny_test[r.source_id]
        single = pgd(trained_model, image, gt, spec, r.source_id)
        np.testing.assert_allclose(r.image, single.image, atol=1e-9)


def test_attack_batch_grid_and_persistence(trained_model, tiny_test, tmp_path):
    for eps in (2, 4, 6, 8):
        results, summary = attack_batch(trained_model, tiny_test, AttackSpec.fgsm("obj", eps), limit=6,
                                        out_dir=tmp_path / f"eps{eps}")
        assert summary["mean_linf"] <= eps and summary["max_linf"] <= eps + 1e-6
        stored = json.loads((tmp_path / f"eps{eps}" / "summary.json").read_text())
        assert stored == summary
        arr = read_array(tmp_path / f"eps{eps}" / "adv_000002.f32")
        np.testing.assert_allclose(arr, results[2].image.astype(np.float32))
    again, summary2 = attack_batch(trained_model, tiny_test, AttackSpec.fgsm("obj", 8), limit=6)
    assert summary2 == summary


def test_attack_batch_counts_degenerate(trained_model):
    from objadv.datagen import make_dataset

    empty = make_dataset(SceneSpec(min_objects=0, max_objects=0), 3, seed=0)
    _, summary = attack_batch(trained_model, empty, AttackSpec.fgsm("cls", 4))
    assert summary["degenerate"] == 3
