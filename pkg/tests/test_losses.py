import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from objadv.boxes import box_iou
from objadv.datagen import GroundTruth, GroundTruthSet, SceneSpec, generate_scene
from objadv.detector import assign_targets, decode_boxes
from objadv.losses import (
    LossSelector,
    ciou_loss,
    classification_loss,
    input_gradient,
    iou,
    localization_loss,
    objectness_loss,
    total_loss,
)
from oracles import finite_difference_error


def test_iou_basic():
    assert iou((10, 10, 10, 10), (10, 10, 10, 10)) == 1.0
    assert iou((10, 10, 4, 4), (50, 50, 4, 4)) == 0.0
    # intersection 5x10 = 50, union 100 + 100 - 50 = 150
    assert iou((10, 10, 10, 10), (15, 10, 10, 10)) == pytest.approx(1 / 3, abs=1e-12)


def test_ciou_identical_is_zero():
    assert ciou_loss((30, 40, 12, 7), (30, 40, 12, 7)) == 0.0


def test_ciou_disjoint_same_shape():
    # same shape, centres 10 apart, no overlap: enclosing box spans x 8..22 and y 8..12
    c2 = 14**2 + 4**2
    assert ciou_loss((10, 10, 4, 4), (20, 10, 4, 4)) == pytest.approx(1 + 100 / c2, abs=1e-12)


def test_ciou_aspect_term():
    pred, gt = (50, 50, 20, 10), (50, 50, 10, 20)
    v = (4 / math.pi**2) * (math.atan(0.5) - math.atan(2.0)) ** 2
    overlap = 100 / 300
    alpha = v / ((1 - overlap) + v)
    assert ciou_loss(pred, gt) == pytest.approx(1 - overlap + alpha * v, abs=1e-12)


def test_ciou_rejects_degenerate():
    with pytest.raises(ValueError):
        ciou_loss((10, 10, 0, 5), (10, 10, 4, 4))


box_st = st.tuples(
    st.floats(5, 91), st.floats(5, 91), st.floats(1, 40), st.floats(1, 40)
).map(lambda b: (b[0], b[1], min(b[2], 2 * min(b[0], 96 - b[0])), min(b[3], 2 * min(b[1], 96 - b[1]))))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_and_ciou_bounds(b1, b2):
    v = iou(b1, b2)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(iou(b2, b1), abs=1e-12)
    loss = ciou_loss(b1, b2)
    assert -1e-12 <= loss < 3.0


def test_ciou_no_gradient_through_alpha():
    pred = torch.tensor([50.0, 50.0, 20.0, 10.0], dtype=torch.float64, requires_grad=True)
    gt = torch.tensor([52.0, 49.0, 10.0, 20.0], dtype=torch.float64)
    loss = ciou_loss(pred, gt)
    (g,) = torch.autograd.grad(loss, pred)
    # reference: same expression with alpha frozen as a constant
    p = pred.detach().clone().requires_grad_(True)
    with torch.no_grad():
        overlap = float(iou(p.tolist(), gt.tolist()))
        v = (4 / math.pi**2) * (math.atan(0.5) - math.atan(2.0)) ** 2
        alpha = v / ((1 - overlap) + v)
    
    ref = 1 - box_iou(p, gt) + ((p[0] - gt[0]) ** 2 + (p[1] - gt[1]) ** 2) / (
        (torch.maximum(p[0] + p[2] / 2, gt[0] + gt[2] / 2) - torch.minimum(p[0] - p[2] / 2, gt[0] - gt[2] / 2)) ** 2
        + (torch.maximum(p[1] + p[3] / 2, gt[1] + gt[3] / 2) - torch.minimum(p[1] - p[3] / 2, gt[1] - gt[3] / 2)) ** 2
    ) + alpha * (4 / math.pi**2) * (torch.atan(gt[2] / gt[3]) - torch.atan(p[2] / p[3])) ** 2
    (g_ref,) = torch.autograd.grad(ref, p)
    torch.testing.assert_close(g, g_ref, rtol=1e-10, atol=1e-12)


@pytest.fixture
def one_object(det_config):
    gt = GroundTruthSet((GroundTruth(2, (40.0, 56.0, 12.0, 24.0)),))
    return gt, assign_targets(gt, det_config)


def test_objectness_perfect_limit(det_config, one_object):
    _, asg = one_object
    raw = torch.zeros(6, 6, 2, 8, dtype=torch.float64)
    raw[..., 0] = torch.where(torch.as_tensor(asg.obj), 16.0, -16.0)
    assert float(objectness_loss(raw, asg, det_config.lambda_noobj)) <= 1e-5


def test_objectness_zero_logits_empty_scene(det_config):
    asg = assign_targets(GroundTruthSet(), det_config)
    raw = torch.zeros(6, 6, 2, 8, dtype=torch.float64)
    expected = det_config.lambda_noobj * det_config.num_boxes * math.log(2)
    assert float(objectness_loss(raw, asg, det_config.lambda_noobj)) == pytest.approx(expected, rel=1e-12)


def loop_objectness(raw, asg, lam):
    obj = noobj = 0.0
    s, _, a, _ = raw.shape
    for r in range(s):
        for c in range(s):
            for k in range(a):
                p = 1 / (1 + math.exp(-float(raw[r, c, k, 0])))
                p = min(max(p, 1e-7), 1 - 1e-7)
                if asg.obj[r, c, k]:
                    obj += -math.log(p)
                if asg.noobj[r, c, k]:
                    noobj += -math.log(1 - p)
    return obj + lam * noobj


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objectness_matches_loop(det_config, seed):
    rng = np.random.default_rng(seed)
    _, gt = generate_scene(SceneSpec(), seed)
    asg = assign_targets(gt, det_config)
    raw = torch.as_tensor(rng.normal(0, 3, size=(6, 6, 2, 8)))
    got = float(objectness_loss(raw, asg, 0.3))
    assert got == pytest.approx(loop_objectness(raw, asg, 0.3), rel=1e-12)


def test_empty_scene_loc_cls_zero(det_config):
    asg = assign_targets(GroundTruthSet(), det_config)
    raw = torch.as_tensor(np.random.default_rng(0).normal(size=(6, 6, 2, 8)))
    assert float(localization_loss(raw, asg, det_config)) == 0.0
    assert float(classification_loss(raw, asg)) == 0.0
    br = total_loss(torch.zeros(6, 6, 2, 8, dtype=torch.float64), asg, det_config)
    assert float(br.l_loc) == float(br.l_cls) == 0.0
    assert float(br.l_total) == float(br.l_obj)


def test_localization_identity(det_config, one_object):
    gt, asg = one_object
    (_, row, col, a) = asg.matches[0]
    cx, cy, w, h = gt.items[0].box
    stride = det_config.stride
    aw, ah = det_config.anchors[a]
    raw = torch.zeros(6, 6, 2, 8, dtype=torch.float64)
    fx, fy = cx / stride - col, cy / stride - row
    raw[row, col, a, 1] = math.log(fx / (1 - fx))
    raw[row, col, a, 2] = math.log(fy / (1 - fy))
    raw[row, col, a, 3] = math.log(w / aw)
    raw[row, col, a, 4] = math.log(h / ah)
    assert float(localization_loss(raw, asg, det_config)) == pytest.approx(0.0, abs=1e-9)


def test_localization_per_box_decomposition(det_config):
    spec = SceneSpec(min_objects=3, max_objects=3)
    _, gt = generate_scene(spec, 21)
    asg = assign_targets(gt, det_config)
    assert asg.num_objects == 3
    raw = torch.as_tensor(np.random.default_rng(1).normal(0, 0.5, size=(6, 6, 2, 8)))
    pred = decode_boxes(raw, det_config)
    expected = sum(ciou_loss(pred[r, c, a].tolist(), gt.items[gi].box) for gi, r, c, a in asg.matches)
    assert float(localization_loss(raw, asg, det_config)) == pytest.approx(expected, rel=1e-12)


def test_classification_saturated_and_zero(det_config, one_object):
    _, asg = one_object
    raw = torch.zeros(6, 6, 2, 8, dtype=torch.float64)
    assert float(classification_loss(raw, asg)) == pytest.approx(3 * math.log(2), rel=1e-12)
    (_, r, c, a) = asg.matches[0]
    raw[r, c, a, 5:] = torch.tensor([-20.0, -20.0, 20.0])
    assert float(classification_loss(raw, asg)) <= 1e-5


def test_total_is_sum_and_lambda_scaling(det_config):
    _, gt = generate_scene(SceneSpec(), 4)
    asg = assign_targets(gt, det_config)
    raw = torch.as_tensor(np.random.default_rng(2).normal(size=(6, 6, 2, 8)))
    br = total_loss(raw, asg, det_config)
    parts = float(objectness_loss(raw, asg, det_config.lambda_noobj)) + float(
        localization_loss(raw, asg, det_config)) + float(classification_loss(raw, asg))
    assert float(br.l_total) == pytest.approx(parts, rel=1e-9)
    assert float(br.l_obj) == pytest.approx(float(br.obj_part) + det_config.lambda_noobj * float(br.noobj_part), rel=1e-12)
    for v in br.as_floats().values():
        assert v >= 0
    from dataclasses import replace

    doubled = total_loss(raw, asg, replace(det_config, lambda_noobj=2 * det_config.lambda_noobj))
    assert float(doubled.obj_part) == float(br.obj_part)
    assert float(doubled.noobj_part) == float(br.noobj_part)
    assert float(doubled.l_obj - br.l_obj) == pytest.approx(det_config.lambda_noobj * float(br.noobj_part), rel=1e-12)


def test_batch_is_mean_of_singles(det_config):
    rng = np.random.default_rng(3)
    asgs = [assign_targets(generate_scene(SceneSpec(), s)[1], det_config) for s in range(4)]
    raw = torch.as_tensor(rng.normal(size=(4, 6, 6, 2, 8)))
    batch = total_loss(raw, asgs, det_config).l_total
    singles = [float(total_loss(raw[i], asgs[i], det_config).l_total) for i in range(4)]
    assert float(batch) == pytest.approx(np.mean(singles), rel=1e-12)


@pytest.mark.parametrize("selector", list(LossSelector))
def test_input_gradient_finite_differences(trained_model, tiny_test, selector):
    image, gt = tiny_test[0]
    assert len(gt) > 0
    assert finite_difference_error(trained_model, image, gt, selector) < 1e-4


def test_total_gradient_is_sum(trained_model, tiny_test):
    image, gt = tiny_test[1]
    g = {s: input_gradient(trained_model, image, gt, s)[0] for s in LossSelector}
    summed = g[LossSelector.OBJ] + g[LossSelector.LOC] + g[LossSelector.CLS]
    np.testing.assert_allclose(g[LossSelector.TOTAL], summed, rtol=1e-9, atol=1e-9 * np.abs(summed).max())


def test_degenerate_gradient_flag(trained_model):
    image, _ = generate_scene(SceneSpec(min_objects=0, max_objects=0), 0)
    grad, flag = input_gradient(trained_model, image, GroundTruthSet(), LossSelector.CLS)
    assert flag and not grad.any()
    grad, flag = input_gradient(trained_model, image, GroundTruthSet(), LossSelector.OBJ)
    assert not flag and grad.any()
