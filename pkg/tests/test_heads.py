"""Judgment heads: culling, grounding aggregation, bbox/token losses,
and the assembled objective.

Box-loss expectations are worked out by hand from rectangle algebra
(the disjoint-unit-box case pins the generalized-IoU extension term),
and culling is checked to be an exact per-sample selector.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmforge import autodiff as ad
from mmforge.autodiff import Tensor
from mmforge.errors import DegenerateInputError, NonFiniteError
from mmforge.heads import (JudgmentModule, bbox_loss, cull, cxcywh_to_xyxy,
                           full_objective, generalized_iou, token_loss)

D, HEADS = 16, 2


@pytest.fixture
def module(rng):
    return JudgmentModule(rng, D, HEADS)


def test_cxcywh_to_xyxy_by_hand():
    boxes = Tensor(np.array([[0.5, 0.5, 1.0, 1.0], [0.25, 0.75, 0.5, 0.1]]))
    np.testing.assert_allclose(
        cxcywh_to_xyxy(boxes).data,
        [[0.0, 0.0, 1.0, 1.0], [0.0, 0.7, 0.5, 0.8]], atol=1e-12)


def test_giou_identical_boxes_is_one():
    box = Tensor(np.array([[0.1, 0.2, 0.7, 0.9]]))
    np.testing.assert_allclose(generalized_iou(box, box).data, [1.0],
                               atol=1e-12)


def test_giou_disjoint_unit_boxes_in_enclosing_area_four():
    """Unit boxes touching at one corner: intersection 0, union 2,
    enclosing box area 4, so gIoU = 0 - 2/4 = -0.5."""
    pred = Tensor(np.array([[0.0, 0.0, 1.0, 1.0]]))
    gt = Tensor(np.array([[1.0, 1.0, 2.0, 2.0]]))
    np.testing.assert_allclose(generalized_iou(pred, gt).data, [-0.5],
                               atol=1e-12)


def test_bbox_loss_perfect_prediction_is_zero():
    boxes = np.array([[0.5, 0.5, 0.4, 0.2]])
    assert float(bbox_loss(Tensor(boxes), boxes).data) == pytest.approx(0.0,
                                                                        abs=1e-12)


def test_bbox_loss_hand_value():
    """pred (0.25,0.25,0.75,0.75) vs gt (0,0,1,1) corners: L1 over
    center/size coords = 1.0; IoU = 0.25, enclosing = union = 1 so
    gIoU = 0.25; total = 1.0 + 0.75."""
    pred = Tensor(np.array([[0.5, 0.5, 0.5, 0.5]]))
    gt = np.array([[0.5, 0.5, 1.0, 1.0]])
    assert float(bbox_loss(pred, gt).data) == pytest.approx(1.75, abs=1e-12)


def test_bbox_loss_disjoint_unit_boxes():
    """L1 = |1.5-0.5|*2 = 2 on the centers; gIoU term = 1.5."""
    pred = Tensor(np.array([[0.5, 0.5, 1.0, 1.0]]))
    gt = np.array([[1.5, 1.5, 1.0, 1.0]])
    assert float(bbox_loss(pred, gt).data) == pytest.approx(3.5, abs=1e-12)


def test_bbox_loss_empty_batch_is_zero():
    assert float(bbox_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 4))).data) == 0.0


def test_token_loss_zero_logits_is_ln2(rng):
    logits = Tensor(np.zeros((3, 5)))
    y = rng.integers(0, 2, size=(3, 5))
    assert float(token_loss(logits, y).data) == pytest.approx(np.log(2.0),
                                                              abs=1e-12)


def test_token_loss_confident_correct_is_near_zero():
    y = np.array([[1.0, 0.0, 1.0]])
    logits = Tensor((2 * y - 1) * 100.0)
    assert float(token_loss(logits, y).data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.invariant
def test_cull_is_an_exact_per_sample_selector(rng):
    """Pre-interaction features are kept exactly when the sample's own
    modality is fake and the other genuine; the selected rows are
    bit-identical to one of the inputs."""
    before = rng.normal(size=(4, 6, D))
    after = rng.normal(size=(4, 6, D))
    own = np.array([1, 1, 0, 0])
    other = np.array([0, 1, 1, 0])
    out = cull(Tensor(before), Tensor(after), own, other).data
    assert np.array_equal(out[0], before[0])      # fake vs genuine: keep pre
    assert np.array_equal(out[1], after[1])       # both fake: interacted
    assert np.array_equal(out[2], after[2])       # genuine vs fake: interacted
    assert np.array_equal(out[3], after[3])       # both genuine: interacted


def test_cull_symmetric_case_matches_modalities(rng):
    """Image genuine / text fake: the image keeps interacted features
    while the text side keeps its raw token features."""
    v_before, v_after = rng.normal(size=(2, 1, 3, D))
    t_before, t_after = rng.normal(size=(2, 1, 5, D))
    y_v, y_t = np.array([0]), np.array([1])
    v_g = cull(Tensor(v_before), Tensor(v_after), y_v, y_t).data
    t_g = cull(Tensor(t_before), Tensor(t_after), y_t, y_v).data
    assert np.array_equal(v_g, v_after)
    assert np.array_equal(t_g, t_before)


def test_guided_cls_residual_identity_when_projection_zeroed(module, rng):
    module.guide_attn_v.wo.data[:] = 0.0
    cls3 = rng.normal(size=(3, 1, D))
    tilde = rng.normal(size=(3, 7, D))
    out = module.guided_cls(Tensor(cls3), Tensor(tilde), "image")
    assert out.shape == (3, D)
    np.testing.assert_allclose(out.data, cls3[:, 0, :], atol=1e-12)


def test_ground_identical_keys_give_value_projection(module, rng):
    """If every key row equals the class feature, attention weights are
    uniform over identical rows and the output is that row's value
    projection regardless of the query."""
    cls_row = rng.normal(size=(2, 1, D))
    feats = Tensor(np.repeat(cls_row, 5, axis=1))
    out = module.ground(Tensor(cls_row), feats, "image")
    expected = (cls_row[:, 0, :] @ module.ground_attn_v.wv.data
                @ module.ground_attn_v.wo.data)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


@pytest.mark.invariant
@given(seed=st.integers(0, 200))
def test_bbox_predictions_are_sigmoid_bounded(seed):
    rng = np.random.default_rng(seed)
    module = JudgmentModule(rng, D, HEADS)
    ground_v = Tensor(rng.normal(scale=5.0, size=(4, D)))
    pred = module.bbox_pred(ground_v).data
    assert pred.shape == (4, 4)
    assert np.all(pred > 0.0) and np.all(pred < 1.0)


def test_token_logits_match_bilinear_restatement(module, rng):
    ground_t = rng.normal(size=(3, D))
    t_g = rng.normal(size=(3, 6, D))
    logits = module.token_logits(Tensor(ground_t), Tensor(t_g)).data
    expected = np.einsum("bd,de,ble->bl", ground_t, module.tok_bilinear.data,
                         t_g)
    assert logits.shape == (3, 6)
    np.testing.assert_allclose(logits, expected, atol=1e-10)


def test_multi_label_losses_match_portioned_bce(module, rng):
    v_c = Tensor(rng.normal(size=(4, D)))
    t_c = Tensor(rng.normal(size=(4, D)))
    y = rng.integers(0, 2, size=(4, 4))
    l_v, l_t = module.multi_label_losses(v_c, t_c, y)

    def bce(z, t):
        return np.mean(t * np.logaddexp(0, -z) + (1 - t) * np.logaddexp(0, z))

    zv = module.ml_head_v(v_c).data
    zt = module.ml_head_t(t_c).data
    assert float(l_v.data) == pytest.approx(bce(zv, y[:, :2]), abs=1e-12)
    assert float(l_t.data) == pytest.approx(bce(zt, y[:, 2:]), abs=1e-12)


def test_multi_label_losses_reject_bad_label_shape(module, rng):
    feats = Tensor(rng.normal(size=(4, D)))
    with pytest.raises(DegenerateInputError):
        module.multi_label_losses(feats, feats, np.zeros((4, 3)))


def test_multi_label_probs_are_sigmoids(module, rng):
    v_c = Tensor(rng.normal(size=(3, D)))
    t_c = Tensor(rng.normal(size=(3, D)))
    probs = module.multi_label_probs(v_c, t_c).data
    expected = np.concatenate([
        1 / (1 + np.exp(-module.ml_head_v(v_c).data)),
        1 / (1 + np.exp(-module.ml_head_t(t_c).data))], axis=1)
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    assert probs.shape == (3, 4)


def test_full_objective_all_zero_terms():
    terms = {"a": Tensor(0.0), "b": Tensor(0.0)}
    assert float(full_objective(terms, {}).data) == 0.0


@pytest.mark.invariant
def test_full_objective_is_linear_in_each_term():
    """Perturbing one named term changes the total by exactly the term's
    weight times the perturbation."""
    base = {"a": Tensor(0.7), "b": Tensor(1.3), "c": Tensor(0.2)}
    weights = {"b": 3.0}
    t0 = float(full_objective(base, weights).data)
    bumped = dict(base, b=Tensor(1.3 + 0.25))
    t1 = float(full_objective(bumped, weights).data)
    assert t1 - t0 == pytest.approx(3.0 * 0.25, abs=1e-12)
    bumped = dict(base, a=Tensor(0.7 + 0.5))
    assert float(full_objective(bumped, weights).data) - t0 == pytest.approx(
        0.5, abs=1e-12)


def test_full_objective_names_nonfinite_term():
    terms = {"fine": Tensor(1.0), "broken": Tensor(np.nan)}
    with pytest.raises(NonFiniteError, match="broken"):
        full_objective(terms, {})
