"""Fine-grained judgment: guided multi-label classification, disruptive
information culling, grounding aggregation, bbox and token heads, and the
assembly of the total objective.

Culling picks pre-interaction features for grounding exactly when the
sample's own modality is fake and the other is genuine, so cross-modal
mixing cannot inject noise from the clean modality; the selection is
bit-exact (output is one of the two inputs). The bbox head regresses a
sigmoid-bounded (cx, cy, w, h) in normalized grid units trained with L1
plus a generalized-IoU term; the token head scores tokens by a bilinear
form between the grounding embedding and each token feature.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError
from .layers import MLP, MultiHeadAttention


def _col(t, i):
    return ad.take(t, np.array([i]), axis=1)


def cxcywh_to_xyxy(boxes):
    """(n,4) center/size -> corner boxes; differentiable."""
    cx, cy = _col(boxes, 0), _col(boxes, 1)
    w, h = _col(boxes, 2), _col(boxes, 3)
    return ad.concat([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5],
                     axis=1)


def generalized_iou(pred_xyxy, gt_xyxy):
    """Per-row gIoU in (-1, 1]; gt boxes must have positive area."""
    px0, py0 = _col(pred_xyxy, 0), _col(pred_xyxy, 1)
    px1, py1 = _col(pred_xyxy, 2), _col(pred_xyxy, 3)
    gx0, gy0 = _col(gt_xyxy, 0), _col(gt_xyxy, 1)
    gx1, gy1 = _col(gt_xyxy, 2), _col(gt_xyxy, 3)
    iw = ad.relu(ad.minimum(px1, gx1) - ad.maximum(px0, gx0))
    ih = ad.relu(ad.minimum(py1, gy1) - ad.maximum(py0, gy0))
    inter = iw * ih
    area_p = ad.relu(px1 - px0) * ad.relu(py1 - py0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    union = area_p + area_g - inter
    ew = ad.maximum(px1, gx1) - ad.minimum(px0, gx0)
    eh = ad.maximum(py1, gy1) - ad.minimum(py0, gy0)
    enclose = ew * eh
    giou = inter / union - (enclose - union) / enclose
    n = pred_xyxy.shape[0]
    return ad.reshape(giou, (n,))


def bbox_loss(pred_cxcywh, gt_cxcywh):
    """Mean over boxes of L1 (summed over the 4 coords) + (1 - gIoU)."""
    n = pred_cxcywh.shape[0]
    if n == 0:
        return Tensor(0.0)
    gt = Tensor(np.asarray(gt_cxcywh, dtype=np.float64))
    l1 = ad.tsum((pred_cxcywh - gt).abs()) * (1.0 / n)
    giou = generalized_iou(cxcywh_to_xyxy(pred_cxcywh), cxcywh_to_xyxy(gt))
    return l1 + ad.tmean(1.0 - giou)


def token_loss(token_logits, y_tok):
    return ad.bce_mean(token_logits, Tensor(np.asarray(y_tok, dtype=np.float64)))


def cull(before, after, own_fake, other_fake):
    """Eq.-style selector: keep pre-interaction features iff this modality
    is fake while the other is genuine; otherwise the interacted features.
    Bitwise-exact selection per sample."""
    own = np.asarray(own_fake).astype(bool)
    other = np.asarray(other_fake).astype(bool)
    cond = (own & ~other)[:, None, None]
    return ad.where(cond, before, after)


class JudgmentModule:
    def __init__(self, rng, d_model, heads):
        self.guide_attn_v = MultiHeadAttention(rng, d_model, heads)
        self.guide_attn_t = MultiHeadAttention(rng, d_model, heads)
        self.ml_head_v = MLP(rng, d_model, d_model, 2)   # FS, FA
        self.ml_head_t = MLP(rng, d_model, d_model, 2)   # TS, TA
        self.g_vg = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (1, d_model)),
                           requires_grad=True)
        self.g_tg = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (1, d_model)),
                           requires_grad=True)
        self.ground_attn_v = MultiHeadAttention(rng, d_model, heads)
        self.ground_attn_t = MultiHeadAttention(rng, d_model, heads)
        self.bbox_head = MLP(rng, d_model, d_model, 4)
        self.tok_bilinear = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model)),
            requires_grad=True)

    def named_parameters(self, prefix):
        yield from self.guide_attn_v.named_parameters(f"{prefix}.guide_attn_v")
        yield from self.guide_attn_t.named_parameters(f"{prefix}.guide_attn_t")
        yield from self.ml_head_v.named_parameters(f"{prefix}.ml_head_v")
        yield from self.ml_head_t.named_parameters(f"{prefix}.ml_head_t")
        yield f"{prefix}.g_vg", self.g_vg
        yield f"{prefix}.g_tg", self.g_tg
        yield from self.ground_attn_v.named_parameters(f"{prefix}.ground_attn_v")
        yield from self.ground_attn_t.named_parameters(f"{prefix}.ground_attn_t")
        yield from self.bbox_head.named_parameters(f"{prefix}.bbox_head")
        yield f"{prefix}.tok_bilinear", self.tok_bilinear

    def guided_cls(self, cls3, tilde, side):
        """cls3: (B,1,d) class feature; tilde: post-interaction sequence."""
        attn = self.guide_attn_v if side == "image" else self.guide_attn_t
        out = cls3 + attn(cls3, tilde, tilde)
        return ad.reshape(out, (out.shape[0], out.shape[2]))

    def multi_label_losses(self, v_c, t_c, y_multi):
        y = np.asarray(y_multi, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 4:
            raise DegenerateInputError("y_multi must be (B, 4)")
        l_v = ad.bce_mean(self.ml_head_v(v_c), Tensor(y[:, :2]))
        l_t = ad.bce_mean(self.ml_head_t(t_c), Tensor(y[:, 2:]))
        return l_v, l_t

    def multi_label_probs(self, v_c, t_c):
        return ad.concat([ad.sigmoid(self.ml_head_v(v_c)),
                          ad.sigmoid(self.ml_head_t(t_c))], axis=1)

    def ground(self, cls3, feats, side):
        """Aggregate Cat(cls, feats) under the dedicated grounding query."""
        query = self.g_vg if side == "image" else self.g_tg
        attn = self.ground_attn_v if side == "image" else self.ground_attn_t
        keys = ad.concat([cls3, feats], axis=1)
        out = attn(query, keys, keys)
        return ad.reshape(out, (out.shape[0], out.shape[2]))

    def bbox_pred(self, ground_v):
        return ad.sigmoid(self.bbox_head(ground_v))

    def token_logits(self, ground_t, t_g):
        b, d = ground_t.shape
        q = ad.reshape(ground_t @ self.tok_bilinear, (b, 1, d))
        return ad.reshape(q @ ad.swap_last(t_g), (b, t_g.shape[1]))


def full_objective(terms, weights):
    """Weighted sum of the named loss terms; every term must be finite."""
    total = Tensor(0.0)
    for name, term in terms.items():
        ad.assert_finite(term, name)
        total = total + weights.get(name, 1.0) * term
    ad.assert_finite(total, "total")
    return total
