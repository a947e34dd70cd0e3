"""Multimodal decision correction: unimodal weak supervision, P/S/N pair
partitioning, per-pair contrastive correction, and the corrected binary
objective.

The batch is partitioned by whether each modality's thresholded unimodal
prediction is correct: both correct -> Positive, one correct ->
SemiPositive (the correct modality is "effective"), neither -> Negative.
The contrastive term raises the per-pair image-text similarity of P and S
items relative to the whole batch; for SemiPositive items the gradient is
blocked on the effective side so only the wrong modality gets pulled.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError
from .layers import Linear, MLP

log = logging.getLogger(__name__)

POSITIVE, SEMI, NEGATIVE = 0, 1, 2
EFF_NONE, EFF_IMAGE, EFF_TEXT = -1, 0, 1


@dataclasses.dataclass
class PairPartition:
    category: np.ndarray   # (B,) in {POSITIVE, SEMI, NEGATIVE}
    effective: np.ndarray  # (B,) in {EFF_NONE, EFF_IMAGE, EFF_TEXT}

    def __post_init__(self):
        semi = self.category == SEMI
        assert np.all((self.effective >= 0) == semi), \
            "effective modality set exactly for SemiPositive items"


def _check_binary(labels, name):
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise DegenerateInputError(f"{name} must be 0/1")
    return labels.astype(np.float64)


def unimodal_loss(logits, labels):
    """Mean BCE of one modality's class-feature logits vs its own label."""
    labels = _check_binary(labels, "unimodal labels")
    return ad.bce_mean(logits, Tensor(labels))


def partition_pairs(prob_v, prob_t, y_v, y_t) -> PairPartition:
    """Classify each pair by unimodal prediction correctness.

    Threshold 0.5 on sigmoid outputs; a probability of exactly 0.5 counts
    as incorrect for either label.
    """
    prob_v, prob_t = np.asarray(prob_v), np.asarray(prob_t)
    y_v = _check_binary(y_v, "y_v")
    y_t = _check_binary(y_t, "y_t")
    ok_v = (prob_v != 0.5) & ((prob_v > 0.5) == (y_v == 1))
    ok_t = (prob_t != 0.5) & ((prob_t > 0.5) == (y_t == 1))
    category = np.where(ok_v & ok_t, POSITIVE,
                        np.where(ok_v | ok_t, SEMI, NEGATIVE))
    effective = np.full(len(category), EFF_NONE)
    semi = category == SEMI
    effective[semi & ok_v] = EFF_IMAGE
    effective[semi & ok_t] = EFF_TEXT
    return PairPartition(category=category, effective=effective)


def mmc_loss(r_v, r_t, partition: PairPartition, tau=0.07):
    """Contrastive correction over per-pair similarities.

    -log of the P-and-S share of sum_i exp(sim(r_v_i, r_t_i)/tau). For
    SemiPositive items the effective modality's representation is
    stop-gradiented so the pull acts on the ineffective side only.
    """
    ps_mask = partition.category != NEGATIVE
    if not ps_mask.any():
        raise DegenerateInputError("mmc_loss: no Positive or SemiPositive pairs")
    stop_v = (partition.category == SEMI) & (partition.effective == EFF_IMAGE)
    stop_t = (partition.category == SEMI) & (partition.effective == EFF_TEXT)
    rv = ad.where(stop_v[:, None], ad.detach(r_v), r_v)
    rt = ad.where(stop_t[:, None], ad.detach(r_t), r_t)
    sims = ad.cosine_similarity(rv, rt, axis=-1) * (1.0 / tau)
    num = ad.logsumexp(ad.take(sims, np.nonzero(ps_mask)[0], axis=0))
    den = ad.logsumexp(sims)
    return den - num


class DecisionHeads:
    """Binary pair head, per-modality unimodal heads, and the reduced
    projections feeding the contrastive correction."""

    def __init__(self, rng, d_model, d_reduced):
        self.img_head = Linear(rng, d_model, 1)
        self.txt_head = Linear(rng, d_model, 1)
        self.pair_head = MLP(rng, 2 * d_model, d_model, 1)
        self.proj_v = Linear(rng, d_model, d_reduced)
        self.proj_t = Linear(rng, d_model, d_reduced)

    def named_parameters(self, prefix):
        yield from self.img_head.named_parameters(f"{prefix}.img_head")
        yield from self.txt_head.named_parameters(f"{prefix}.txt_head")
        yield from self.pair_head.named_parameters(f"{prefix}.pair_head")
        yield from self.proj_v.named_parameters(f"{prefix}.proj_v")
        yield from self.proj_t.named_parameters(f"{prefix}.proj_t")

    def logits(self, v_cls, t_cls):
        """v_cls, t_cls: (B, d) -> (pair, image, text) logit vectors (B,)."""
        b = v_cls.shape[0]
        pair = self.pair_head(ad.concat([v_cls, t_cls], axis=1))
        return (ad.reshape(pair, (b,)),
                ad.reshape(self.img_head(v_cls), (b,)),
                ad.reshape(self.txt_head(t_cls), (b,)))

    def losses(self, v_cls, t_cls, y_v, y_t, alpha1, alpha2, tau=0.07):
        """Corrected binary objective and its pieces.

        Returns a dict with l_bic, l_v_uni, l_t_uni, l_mmc (zero constant
        when the batch has no P/S pairs), l_bic_star, pair_logits, and the
        partition actually used.
        """
        y_v = _check_binary(y_v, "y_v")
        y_t = _check_binary(y_t, "y_t")
        y_pair = np.maximum(y_v, y_t)
        pair_logit, img_logit, txt_logit = self.logits(v_cls, t_cls)

        l_bic = ad.bce_mean(pair_logit, Tensor(y_pair))
        l_v_uni = unimodal_loss(img_logit, y_v)
        l_t_uni = unimodal_loss(txt_logit, y_t)

        with ad.pause_tape():
            prob_v = ad.sigmoid(img_logit).data
            prob_t = ad.sigmoid(txt_logit).data
        partition = partition_pairs(prob_v, prob_t, y_v, y_t)
        r_v = self.proj_v(v_cls)
        r_t = self.proj_t(t_cls)
        try:
            l_mmc = mmc_loss(r_v, r_t, partition, tau=tau)
        except DegenerateInputError:
            log.warning("mmc_loss skipped: batch has no Positive/SemiPositive pairs")
            l_mmc = Tensor(0.0)

        l_star = l_bic + alpha1 * (l_v_uni + l_t_uni) + alpha2 * l_mmc
        return {"l_bic": l_bic, "l_v_uni": l_v_uni, "l_t_uni": l_t_uni,
                "l_mmc": l_mmc, "l_bic_star": l_star,
                "pair_logit": pair_logit, "img_logit": img_logit,
                "txt_logit": txt_logit, "partition": partition}
