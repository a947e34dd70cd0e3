"""Unimodal forgery mining: overlap banding, grouped feature-level
supervision with rarity-weighted BCE, masked global aggregation, supervised
contrastive sample-level losses, and manipulation-type refinement.

Feature-level: patches are banded 0-3 by intersection-over-patch-area
quartile and scored in the four band groups {0,2},{0,3},{1,2},{1,3}; inside
a group the rarer band's patches get proportionally larger weight (the two
category weights average 1, so a balanced group degenerates to a plain
mean). Tokens use the same rarity weighting over real/fake with no banding.

Sample-level: one global embedding per sample from single-query attention;
fake samples attend only to their forged positions via an additive -inf
mask. The pooled embeddings feed a supervised contrastive loss whose
second term penalizes raw negative-pair similarity with weight lam.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError
from .layers import MLP, MultiHeadAttention

log = logging.getLogger(__name__)

BAND_GROUPS = ((0, 2), (0, 3), (1, 2), (1, 3))


def band_patches(ratios):
    """Map intersection-over-patch-area ratios to bands 0..3.

    Bands are half-open on the left ([0,.25), [.25,.5), [.5,.75)) with the
    top band closed ([.75,1]), so every ratio lands in exactly one band.
    """
    ratios = np.asarray(ratios)
    if np.any(ratios < 0) or np.any(ratios > 1):
        raise DegenerateInputError("overlap ratios must lie in [0,1]")
    return np.digitize(ratios, (0.25, 0.5, 0.75))


def rarity_weights(flags):
    """Per-position weights 2*n_other/(n_a+n_b) over a binary partition.

    flags: (B, N) in {0,1}. Positions in rows lacking either class get
    weight 0 (the loss contribution of such rows must vanish).
    """
    flags = np.asarray(flags)
    n1 = flags.sum(axis=1, keepdims=True)
    n0 = flags.shape[1] - n1
    both = (n0 > 0) & (n1 > 0)
    total = n0 + n1
    w = np.where(flags == 1, 2.0 * n0 / total, 2.0 * n1 / total)
    return np.where(both, w, 0.0)


def scl_loss(embeddings, labels, tau=0.07, lam=0.1):
    """Supervised contrastive loss over one batch of embeddings.

    First term: mean over anchors with >=1 positive of the mean negative
    log-probability of its positives against all other items. Second term:
    lam times the mean over anchors with >=1 negative of the mean raw
    scaled similarity to its negatives. Similarities are cosine / tau.
    """
    n = embeddings.shape[0]
    if n < 2:
        raise DegenerateInputError(f"scl_loss needs >=2 embeddings, got {n}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DegenerateInputError("scl_loss labels must be one per embedding")
    norms_np = np.linalg.norm(embeddings.data, axis=-1)
    if np.any(norms_np < 1e-12):
        raise DegenerateInputError("scl_loss: zero-norm embedding")

    norm = ad.sqrt(ad.tsum(embeddings * embeddings, axis=-1, keepdims=True))
    zn = embeddings / norm
    sims = (zn @ ad.transpose(zn, (1, 0))) * (1.0 / tau)
    eye = np.eye(n, dtype=bool)
    masked = ad.where(eye, Tensor(np.full((n, n), -np.inf)), sims)
    lse = ad.logsumexp(masked, axis=1)
    log_prob = sims - ad.reshape(lse, (n, 1))

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~eye
    neg_mask = ~same
    pos_counts = pos_mask.sum(axis=1)
    neg_counts = neg_mask.sum(axis=1)

    if pos_counts.max() == 0:
        log.warning("scl_loss: single-class batch, alignment term skipped")
        term1 = Tensor(0.0)
    else:
        per = ad.tsum(Tensor(pos_mask.astype(float)) * log_prob, axis=1)
        per = per / Tensor(np.maximum(pos_counts, 1).astype(float))
        anchors = np.nonzero(pos_counts > 0)[0]
        term1 = -ad.tmean(ad.take(per, anchors, axis=0))

    if neg_counts.max() == 0:
        term2 = Tensor(0.0)
    else:
        per = ad.tsum(Tensor(neg_mask.astype(float)) * sims, axis=1)
        per = per / Tensor(np.maximum(neg_counts, 1).astype(float))
        anchors = np.nonzero(neg_counts > 0)[0]
        term2 = ad.tmean(ad.take(per, anchors, axis=0))

    return term1 + lam * term2


class MiningModule:
    """Parameters and losses for both feature- and sample-level mining."""

    def __init__(self, rng, d_model, heads, tau=0.07, lam=0.1):
        self.tau = tau
        self.lam = lam
        self.patch_head = MLP(rng, d_model, d_model, 1)
        self.token_head = MLP(rng, d_model, d_model, 1)
        self.g_v = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (1, d_model)),
                          requires_grad=True)
        self.g_t = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (1, d_model)),
                          requires_grad=True)
        self.attn_v = MultiHeadAttention(rng, d_model, heads)
        self.attn_t = MultiHeadAttention(rng, d_model, heads)
        self.type_head_v = MLP(rng, d_model, d_model, 1)
        self.type_head_t = MLP(rng, d_model, d_model, 1)

    def named_parameters(self, prefix):
        yield from self.patch_head.named_parameters(f"{prefix}.patch_head")
        yield from self.token_head.named_parameters(f"{prefix}.token_head")
        yield f"{prefix}.g_v", self.g_v
        yield f"{prefix}.g_t", self.g_t
        yield from self.attn_v.named_parameters(f"{prefix}.attn_v")
        yield from self.attn_t.named_parameters(f"{prefix}.attn_t")
        yield from self.type_head_v.named_parameters(f"{prefix}.type_head_v")
        yield from self.type_head_t.named_parameters(f"{prefix}.type_head_t")

    # -- feature level ----------------------------------------------------

    def image_feature_loss(self, v_pat, bands, y_pat):
        """Grouped, rarity-weighted patch BCE; mean over the four groups,
        averaged over images that contain a forged region."""
        bands = np.asarray(bands)
        y_pat = np.asarray(y_pat, dtype=np.float64)
        b, p = y_pat.shape
        logits = ad.reshape(self.patch_head(v_pat), (b, p))
        bce = ad.bce_with_logits(logits, Tensor(y_pat))
        coeff = np.zeros((b, p))
        for lo, hi in BAND_GROUPS:
            in_lo = bands == lo
            in_hi = bands == hi
            n_lo = in_lo.sum(axis=1, keepdims=True)
            n_hi = in_hi.sum(axis=1, keepdims=True)
            both = (n_lo > 0) & (n_hi > 0)
            total = np.maximum(n_lo + n_hi, 1)
            w = np.where(in_lo, 2.0 * n_hi / total, 0.0) \
                + np.where(in_hi, 2.0 * n_lo / total, 0.0)
            coeff += np.where(both, w / total, 0.0)
        coeff /= len(BAND_GROUPS)
        n_forged = int((y_pat.sum(axis=1) > 0).sum())
        if n_forged == 0:
            return Tensor(0.0)
        return ad.tsum(Tensor(coeff) * bce) * (1.0 / n_forged)

    def text_feature_loss(self, t_tok, y_tok):
        """Rarity-weighted token BCE, averaged over texts with forged spans."""
        y_tok = np.asarray(y_tok, dtype=np.float64)
        b, n = y_tok.shape
        logits = ad.reshape(self.token_head(t_tok), (b, n))
        bce = ad.bce_with_logits(logits, Tensor(y_tok))
        coeff = rarity_weights(y_tok) / n
        n_forged = int((y_tok.sum(axis=1) > 0).sum())
        if n_forged == 0:
            return Tensor(0.0)
        return ad.tsum(Tensor(coeff) * bce) * (1.0 / n_forged)

    def feature_level_loss(self, v_pat, bands, y_pat, t_tok, y_tok):
        l_v = self.image_feature_loss(v_pat, bands, y_pat)
        l_t = self.text_feature_loss(t_tok, y_tok)
        return l_v + l_t

    # -- sample level ------------------------------------------------------

    def _aggregate(self, query, attn, feats, y_bin, pos_flags):
        """One global embedding per sample: genuine samples attend over all
        positions, fake samples only over forged positions."""
        y_bin = np.asarray(y_bin)
        flags = np.asarray(pos_flags)
        b, n = flags.shape
        mask = np.zeros((b, 1, 1, n))
        fake = y_bin == 1
        mask[fake] = np.where(flags[fake, None, None, :] == 1, 0.0, -np.inf)
        out = attn(query, feats, feats, additive_mask=mask)
        return ad.reshape(out, (b, feats.shape[-1]))

    def image_embeddings(self, v_pat, y_v, y_pat):
        return self._aggregate(self.g_v, self.attn_v, v_pat, y_v, y_pat)

    def text_embeddings(self, t_tok, y_t, y_tok):
        return self._aggregate(self.g_t, self.attn_t, t_tok, y_t, y_tok)

    def sample_level_loss(self, g_img, y_v, g_txt, y_t):
        l_v = scl_loss(g_img, np.asarray(y_v), tau=self.tau, lam=self.lam)
        l_t = scl_loss(g_txt, np.asarray(y_t), tau=self.tau, lam=self.lam)
        return l_v + l_t

    # -- manipulation-type refinement ---------------------------------------

    def _type_loss(self, head, g_fake, y_m):
        n = g_fake.shape[0] if g_fake is not None else 0
        if n == 0:
            return Tensor(0.0)
        y_m = np.asarray(y_m, dtype=np.float64)
        logits = ad.reshape(head(g_fake), (n,))
        l_m1 = ad.bce_mean(logits, Tensor(y_m))
        if n < 2:
            log.warning("manip-type contrastive term skipped: %d fake sample(s)", n)
            return l_m1
        return l_m1 + scl_loss(g_fake, y_m.astype(int), tau=self.tau, lam=self.lam)

    def manip_type_loss(self, g_img, y_v, y_v_m, g_txt, y_t, y_t_m):
        """y_v_m / y_t_m: per-sample type flag, only meaningful on fakes."""
        y_v = np.asarray(y_v)
        y_t = np.asarray(y_t)
        idx_v = np.nonzero(y_v == 1)[0]
        idx_t = np.nonzero(y_t == 1)[0]
        g_vf = ad.take(g_img, idx_v, axis=0) if idx_v.size else None
        g_tf = ad.take(g_txt, idx_t, axis=0) if idx_t.size else None
        l_v = self._type_loss(self.type_head_v, g_vf,
                              np.asarray(y_v_m)[idx_v] if idx_v.size else [])
        l_t = self._type_loss(self.type_head_t, g_tf,
                              np.asarray(y_t_m)[idx_t] if idx_t.size else [])
        return l_v, l_t
