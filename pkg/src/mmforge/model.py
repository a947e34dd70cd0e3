"""End-to-end manipulation detection/grounding model.

Wires the encoders, decision correction, forged-region mining, cross-modal
alignment, and judgment heads into one trainable module with a canonical
parameter ordering. ``forward`` computes the full training objective from a
labelled batch; ``predict`` produces calibrated inference outputs (pair /
unimodal probabilities, multi-label probabilities, a normalized bounding
box, per-token probabilities) without touching labels.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from . import autodiff as ad
from .alignment import SEL_MAX, SEL_MIN, AlignmentModule, build_selection, \
    soft_interaction
from .autodiff import Tensor
from .data import DatasetConfig, overlap_ratios
from .decision import DecisionHeads
from .encoders import ImageEncoder, PreInteraction, TextEncoder
from .heads import JudgmentModule, bbox_loss, cull, full_objective, token_loss
from .mining import MiningModule, band_patches

log = logging.getLogger(__name__)


def make_batch(samples, data_cfg: DatasetConfig):
    """Stack samples into dense arrays; genuine images get all-zero boxes."""
    g = data_cfg.grid
    p = g * g
    b = len(samples)
    patches = np.stack([s.patch_grid.reshape(p, -1) for s in samples])
    tokens = np.stack([s.tokens for s in samples])
    y_v = np.array([s.labels.y_v_bin for s in samples])
    y_t = np.array([s.labels.y_t_bin for s in samples])
    y_multi = np.array([s.labels.y_multi for s in samples], dtype=np.float64)
    y_pat = np.stack([np.asarray(s.labels.y_pat) for s in samples])
    y_tok = np.stack([np.asarray(s.labels.y_tok) for s in samples])
    ratios = np.stack([overlap_ratios(s.labels.bbox, g) for s in samples])
    y_v_m = np.array([s.labels.y_v_m if s.labels.y_v_m is not None else 0
                      for s in samples])
    y_t_m = np.array([s.labels.y_t_m if s.labels.y_t_m is not None else 0
                      for s in samples])
    bbox_cxcywh = np.zeros((b, 4))
    bbox_xyxy = np.zeros((b, 4))
    for i, s in enumerate(samples):
        if s.labels.bbox is not None:
            x0, y0, x1, y1 = s.labels.bbox
            bbox_cxcywh[i] = ((x0 + x1) / 2 / g, (y0 + y1) / 2 / g,
                              (x1 - x0) / g, (y1 - y0) / g)
            bbox_xyxy[i] = (x0 / g, y0 / g, x1 / g, y1 / g)
    return {"patches": patches, "tokens": tokens, "y_v": y_v, "y_t": y_t,
            "y_multi": y_multi, "y_pat": y_pat, "y_tok": y_tok,
            "ratios": ratios, "y_v_m": y_v_m, "y_t_m": y_t_m,
            "bbox_cxcywh": bbox_cxcywh, "bbox_xyxy": bbox_xyxy}


class FMSModel:
    def __init__(self, rng, data_cfg: DatasetConfig, hp):
        self.hp = hp
        self.grid = data_cfg.grid
        self.grid_sq = data_cfg.grid ** 2
        self.seq_len = data_cfg.seq_len
        d = hp.d
        self.img_enc = ImageEncoder(rng, data_cfg.grid, data_cfg.d_raw, d, hp.heads)
        self.txt_enc = TextEncoder(rng, data_cfg.seq_len, data_cfg.vocab_size,
                                   d, hp.heads)
        self.pre = PreInteraction(rng, d, hp.heads, hp.n_pre)
        self.decision = DecisionHeads(rng, d, hp.d_r)
        self.mining = MiningModule(rng, d, hp.heads, tau=hp.tau, lam=hp.lam)
        self.k = math.ceil(hp.k_fraction * self.grid_sq * self.seq_len)
        self.alignment = AlignmentModule(rng, d, self.grid_sq, self.seq_len,
                                         self.k, alpha3=hp.alpha3, eta=hp.eta)
        self.judgment = JudgmentModule(rng, d, hp.heads)

    def named_parameters(self):
        yield from self.img_enc.named_parameters("img_enc")
        yield from self.txt_enc.named_parameters("txt_enc")
        yield from self.pre.named_parameters("pre")
        yield from self.decision.named_parameters("decision")
        yield from self.mining.named_parameters("mining")
        yield from self.alignment.named_parameters("alignment")
        yield from self.judgment.named_parameters("judgment")

    # -- shared stages -------------------------------------------------------

    def encode(self, patches, tokens):
        """Unimodal encoding plus shallow cross-modal pre-interaction.
        Returns class features (B,1,d) and position features for both sides."""
        v_cls3, v_pat = self.img_enc(Tensor(np.asarray(patches, dtype=np.float64)))
        t_cls3, t_tok = self.txt_enc(np.asarray(tokens))
        v_seq = ad.concat([v_cls3, v_pat], axis=1)
        t_seq = ad.concat([t_cls3, t_tok], axis=1)
        v_seq, t_seq = self.pre(v_seq, t_seq)
        p, l = self.grid_sq, self.seq_len
        v_cls3 = ad.take(v_seq, np.array([0]), axis=1)
        v_pat = ad.take(v_seq, np.arange(1, p + 1), axis=1)
        t_cls3 = ad.take(t_seq, np.array([0]), axis=1)
        t_tok = ad.take(t_seq, np.arange(1, l + 1), axis=1)
        return v_cls3, v_pat, t_cls3, t_tok

    def interact(self, v_cls, t_cls, v_pat, t_tok):
        """Alignment-guided cross-modal interaction producing the enriched
        sequences. With ``uniform_masks`` both soft masks are all-ones and
        the guidance/selection path is bypassed."""
        hp = self.hp
        b = v_pat.shape[0]
        if hp.uniform_masks:
            ones = Tensor(np.ones((b, self.grid_sq, self.seq_len)))
            chi_c = chi_ic = ones
        else:
            s_g, s_pt = self.alignment.global_guidance(v_cls, t_cls, v_pat, t_tok)
            sel_max, _, _ = build_selection(s_g, s_pt, self.k, SEL_MAX)
            sel_min, _, _ = build_selection(s_g, s_pt, self.k, SEL_MIN)
            chi_c, chi_ic = self.alignment.build_masks(sel_max, sel_min)
        v_bar, dv_c = soft_interaction(v_pat, t_tok, chi_c)
        _, dv_ic = soft_interaction(v_pat, t_tok, chi_ic)
        t_bar, dt_c = soft_interaction(t_tok, v_pat, ad.transpose(chi_c, (0, 2, 1)))
        _, dt_ic = soft_interaction(t_tok, v_pat, ad.transpose(chi_ic, (0, 2, 1)))
        if hp.double_residual:
            v_tilde = (v_pat + dv_c) + (v_pat + dv_ic)
            t_tilde = (t_tok + dt_c) + (t_tok + dt_ic)
        else:
            v_tilde = v_pat + dv_c + dv_ic
            t_tilde = t_tok + dt_c + dt_ic
        return {"chi_c": chi_c, "chi_ic": chi_ic, "v_bar": v_bar, "t_bar": t_bar,
                "v_tilde": v_tilde, "t_tilde": t_tilde}

    def _ground_and_heads(self, v_cls3, t_cls3, inter, v_pat, t_tok,
                          fake_v, fake_t):
        """Guided class features, multi-label heads, culled grounding."""
        v_c = self.judgment.guided_cls(v_cls3, inter["v_tilde"], "image")
        t_c = self.judgment.guided_cls(t_cls3, inter["t_tilde"], "text")
        v_ground_src = cull(v_pat, inter["v_tilde"], fake_v, fake_t)
        t_ground_src = cull(t_tok, inter["t_tilde"], fake_t, fake_v)
        b, d = v_c.shape
        gv = self.judgment.ground(ad.reshape(v_c, (b, 1, d)), v_ground_src, "image")
        gt = self.judgment.ground(ad.reshape(t_c, (b, 1, d)), t_ground_src, "text")
        bbox = self.judgment.bbox_pred(gv)
        tok_logits = self.judgment.token_logits(gt, t_ground_src)
        return v_c, t_c, bbox, tok_logits

    # -- training ------------------------------------------------------------

    def forward(self, batch):
        hp = self.hp
        b = len(batch["y_v"])
        v_cls3, v_pat, t_cls3, t_tok = self.encode(batch["patches"], batch["tokens"])
        d = v_cls3.shape[-1]
        v_cls = ad.reshape(v_cls3, (b, d))
        t_cls = ad.reshape(t_cls3, (b, d))

        dec = self.decision.losses(v_cls, t_cls, batch["y_v"], batch["y_t"],
                                   alpha1=hp.alpha1, alpha2=hp.alpha2, tau=hp.tau)

        bands = band_patches(batch["ratios"])
        l_fs = self.mining.feature_level_loss(v_pat, bands, batch["y_pat"],
                                              t_tok, batch["y_tok"])
        g_img = self.mining.image_embeddings(v_pat, batch["y_v"], batch["y_pat"])
        g_txt = self.mining.text_embeddings(t_tok, batch["y_t"], batch["y_tok"])
        if b >= 2:
            l_ss = self.mining.sample_level_loss(g_img, batch["y_v"],
                                                 g_txt, batch["y_t"])
        else:
            log.warning("sample-level contrastive term skipped: batch size %d", b)
            l_ss = Tensor(0.0)
        l_m_v, l_m_t = self.mining.manip_type_loss(
            g_img, batch["y_v"], batch["y_v_m"],
            g_txt, batch["y_t"], batch["y_t_m"])

        inter = self.interact(v_cls, t_cls, v_pat, t_tok)
        if hp.uniform_masks:
            l_tt = l_ff = Tensor(0.0)
        else:
            y_tt, y_ff = self.alignment.region_labels(batch["y_pat"], batch["y_tok"])
            l_tt, l_ff = self.alignment.mask_gen_losses(y_tt, y_ff)
        ic_v = self.alignment.interaction_constraint(
            inter["v_bar"], v_pat, batch["y_pat"], "image")
        ic_t = self.alignment.interaction_constraint(
            inter["t_bar"], t_tok, batch["y_tok"], "text")
        l_ci = l_tt + l_ff + ic_v["l_ic"] + ic_t["l_ic"]

        fake_v = np.asarray(batch["y_v"]) == 1
        fake_t = np.asarray(batch["y_t"]) == 1
        v_c, t_c, bbox, tok_logits = self._ground_and_heads(
            v_cls3, t_cls3, inter, v_pat, t_tok, fake_v, fake_t)
        l_mlc_v, l_mlc_t = self.judgment.multi_label_losses(v_c, t_c,
                                                            batch["y_multi"])
        l_mlc_star = l_mlc_v + l_mlc_t + l_m_v + l_m_t

        idx_fake_img = np.nonzero(fake_v)[0]
        if idx_fake_img.size:
            l_bbox = bbox_loss(ad.take(bbox, idx_fake_img, axis=0),
                               batch["bbox_cxcywh"][idx_fake_img])
        else:
            l_bbox = Tensor(0.0)
        l_tok = token_loss(tok_logits, batch["y_tok"])

        terms = {"l_bic_star": dec["l_bic_star"], "l_fs": l_fs, "l_ss": l_ss,
                 "l_ci": l_ci, "l_mlc_star": l_mlc_star, "l_bbox": l_bbox,
                 "l_tok": l_tok}
        weights = {"l_bic_star": hp.w_bic, "l_fs": hp.w_fs, "l_ss": hp.w_ss,
                   "l_ci": hp.w_ci, "l_mlc_star": hp.w_mlc,
                   "l_bbox": hp.w_bbox, "l_tok": hp.w_tok}
        total = full_objective(terms, weights)

        out = dict(terms)
        out.update({"total": total, "l_bic": dec["l_bic"], "l_mmc": dec["l_mmc"],
                    "l_v_uni": dec["l_v_uni"], "l_t_uni": dec["l_t_uni"],
                    "l_m_v": l_m_v, "l_m_t": l_m_t, "l_tt": l_tt, "l_ff": l_ff,
                    "l_ai_v": ic_v["l_ai"], "l_ni_v": ic_v["l_ni"],
                    "l_ai_t": ic_t["l_ai"], "l_ni_t": ic_t["l_ni"]})
        return out

    # -- inference -----------------------------------------------------------

    def predict(self, batch):
        """Label-free inference outputs; culling uses the thresholded
        unimodal predictions in place of ground truth."""
        with ad.pause_tape():
            b = len(batch["tokens"])
            v_cls3, v_pat, t_cls3, t_tok = self.encode(batch["patches"],
                                                       batch["tokens"])
            d = v_cls3.shape[-1]
            v_cls = ad.reshape(v_cls3, (b, d))
            t_cls = ad.reshape(t_cls3, (b, d))
            pair_logit, img_logit, txt_logit = self.decision.logits(v_cls, t_cls)
            prob_v = ad.sigmoid(img_logit).data
            prob_t = ad.sigmoid(txt_logit).data
            inter = self.interact(v_cls, t_cls, v_pat, t_tok)
            v_c, t_c, bbox, tok_logits = self._ground_and_heads(
                v_cls3, t_cls3, inter, v_pat, t_tok,
                prob_v > 0.5, prob_t > 0.5)
            multi = self.judgment.multi_label_probs(v_c, t_c)
            return {"pair_prob": ad.sigmoid(pair_logit).data,
                    "img_prob": prob_v, "txt_prob": prob_t,
                    "multi_probs": multi.data,
                    "bbox_cxcywh": bbox.data,
                    "token_probs": ad.sigmoid(tok_logits).data}


def bbox_cxcywh_to_xyxy_np(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
