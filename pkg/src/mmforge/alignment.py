"""Cross-modal alignment reasoning: global-similarity-guided selection,
learnable region masks, soft-masked cross-attention, and interaction
constraints.

Patch-token similarity maps are compared against the pair's global
similarity to pick consistent (above) and inconsistent (below) entries;
each selection is padded up to a floor of k entries with the best remaining
values, ties broken by row-major position. The learnable logit maps g_tt /
g_ff are trained toward "both real" / "both fake" region labels and gate
the selected similarities into the soft attention masks chi_c / chi_ic.
The interaction constraint scores the same detector head on features
before and after interaction and penalizes interaction making things worse.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, ShapeError
from .layers import MLP

SEL_MAX = "max"
SEL_MIN = "min"


def build_selection(s_g, s_pt, k, mode):
    """Sparse copy of ``s_pt`` keeping entries above (max) / below (min)
    the per-pair global similarity, padded to at least k entries.

    s_g: (B,) Tensor or array; s_pt: (B, P, L) Tensor. Returns
    (selected Tensor, support bool array, natural counts). Gradients flow
    through the kept entries only; the support itself is non-differentiable.
    """
    thresh = s_g.data if isinstance(s_g, Tensor) else np.asarray(s_g)
    vals = s_pt.data
    if mode not in (SEL_MAX, SEL_MIN):
        raise DegenerateInputError(f"unknown selection mode {mode!r}")
    b, p, l = vals.shape
    size = p * l
    if not 0 <= k <= size:
        raise DegenerateInputError(f"selection floor k={k} outside [0, {size}]")
    support = np.zeros((b, p, l), dtype=bool)
    n_natural = np.zeros(b, dtype=int)
    for i in range(b):
        flat = vals[i].ravel()
        natural = flat > thresh[i] if mode == SEL_MAX else flat < thresh[i]
        n1 = int(natural.sum())
        n_natural[i] = n1
        keep = natural.copy()
        if n1 < k:
            # stable sort on row-major flats realizes the (row, col) tie-break
            order = np.argsort(-flat if mode == SEL_MAX else flat, kind="stable")
            order = order[~natural[order]]
            keep[order[:k - n1]] = True
        support[i] = keep.reshape(p, l)
    selected = s_pt * Tensor(support.astype(float))
    return selected, support, n_natural


def soft_interaction(feats, other, chi):
    """feats + cross-attention to ``other`` with Hadamard-masked weights.

    Returns (attended, delta) where attended = feats + delta and
    delta = [softmax(feats other^T / sqrt(d)) * chi] other. Rows are not
    renormalized after masking; chi scales attention directly.
    """
    d = feats.shape[-1]
    if other.shape[-1] != d:
        raise ShapeError(f"model dims differ: {feats.shape} vs {other.shape}")
    if chi.shape[-2:] != (feats.shape[-2], other.shape[-2]):
        raise ShapeError(f"mask shape {chi.shape} does not match "
                         f"{feats.shape[-2]}x{other.shape[-2]}")
    scores = (feats @ ad.swap_last(other)) * (1.0 / math.sqrt(d))
    weights = ad.softmax(scores, axis=-1) * chi
    delta = weights @ other
    return feats + delta, delta


class AlignmentModule:
    def __init__(self, rng, d_model, grid_sq, seq_len, k, alpha3=0.5, eta=1.0):
        self.k = k
        self.alpha3 = alpha3
        self.eta = eta
        self.mlp_v = MLP(rng, d_model, d_model, d_model)
        self.mlp_t = MLP(rng, d_model, d_model, d_model)
        self.g_tt = Tensor(0.1 * rng.normal(size=(grid_sq, seq_len)),
                           requires_grad=True)
        self.g_ff = Tensor(0.1 * rng.normal(size=(grid_sq, seq_len)),
                           requires_grad=True)
        self.det_v = MLP(rng, d_model, d_model, 1)
        self.det_t = MLP(rng, d_model, d_model, 1)

    def named_parameters(self, prefix):
        yield from self.mlp_v.named_parameters(f"{prefix}.mlp_v")
        yield from self.mlp_t.named_parameters(f"{prefix}.mlp_t")
        yield f"{prefix}.g_tt", self.g_tt
        yield f"{prefix}.g_ff", self.g_ff
        yield from self.det_v.named_parameters(f"{prefix}.det_v")
        yield from self.det_t.named_parameters(f"{prefix}.det_t")

    def global_guidance(self, v_cls, t_cls, v_pat, t_tok):
        """Global and fine-grained cosine maps through shared projections,
        affinely rescaled s -> 1 + s/2 onto [0.5, 1.5]."""
        s_g = ad.cosine_similarity(self.mlp_v(v_cls), self.mlp_t(t_cls), axis=-1)
        pv = self.mlp_v(v_pat)
        pt = self.mlp_t(t_tok)
        if np.any(np.linalg.norm(pv.data, axis=-1) < 1e-12) or \
           np.any(np.linalg.norm(pt.data, axis=-1) < 1e-12):
            raise DegenerateInputError("global_guidance: zero-norm projection")
        nv = ad.sqrt(ad.tsum(pv * pv, axis=-1, keepdims=True))
        nt = ad.sqrt(ad.tsum(pt * pt, axis=-1, keepdims=True))
        dots = pv @ ad.swap_last(pt)
        s_pt = dots / (nv * ad.swap_last(nt))
        return 1.0 + s_g * 0.5, 1.0 + s_pt * 0.5

    def region_labels(self, y_pat, y_tok):
        """y_tt[i,j] = both positions real; y_ff[i,j] = both forged."""
        y_pat = np.asarray(y_pat, dtype=np.float64)
        y_tok = np.asarray(y_tok, dtype=np.float64)
        y_tt = (1.0 - y_pat)[:, :, None] * (1.0 - y_tok)[:, None, :]
        y_ff = y_pat[:, :, None] * y_tok[:, None, :]
        return y_tt, y_ff

    def mask_gen_losses(self, y_tt, y_ff):
        b = y_tt.shape[0]
        lift = Tensor(np.zeros((b, 1, 1)))
        l_tt = ad.bce_mean(self.g_tt + lift, Tensor(y_tt))
        l_ff = ad.bce_mean(self.g_ff + lift, Tensor(y_ff))
        return l_tt, l_ff

    def build_masks(self, s_max, s_min):
        p_tt = ad.sigmoid(self.g_tt)
        p_ff = ad.sigmoid(self.g_ff)
        chi_c = s_max * (p_tt + self.alpha3 * p_ff)
        g_tf = ad.clamp(1.0 - p_tt - p_ff, 0.0, 1.0)
        chi_ic = s_min * (g_tf + self.alpha3 * p_ff)
        return chi_c, chi_ic

    def interaction_constraint(self, after, before, flags, side):
        """Detector BCE on post- vs pre-interaction features with a hinge
        penalizing interaction that hurts: l_ai + l_ni + eta*relu(l_ai-l_ni).

        The same head scores both feature sets, so the two losses are
        directly comparable. Rarity weights are pooled over the batch so
        genuine samples still contribute real-position supervision.
        """
        head = self.det_v if side == "image" else self.det_t
        flags = np.asarray(flags, dtype=np.float64)
        b, n = flags.shape
        n1 = flags.sum()
        n0 = b * n - n1
        total = b * n
        w = np.where(flags == 1, 2.0 * n0 / total, 2.0 * n1 / total) / total
        y = Tensor(flags)
        logits_after = ad.reshape(head(after), (b, n))
        logits_before = ad.reshape(head(before), (b, n))
        l_ai = ad.tsum(Tensor(w) * ad.bce_with_logits(logits_after, y))
        l_ni = ad.tsum(Tensor(w) * ad.bce_with_logits(logits_before, y))
        l_ic = l_ai + l_ni + self.eta * ad.relu(l_ai - l_ni)
        return {"l_ai": l_ai, "l_ni": l_ni, "l_ic": l_ic}
