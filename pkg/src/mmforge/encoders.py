"""Trainable stub encoders and the pre-interaction cross-modal stage.

The image encoder maps each raw patch vector through an affine layer and
tanh, adds a learned positional embedding, mixes the patches with one
residual self-attention layer, and summarizes them into a class feature
with an attention layer driven by a learned query. The text encoder is
the same pipeline, minus the mixing layer, with a token-embedding lookup
in place of raw features. Both accept a single sample (2-D patches /
1-D tokens) or a batch (leading batch axis).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import Linear, MultiHeadAttention


class ImageEncoder:
    def __init__(self, rng, grid, d_raw, d_model, heads):
        self.grid = grid
        self.d_raw = d_raw
        self.proj = Linear(rng, d_raw, d_model)
        pos = 0.3 * rng.normal(size=(grid * grid, d_model))
        # seed the leading channels with cell-center coordinate monomials so
        # attention pooling exposes region moments (center from first
        # moments, extent from second); the embedding stays fully trainable
        rows, cols = np.indices((grid, grid)).reshape(2, -1)
        x = (cols + 0.5) / grid
        y = (rows + 0.5) / grid
        coord = np.column_stack([x, y, x * x, y * y, x * y])
        pos[:, :min(coord.shape[1], d_model)] = coord[:, :d_model]
        self.pos = Tensor(pos, requires_grad=True)
        self.mix_attn = MultiHeadAttention(rng, d_model, heads)
        self.cls_query = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(1, d_model)),
            requires_grad=True)
        self.cls_attn = MultiHeadAttention(rng, d_model, heads)

    def __call__(self, patches):
        """patches: (G*G, d_raw) or (B, G*G, d_raw) -> (V_cls, V_pat)."""
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        if patches.shape[-1] != self.d_raw or patches.shape[-2] != self.grid ** 2:
            raise ShapeError(
                f"expected (..., {self.grid ** 2}, {self.d_raw}) patches, "
                f"got {patches.shape}")
        v_pat = ad.tanh(self.proj(patches)) + self.pos
        # one residual self-attention layer so patches can aggregate the
        # spatial context (e.g. region extent) that purely local
        # projections cannot express
        v_pat = v_pat + self.mix_attn(v_pat, v_pat, v_pat)
        v_cls = self.cls_attn(self.cls_query, v_pat, v_pat)
        return v_cls, v_pat

    def named_parameters(self, prefix):
        yield from self.proj.named_parameters(f"{prefix}.proj")
        yield f"{prefix}.pos", self.pos
        yield from self.mix_attn.named_parameters(f"{prefix}.mix_attn")
        yield f"{prefix}.cls_query", self.cls_query
        yield from self.cls_attn.named_parameters(f"{prefix}.cls_attn")


class TextEncoder:
    def __init__(self, rng, seq_len, vocab_size, d_model, heads):
        self.seq_len = seq_len
        self.vocab_size = vocab_size
        self.tok_emb = Tensor(rng.normal(size=(vocab_size, d_model)),
                              requires_grad=True)
        self.proj = Linear(rng, d_model, d_model)
        self.pos = Tensor(0.3 * rng.normal(size=(seq_len, d_model)),
                          requires_grad=True)
        self.cls_query = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(1, d_model)),
            requires_grad=True)
        self.cls_attn = MultiHeadAttention(rng, d_model, heads)

    def __call__(self, tokens):
        """tokens: (L,) or (B, L) integer ids -> (T_cls, T_tok)."""
        tokens = np.asarray(tokens)
        if tokens.shape[-1] != self.seq_len:
            raise ShapeError(f"expected length-{self.seq_len} tokens, got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ShapeError("token id outside vocabulary")
        emb = ad.take(self.tok_emb, tokens.ravel(), axis=0)
        emb = ad.reshape(emb, tokens.shape + (self.tok_emb.shape[1],))
        t_tok = ad.tanh(self.proj(emb)) + self.pos
        t_cls = self.cls_attn(self.cls_query, t_tok, t_tok)
        return t_cls, t_tok

    def named_parameters(self, prefix):
        yield f"{prefix}.tok_emb", self.tok_emb
        yield from self.proj.named_parameters(f"{prefix}.proj")
        yield f"{prefix}.pos", self.pos
        yield f"{prefix}.cls_query", self.cls_query
        yield from self.cls_attn.named_parameters(f"{prefix}.cls_attn")


class PreInteraction:
    """N layers of bidirectional co-attention with residual connections.

    Both directions of one layer read the same input state (simultaneous
    update), so the image->text and text->image paths are symmetric.
    """

    def __init__(self, rng, d_model, heads, n_layers):
        self.v_from_t = [MultiHeadAttention(rng, d_model, heads)
                         for _ in range(n_layers)]
        self.t_from_v = [MultiHeadAttention(rng, d_model, heads)
                         for _ in range(n_layers)]

    def __call__(self, v_seq, t_seq):
        for attn_v, attn_t in zip(self.v_from_t, self.t_from_v):
            v_new = v_seq + attn_v(v_seq, t_seq, t_seq)
            t_new = t_seq + attn_t(t_seq, v_seq, v_seq)
            v_seq, t_seq = v_new, t_new
        return v_seq, t_seq

    def named_parameters(self, prefix):
        for i, layer in enumerate(self.v_from_t):
            yield from layer.named_parameters(f"{prefix}.v_from_t{i}")
        for i, layer in enumerate(self.t_from_v):
            yield from layer.named_parameters(f"{prefix}.t_from_v{i}")
