"""Stub encoders and the cross-modal pre-interaction stage.

Checks the feature layout (class row + sequence features), input
validation, the coordinate content of the image positional embedding,
and the structural properties of the co-attention stage (residual
passthrough when projections are zeroed, simultaneous two-way update).
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmforge import autodiff as ad
from mmforge.autodiff import Tensor
from mmforge.encoders import ImageEncoder, PreInteraction, TextEncoder
from mmforge.errors import ShapeError

GRID, D_RAW, D_MODEL, HEADS, SEQ, VOCAB = 4, 6, 16, 2, 5, 11


@pytest.fixture
def image_enc(rng):
    return ImageEncoder(rng, GRID, D_RAW, D_MODEL, HEADS)


@pytest.fixture
def text_enc(rng):
    return TextEncoder(rng, SEQ, VOCAB, D_MODEL, HEADS)


def test_image_encoder_shapes_single_and_batch(image_enc, rng):
    v_cls, v_pat = image_enc(rng.normal(size=(GRID * GRID, D_RAW)))
    assert v_cls.shape == (1, D_MODEL)
    assert v_pat.shape == (GRID * GRID, D_MODEL)
    v_cls, v_pat = image_enc(rng.normal(size=(3, GRID * GRID, D_RAW)))
    assert v_cls.shape == (3, 1, D_MODEL)
    assert v_pat.shape == (3, GRID * GRID, D_MODEL)


def test_image_encoder_rejects_wrong_patch_shape(image_enc, rng):
    with pytest.raises(ShapeError):
        image_enc(rng.normal(size=(GRID * GRID, D_RAW + 1)))
    with pytest.raises(ShapeError):
        image_enc(rng.normal(size=(GRID * GRID - 1, D_RAW)))


def test_image_patch_features_are_projection_plus_position(image_enc, rng):
    """With the mixing layer's output projection zeroed, patch features
    reduce to tanh-projected patches plus the positional embedding."""
    image_enc.mix_attn.wo.data[:] = 0.0
    patches = rng.normal(size=(GRID * GRID, D_RAW))
    _, v_pat = image_enc(patches)
    expected = (np.tanh(patches @ image_enc.proj.w.data
                        + image_enc.proj.b.data) + image_enc.pos.data)
    np.testing.assert_allclose(v_pat.data, expected, atol=1e-12)


def test_positional_channels_carry_cell_center_monomials(image_enc):
    """Leading positional channels hold [x, y, x^2, y^2, xy] at cell
    centers, row-major, so attention pooling exposes region moments."""
    rows, cols = np.indices((GRID, GRID)).reshape(2, -1)
    x = (cols + 0.5) / GRID
    y = (rows + 0.5) / GRID
    coord = np.column_stack([x, y, x * x, y * y, x * y])
    np.testing.assert_array_equal(image_enc.pos.data[:, :5], coord)


@pytest.mark.invariant
@given(seed=st.integers(0, 100))
def test_class_feature_permutation_invariant_without_positions(seed):
    """With the positional embedding zeroed, shuffling patches must not
    change the pooled class feature (attention is a set operation)."""
    rng = np.random.default_rng(seed)
    enc = ImageEncoder(rng, GRID, D_RAW, D_MODEL, HEADS)
    enc.pos.data[:] = 0.0
    patches = rng.normal(size=(GRID * GRID, D_RAW))
    perm = rng.permutation(GRID * GRID)
    base, _ = enc(patches)
    shuffled, _ = enc(patches[perm])
    np.testing.assert_allclose(shuffled.data, base.data, atol=1e-12)


def test_text_encoder_shapes_and_validation(text_enc, rng):
    tokens = rng.integers(0, VOCAB, size=SEQ)
    t_cls, t_tok = text_enc(tokens)
    assert t_cls.shape == (1, D_MODEL)
    assert t_tok.shape == (SEQ, D_MODEL)
    t_cls, t_tok = text_enc(rng.integers(0, VOCAB, size=(4, SEQ)))
    assert t_cls.shape == (4, 1, D_MODEL)
    assert t_tok.shape == (4, SEQ, D_MODEL)
    with pytest.raises(ShapeError):
        text_enc(rng.integers(0, VOCAB, size=SEQ + 2))
    with pytest.raises(ShapeError):
        text_enc(np.full(SEQ, VOCAB))
    with pytest.raises(ShapeError):
        text_enc(np.full(SEQ, -1))


def test_equal_tokens_differ_only_by_position(text_enc):
    tokens = np.array([3, 3, 3, 7, 7])
    _, t_tok = text_enc(tokens)
    depositioned = t_tok.data - text_enc.pos.data
    np.testing.assert_allclose(depositioned[0], depositioned[1], atol=1e-12)
    np.testing.assert_allclose(depositioned[3], depositioned[4], atol=1e-12)
    assert not np.allclose(depositioned[0], depositioned[3])


def test_all_encoder_parameters_receive_gradient(rng):
    img = ImageEncoder(rng, GRID, D_RAW, D_MODEL, HEADS)
    txt = TextEncoder(rng, SEQ, VOCAB, D_MODEL, HEADS)
    patches = rng.normal(size=(2, GRID * GRID, D_RAW))
    tokens = np.arange(VOCAB)[rng.integers(0, VOCAB, size=(2, SEQ))]
    with ad.GradTape() as tape:
        v_cls, v_pat = img(patches)
        t_cls, t_tok = txt(tokens)
        loss = (ad.tsum(v_cls * v_cls) + ad.tsum(v_pat * v_pat)
                + ad.tsum(t_cls * t_cls) + ad.tsum(t_tok * t_tok))
    tape.backward(loss)
    for name, p in [*img.named_parameters("img"), *txt.named_parameters("txt")]:
        assert p.grad is not None and np.any(p.grad != 0.0), name


def test_pre_interaction_preserves_shapes(rng):
    stage = PreInteraction(rng, D_MODEL, HEADS, n_layers=2)
    v = rng.normal(size=(3, 7, D_MODEL))
    t = rng.normal(size=(3, 5, D_MODEL))
    v2, t2 = stage(Tensor(v), Tensor(t))
    assert v2.shape == v.shape and t2.shape == t.shape


def test_pre_interaction_zero_layers_is_identity(rng):
    stage = PreInteraction(rng, D_MODEL, HEADS, n_layers=0)
    v = Tensor(rng.normal(size=(2, 4, D_MODEL)))
    t = Tensor(rng.normal(size=(2, 3, D_MODEL)))
    v2, t2 = stage(v, t)
    assert v2 is v and t2 is t


def test_pre_interaction_zero_output_projection_is_identity(rng):
    """Residual form: if every wo is zeroed the stage passes both
    sequences through unchanged."""
    stage = PreInteraction(rng, D_MODEL, HEADS, n_layers=2)
    for layer in (*stage.v_from_t, *stage.t_from_v):
        layer.wo.data[:] = 0.0
    v = rng.normal(size=(2, 4, D_MODEL))
    t = rng.normal(size=(2, 3, D_MODEL))
    v2, t2 = stage(Tensor(v), Tensor(t))
    np.testing.assert_allclose(v2.data, v, atol=1e-12)
    np.testing.assert_allclose(t2.data, t, atol=1e-12)


def test_pre_interaction_update_is_simultaneous(rng):
    """Both directions of one layer read the same input state: the text
    update must use the pre-update image sequence, not the fresh one."""
    stage = PreInteraction(rng, D_MODEL, HEADS, n_layers=1)
    v = rng.normal(size=(1, 4, D_MODEL))
    t = rng.normal(size=(1, 3, D_MODEL))
    v2, t2 = stage(Tensor(v), Tensor(t))
    attn_v, attn_t = stage.v_from_t[0], stage.t_from_v[0]
    expect_t = t + attn_t(Tensor(t), Tensor(v), Tensor(v)).data
    np.testing.assert_allclose(t2.data, expect_t, atol=1e-12)
    staged_t = t + attn_t(Tensor(t), v2, v2).data
    assert not np.allclose(t2.data, staged_t)


def test_encoder_construction_is_deterministic():
    a = ImageEncoder(np.random.default_rng(5), GRID, D_RAW, D_MODEL, HEADS)
    b = ImageEncoder(np.random.default_rng(5), GRID, D_RAW, D_MODEL, HEADS)
    for (_, pa), (_, pb) in zip(a.named_parameters("e"), b.named_parameters("e")):
        assert np.array_equal(pa.data, pb.data)
