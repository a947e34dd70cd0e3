"""Parameterized building blocks: affine layers, MLPs, attention.

The attention checks restate scaled dot-product attention in plain numpy
and pin the structural properties the rest of the model relies on:
softmax over a single key is the identity, keys can be permuted freely,
and an additive -inf mask is equivalent to deleting the masked key.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmforge import autodiff as ad
from mmforge.errors import ShapeError
from mmforge.layers import MLP, Linear, MultiHeadAttention


def mha_numpy(q, k, v, wq, wk, wv, wo, heads):
    """Plain-numpy restatement of multi-head scaled dot-product attention."""
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // heads
    qh = (q @ wq).reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = (k @ wk).reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = (v @ wv).reshape(nk, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ vh
    return out.transpose(1, 0, 2).reshape(nq, d) @ wo


def test_linear_is_affine_map(rng):
    layer = Linear(rng, 5, 3)
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(layer(ad.Tensor(x)).data,
                               x @ layer.w.data + layer.b.data, atol=1e-12)


def test_linear_without_bias(rng):
    layer = Linear(rng, 4, 2, bias=False)
    assert layer.b is None
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(layer(ad.Tensor(x)).data, x @ layer.w.data,
                               atol=1e-12)


def test_mlp_composes_linear_and_activation(rng):
    mlp = MLP(rng, 4, 6, 2, activation="tanh")
    x = rng.normal(size=(5, 4))
    hidden = np.tanh(x @ mlp.fc1.w.data + mlp.fc1.b.data)
    np.testing.assert_allclose(mlp(ad.Tensor(x)).data,
                               hidden @ mlp.fc2.w.data + mlp.fc2.b.data,
                               atol=1e-12)


def test_mlp_relu_activation(rng):
    mlp = MLP(rng, 4, 6, 2, activation="relu")
    x = rng.normal(size=(5, 4))
    hidden = np.maximum(x @ mlp.fc1.w.data + mlp.fc1.b.data, 0.0)
    np.testing.assert_allclose(mlp(ad.Tensor(x)).data,
                               hidden @ mlp.fc2.w.data + mlp.fc2.b.data,
                               atol=1e-12)


def test_mlp_rejects_unknown_activation(rng):
    with pytest.raises(ValueError, match="activation"):
        MLP(rng, 4, 4, 2, activation="gelu")


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadAttention(rng, 10, 3)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_numpy_restatement(rng, heads):
    attn = MultiHeadAttention(rng, 8, heads)
    q = rng.normal(size=(3, 8))
    k = rng.normal(size=(6, 8))
    v = rng.normal(size=(6, 8))
    expected = mha_numpy(q, k, v, attn.wq.data, attn.wk.data, attn.wv.data,
                         attn.wo.data, heads)
    np.testing.assert_allclose(attn(ad.Tensor(q), ad.Tensor(k),
                                    ad.Tensor(v)).data, expected, atol=1e-10)


def test_attention_single_key_returns_its_value_projection(rng):
    """Softmax over one key is 1, so the output is key @ wv @ wo for any
    query."""
    attn = MultiHeadAttention(rng, 8, 2)
    k = rng.normal(size=(1, 8))
    for _ in range(3):
        q = rng.normal(size=(1, 8))
        out = attn(ad.Tensor(q), ad.Tensor(k), ad.Tensor(k))
        np.testing.assert_allclose(out.data, k @ attn.wv.data @ attn.wo.data,
                                   atol=1e-12)


def test_attention_batched_matches_per_sample(rng):
    attn = MultiHeadAttention(rng, 8, 2)
    q = rng.normal(size=(4, 2, 8))
    kv = rng.normal(size=(4, 5, 8))
    batched = attn(ad.Tensor(q), ad.Tensor(kv), ad.Tensor(kv)).data
    for b in range(4):
        single = attn(ad.Tensor(q[b]), ad.Tensor(kv[b]), ad.Tensor(kv[b])).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_attention_broadcasts_shared_query(rng):
    """A (1, d) query against (B, N, d) keys yields one pooled row per
    batch element, equal to attending with that query per sample."""
    attn = MultiHeadAttention(rng, 8, 2)
    q = rng.normal(size=(1, 8))
    kv = rng.normal(size=(3, 5, 8))
    pooled = attn(ad.Tensor(q), ad.Tensor(kv), ad.Tensor(kv)).data
    assert pooled.shape == (3, 1, 8)
    for b in range(3):
        single = attn(ad.Tensor(q), ad.Tensor(kv[b]), ad.Tensor(kv[b])).data
        np.testing.assert_allclose(pooled[b], single, atol=1e-12)


@pytest.mark.invariant
@given(seed=st.integers(0, 200), nk=st.integers(2, 7))
def test_attention_is_permutation_invariant_over_keys(seed, nk):
    rng = np.random.default_rng(seed)
    attn = MultiHeadAttention(rng, 8, 2)
    q = rng.normal(size=(2, 8))
    kv = rng.normal(size=(nk, 8))
    perm = rng.permutation(nk)
    base = attn(ad.Tensor(q), ad.Tensor(kv), ad.Tensor(kv)).data
    shuffled = attn(ad.Tensor(q), ad.Tensor(kv[perm]), ad.Tensor(kv[perm])).data
    np.testing.assert_allclose(shuffled, base, atol=1e-12)


@pytest.mark.invariant
@given(seed=st.integers(0, 200), drop=st.integers(0, 4))
def test_masking_a_key_equals_removing_it(seed, drop):
    rng = np.random.default_rng(seed)
    attn = MultiHeadAttention(rng, 8, 2)
    q = rng.normal(size=(2, 8))
    kv = rng.normal(size=(5, 8))
    mask = np.zeros((1, 2, 5))
    mask[..., drop] = -np.inf
    masked = attn(ad.Tensor(q), ad.Tensor(kv), ad.Tensor(kv),
                  additive_mask=mask).data
    keep = [i for i in range(5) if i != drop]
    removed = attn(ad.Tensor(q), ad.Tensor(kv[keep]), ad.Tensor(kv[keep])).data
    np.testing.assert_allclose(masked, removed, atol=1e-12)


def test_parameter_names_follow_definition_order(rng):
    mlp = MLP(rng, 4, 4, 2)
    assert [n for n, _ in mlp.named_parameters("head")] == [
        "head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"]
    attn = MultiHeadAttention(rng, 8, 2)
    assert [n for n, _ in attn.named_parameters("a")] == [
        "a.wq", "a.wk", "a.wv", "a.wo"]


def test_same_seed_reproduces_weights():
    a = MLP(np.random.default_rng(7), 4, 4, 2)
    b = MLP(np.random.default_rng(7), 4, 4, 2)
    for (_, pa), (_, pb) in zip(a.named_parameters("m"), b.named_parameters("m")):
        assert np.array_equal(pa.data, pb.data)


def test_attention_gradients_reach_all_projections(rng):
    attn = MultiHeadAttention(rng, 8, 2)
    q = ad.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    kv = ad.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    with ad.GradTape() as tape:
        out = attn(q, kv, kv)
        loss = ad.tsum(out * out)
    tape.backward(loss)
    for name, p in attn.named_parameters("a"):
        assert p.grad is not None and np.any(p.grad != 0.0), name
    assert np.any(q.grad != 0.0) and np.any(kv.grad != 0.0)
