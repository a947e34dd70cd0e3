"""Decision-correction tests: pair partitioning, the contrastive correction
with its brute-force oracle and stop-gradient semantics, and the corrected
binary objective."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmforge import autodiff as ad
from mmforge.autodiff import Tensor
from mmforge.decision import (
    EFF_IMAGE,
    EFF_NONE,
    EFF_TEXT,
    NEGATIVE,
    POSITIVE,
    SEMI,
    DecisionHeads,
    PairPartition,
    mmc_loss,
    partition_pairs,
    unimodal_loss,
)
from mmforge.errors import DegenerateInputError

TAU = 0.07


# ---------------------------------------------------------------------------
# partitioning


def test_partition_four_basic_cases():
    prob_v = np.array([0.9, 0.9, 0.2, 0.2])
    prob_t = np.array([0.1, 0.8, 0.9, 0.9])
    y_v = np.array([1, 1, 1, 1])
    y_t = np.array([0, 0, 1, 0])
    part = partition_pairs(prob_v, prob_t, y_v, y_t)
    np.testing.assert_array_equal(part.category,
                                  [POSITIVE, SEMI, SEMI, NEGATIVE])
    np.testing.assert_array_equal(part.effective,
                                  [EFF_NONE, EFF_IMAGE, EFF_TEXT, EFF_NONE])


def test_partition_half_probability_counts_incorrect():
    part = partition_pairs(np.array([0.5, 0.5]), np.array([0.9, 0.9]),
                           np.array([0, 1]), np.array([1, 1]))
    np.testing.assert_array_equal(part.category, [SEMI, SEMI])
    np.testing.assert_array_equal(part.effective, [EFF_TEXT, EFF_TEXT])


def test_partition_rejects_nonbinary_labels():
    with pytest.raises(DegenerateInputError):
        partition_pairs(np.array([0.9]), np.array([0.9]),
                        np.array([2]), np.array([1]))


def test_pair_partition_validates_effective_marking():
    with pytest.raises(AssertionError):
        PairPartition(category=np.array([POSITIVE]),
                      effective=np.array([EFF_IMAGE]))
    with pytest.raises(AssertionError):
        PairPartition(category=np.array([SEMI]),
                      effective=np.array([EFF_NONE]))


# ---------------------------------------------------------------------------
# contrastive correction


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def mmc_brute_force(rv, rt, category, tau):
    sims = np.array([_cos(rv[i], rt[i]) / tau for i in range(len(rv))])
    ps = sims[np.asarray(category) != NEGATIVE]
    return np.logaddexp.reduce(sims) - np.logaddexp.reduce(ps)


def _random_partition(rng, n):
    while True:
        category = rng.integers(0, 3, size=n)
        if (category != NEGATIVE).any():
            break
    effective = np.where(category == SEMI, rng.integers(0, 2, size=n),
                         EFF_NONE)
    return PairPartition(category=category, effective=effective)


def test_mmc_matches_brute_force_oracle(rng):
    for _ in range(120):
        n = int(rng.integers(1, 9))
        rv = rng.normal(size=(n, 5))
        rt = rng.normal(size=(n, 5))
        part = _random_partition(rng, n)
        got = mmc_loss(Tensor(rv), Tensor(rt), part, tau=TAU).data
        want = mmc_brute_force(rv, rt, part.category, TAU)
        assert got == pytest.approx(want, abs=1e-10)


def test_mmc_equal_sims_positive_negative_pair():
    # identical representations: both sims = 1/tau, one P one N -> ln 2
    rv = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
    part = PairPartition(category=np.array([POSITIVE, NEGATIVE]),
                         effective=np.array([EFF_NONE, EFF_NONE]))
    got = mmc_loss(rv, rv, part, tau=TAU).data
    assert got == pytest.approx(np.log(2.0), abs=1e-12)


def test_mmc_all_ps_is_zero(rng):
    n = 4
    rv = Tensor(rng.normal(size=(n, 3)))
    rt = Tensor(rng.normal(size=(n, 3)))
    part = PairPartition(category=np.full(n, POSITIVE),
                         effective=np.full(n, EFF_NONE))
    assert mmc_loss(rv, rt, part, tau=TAU).data == 0.0


def test_mmc_requires_ps_pair(rng):
    rv = Tensor(rng.normal(size=(2, 3)))
    part = PairPartition(category=np.full(2, NEGATIVE),
                         effective=np.full(2, EFF_NONE))
    with pytest.raises(DegenerateInputError, match="no Positive"):
        mmc_loss(rv, rv, part, tau=TAU)


def test_mmc_stop_gradient_on_effective_side(rng):
    rv = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    rt = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    part = PairPartition(category=np.array([SEMI, SEMI, NEGATIVE]),
                         effective=np.array([EFF_IMAGE, EFF_TEXT, EFF_NONE]))
    with ad.GradTape() as tape:
        tape.watch(rv)
        tape.watch(rt)
        tape.backward(mmc_loss(rv, rt, part, tau=TAU))
    # item 0: image effective -> no gradient reaches r_v[0]; text side moves
    assert np.all(rv.grad[0] == 0.0) and np.any(rt.grad[0] != 0.0)
    # item 1: text effective -> mirrored
    assert np.any(rv.grad[1] != 0.0) and np.all(rt.grad[1] == 0.0)
    # negative item keeps both gradients (appears in the denominator)
    assert np.any(rv.grad[2] != 0.0) and np.any(rt.grad[2] != 0.0)


@pytest.mark.invariant
@given(st.integers(0, 2**32 - 1))
def test_mmc_invariant_under_item_permutation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    rv = rng.normal(size=(n, 4))
    rt = rng.normal(size=(n, 4))
    part = _random_partition(rng, n)
    perm = rng.permutation(n)
    a = mmc_loss(Tensor(rv), Tensor(rt), part, tau=TAU).data
    b = mmc_loss(Tensor(rv[perm]), Tensor(rt[perm]),
                 PairPartition(category=part.category[perm],
                               effective=part.effective[perm]), tau=TAU).data
    assert b == pytest.approx(a, abs=1e-12)


@pytest.mark.invariant
@given(st.integers(0, 2**32 - 1))
def test_mmc_nonnegative(seed):
    # the P/S subset is contained in the full batch, so den >= num
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    rv = rng.normal(size=(n, 4))
    rt = rng.normal(size=(n, 4))
    part = _random_partition(rng, n)
    assert mmc_loss(Tensor(rv), Tensor(rt), part, tau=TAU).data >= 0.0


# ---------------------------------------------------------------------------
# corrected binary objective


def _zeroed_heads(rng, d=8, d_r=4):
    heads = DecisionHeads(rng, d, d_r)
    for layer in (heads.img_head, heads.txt_head):
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    for layer in (heads.pair_head.fc1, heads.pair_head.fc2):
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    return heads


def test_zero_logits_give_three_ln_two(rng, caplog):
    heads = _zeroed_heads(rng)
    v = Tensor(rng.normal(size=(4, 8)))
    t = Tensor(rng.normal(size=(4, 8)))
    y = np.array([0, 1, 0, 1])
    with caplog.at_level("WARNING"):
        out = heads.losses(v, t, y, y, alpha1=1.0, alpha2=0.25)
    # probabilities sit exactly at 0.5 -> every pair Negative -> mmc skipped
    assert any("mmc_loss skipped" in r.message for r in caplog.records)
    assert out["l_mmc"].data == 0.0
    assert out["l_bic_star"].data == pytest.approx(3 * np.log(2.0), abs=1e-12)


def test_losses_compose_linearly(rng):
    heads = DecisionHeads(rng, 8, 4)
    v = Tensor(rng.normal(size=(5, 8)))
    t = Tensor(rng.normal(size=(5, 8)))
    y_v = np.array([0, 1, 1, 0, 1])
    y_t = np.array([0, 0, 1, 1, 0])
    a1, a2 = 0.7, 0.3
    out = heads.losses(v, t, y_v, y_t, alpha1=a1, alpha2=a2)
    want = (out["l_bic"].data + a1 * (out["l_v_uni"].data + out["l_t_uni"].data)
            + a2 * out["l_mmc"].data)
    assert out["l_bic_star"].data == pytest.approx(want, abs=1e-12)
    assert out["partition"].category.shape == (5,)


def test_pair_label_is_or_of_modalities(rng):
    heads = DecisionHeads(rng, 8, 4)
    v = Tensor(rng.normal(size=(3, 8)))
    t = Tensor(rng.normal(size=(3, 8)))
    y_v = np.array([1, 0, 0])
    y_t = np.array([0, 0, 1])
    out = heads.losses(v, t, y_v, y_t, alpha1=0.5, alpha2=0.25)
    logits = out["pair_logit"].data
    y_pair = np.array([1.0, 0.0, 1.0])
    want = np.mean(y_pair * np.logaddexp(0, -logits)
                   + (1 - y_pair) * np.logaddexp(0, logits))
    assert out["l_bic"].data == pytest.approx(want, abs=1e-12)


def test_unimodal_loss_validates_labels(rng):
    with pytest.raises(DegenerateInputError, match="0/1"):
        unimodal_loss(Tensor(rng.normal(size=3)), np.array([0, 1, 2]))
