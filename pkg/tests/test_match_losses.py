import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retext import match_losses as ml
from retext import tensor_engine as te
from retext.errors import BatchError, LossError, ParameterError

from oracles import hardest_positive_brute, soft_targets_brute


def batch_from(z_img, z_txt, labels, grad=False):
    make = te.parameter if grad else te.constant
    return ml.MatchBatch.from_projections(make(np.asarray(z_img, float)), make(np.asarray(z_txt, float)), labels)


def random_batch(seed, n=8, d=6, ids=4, grad=True):
    r = np.random.default_rng(seed)
    labels = r.integers(0, ids, size=n)
    return batch_from(r.normal(size=(n, d)), r.normal(size=(n, d)), labels, grad)


# -- soft targets ----------------------------------------------------------

def test_soft_target_examples():
    st_ = ml.soft_targets([7, 7, 3], 0.6)
    assert np.allclose(st_.q[0], [0.6, 0.4, 0.0]) and st_.q[2].tolist() == [0.0, 0.0, 1.0]
    assert st_.fallback_rows.tolist() == [2]
    assert np.allclose(ml.soft_targets([5, 5, 5], 0.5).q[0], [0.5, 0.25, 0.25])
    distinct = ml.soft_targets([1, 2, 3, 4], 0.6)
    assert np.array_equal(distinct.q, np.eye(4)) and distinct.fallback_rows.tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_soft_targets_reject_alpha(alpha):
    with pytest.raises(ParameterError):
        ml.soft_targets([1, 1], alpha)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=64), st.sampled_from([0.5, 0.6, 0.7]))
def test_soft_targets_match_brute_force(labels, alpha):
    got = ml.soft_targets(labels, alpha)
    q, fallback = soft_targets_brute(labels, alpha)
    assert np.array_equal(got.q, np.array(q))
    assert got.fallback_rows.tolist() == fallback
    assert np.all(np.abs(got.q.sum(axis=1) - 1) <= 1e-12)
    lab = np.array(labels)
    assert np.all(got.q[lab[:, None] != lab[None, :]] == 0.0)


# -- similarity distribution and identity-aware matching ---------------------

def test_similarity_distribution_examples():
    keys = te.constant([[1.0, 0.0], [0.0, 1.0]])
    p = ml.similarity_distribution(te.constant([[1.0, 0.0]]), keys).data
    assert np.allclose(p, [[0.73106, 0.26894]], atol=1e-5)
    p0 = ml.similarity_distribution(te.constant(np.zeros((3, 2))), te.constant(np.eye(3, 2))).data
    assert np.allclose(p0, 1 / 3)
    z = te.constant([[0.3, 0.2]])
    sharp = ml.similarity_distribution(te.constant([[3.0, 2.0]]), keys).data.max()
    assert sharp > ml.similarity_distribution(z, keys).data.max()


def test_im_loss_near_zero_when_p_equals_q():
    alpha = 0.6
    # logits (a, 0) with softmax row [alpha, 1 - alpha]
    a = math.log(alpha / (1 - alpha))
    z_img = np.array([[a, 0.0], [0.0, a]])
    z_txt = np.eye(2)  # normalized keys are the basis vectors
    batch = batch_from(z_img, z_txt, [1, 1])
    l_it = ml._kl_to_targets(te.matmul(batch.z_img, te.transpose(batch.zhat_txt)),
                             ml.soft_targets([1, 1], alpha).q, 1e-8).item()
    assert -2 * 1e-8 < l_it <= 0.0 and abs(l_it) < 1e-6


def test_im_loss_descends_with_distinct_labels():
    b = batch_from(np.random.default_rng(3).normal(size=(6, 5)), np.random.default_rng(4).normal(size=(6, 5)),
                   list(range(6)), grad=True)
    params = [b.z_img, b.z_txt]

    def loss():
        return ml.identity_aware_matching_loss(ml.MatchBatch.from_projections(params[0], params[1], b.labels))
    first = loss()
    first.backward()
    for p in params:
        p.data = p.data - 0.1 * p.grad
    assert loss().item() < first.item()


def test_im_loss_gradient_4x8():
    r = np.random.default_rng(11)
    zi, zt = te.parameter(r.normal(size=(4, 8))), te.parameter(r.normal(size=(4, 8)))
    labels = [0, 0, 1, 2]
    report = te.check_gradients(
        lambda: ml.identity_aware_matching_loss(ml.MatchBatch.from_projections(zi, zt, labels)), [zi, zt])
    assert report.passed


def test_im_loss_needs_two_samples():
    with pytest.raises(BatchError):
        ml.identity_aware_matching_loss(batch_from([[1.0, 0.0]], [[0.0, 1.0]], [0]))


@given(st.integers(0, 10_000))
def test_im_loss_permutation_invariant(seed):
    b = random_batch(seed, grad=False)
    perm = np.random.default_rng(seed + 1).permutation(b.n)
    pb = batch_from(b.z_img.data[perm], b.z_txt.data[perm], b.labels[perm])
    assert abs(ml.identity_aware_matching_loss(b).item() - ml.identity_aware_matching_loss(pb).item()) <= 1e-10


def test_normalize_query_flag_changes_loss():
    b = random_batch(5, grad=False)
    assert ml.identity_aware_matching_loss(b).item() != ml.identity_aware_matching_loss(b, normalize_query=True).item()


# -- structure preserving ------------------------------------------------------

def _hand_batch():
    zi = np.array([[1.0, 0.0], [1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    return batch_from(zi, zi, [0, 0, 0, 1])


def test_sp_hand_examples():
    b = _hand_batch()
    lit = ml.structure_preserving_loss(b, tau=0.1)
    assert lit.meta["hardest"][0] == 2
    i = lit.meta["eligible"].tolist().index(0)
    assert abs(lit.meta["per_anchor"][i] - (-6.0)) <= 1e-6
    nce = ml.structure_preserving_loss(b, tau=0.1, include_positive_in_denominator=True)
    assert abs(nce.meta["per_anchor"][i] - (-math.log(math.exp(6) / (math.exp(6) + 1)))) <= 1e-6
    assert abs(nce.meta["per_anchor"][i] - 0.00248) <= 1e-5


def test_sp_single_anchor_literal():
    zi = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    out = ml.structure_preserving_loss(batch_from(zi, zi, [0, 0, 1]), tau=1.0)
    assert out.meta["per_anchor"][0] == pytest.approx(-1.0, abs=1e-12)


def test_sp_requires_eligible_anchor():
    with pytest.raises(LossError, match="sampler"):
        ml.structure_preserving_loss(batch_from(np.eye(3), np.eye(3), [0, 1, 2]))
    with pytest.raises(LossError):
        ml.structure_preserving_loss(batch_from(np.eye(2), np.eye(2), [4, 4]))


@given(st.integers(2, 64), st.integers(0, 2 ** 31 - 1))
def test_hardest_positive_matches_brute_force(n, seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, max(1, n // 3), size=n).tolist()
    z = r.normal(size=(n, 4))
    if r.random() < 0.3:  # exact duplicates exercise the tie rule
        z[r.integers(n)] = z[0]
    zhat = te.l2_normalize_rows(te.constant(z)).data
    assert ml.hardest_positives(zhat, labels).tolist() == hardest_positive_brute(zhat.tolist(), labels)


def test_hardest_positive_tie_takes_lowest_index():
    zhat = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert ml.hardest_positives(zhat, [0, 0, 0])[0] == 1


@given(st.integers(0, 10_000))
def test_sp_infonce_nonnegative(seed):
    assert ml.structure_preserving_loss(random_batch(seed, grad=False), include_positive_in_denominator=True).item() >= 0


def test_sp_literal_monotone_in_positive_similarity():
    values = []
    for angle in (1.2, 0.8, 0.3):  # the hardest positive moves closer to the anchor
        zi = np.array([[1.0, 0.0], [math.cos(angle), math.sin(angle)], [0.0, -1.0]])
        out = ml.structure_preserving_loss(batch_from(zi, zi, [0, 0, 1]), tau=0.1)
        values.append(out.meta["per_anchor"][0])
    assert np.isfinite(values).all() and values[0] > values[1] > values[2]


# -- CLIP baselines ------------------------------------------------------------

def test_clip_examples():
    same = batch_from(np.ones((2, 2)), np.ones((2, 2)), [0, 1])
    assert ml.clip_loss(same).item() == pytest.approx(math.log(2))
    # sim 1 on the diagonal, -1 off it
    diag = batch_from([[1.0, 0.0], [-1.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]], [0, 1])
    assert ml.clip_loss(diag, temperature=0.01).item() < 1e-8


def test_soft_clip_examples():
    b = random_batch(9, grad=False)
    distinct = batch_from(b.z_img.data, b.z_txt.data, list(range(b.n)))
    assert ml.soft_clip_loss(distinct).item() == ml.clip_loss(distinct).item()
    same = batch_from(np.ones((2, 2)), np.ones((2, 2)), [7, 7])
    assert ml.soft_clip_loss(same, alpha=0.5).item() == pytest.approx(math.log(2))


def test_im_differs_from_clip_variants():
    b = random_batch(12, grad=False)
    distinct = batch_from(b.z_img.data, b.z_txt.data, list(range(b.n)))
    im = ml.identity_aware_matching_loss(distinct, normalize_query=True).item()
    assert im != ml.clip_loss(distinct).item() and im != ml.soft_clip_loss(distinct).item()


@pytest.mark.parametrize("fn", [ml.clip_loss, ml.soft_clip_loss, ml.structure_preserving_loss,
                                ml.identity_aware_matching_loss])
def test_match_loss_gradients(fn):
    b = random_batch(21)
    report = te.check_gradients(lambda: fn(ml.MatchBatch.from_projections(b.z_img, b.z_txt, b.labels)),
                                [b.z_img, b.z_txt])
    assert report.passed


def test_match_batch_validation():
    with pytest.raises(BatchError):
        batch_from(np.ones((3, 2)), np.ones((2, 2)), [0, 1, 2])
    with pytest.raises(BatchError):
        batch_from(np.ones((3, 2)), np.ones((3, 2)), [0, 1])
