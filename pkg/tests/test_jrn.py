import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from muc import autodiff as ad
from muc.autodiff import tensor
from muc.camera import CameraParams
from muc.jrn import (Jrn, ViewFeature, fuse_weighted, hand_group_map, jrn_loss, jrn_scores, rotation_group_map,
                     target_distribution)
from muc.nn import check_gradients


def cams(n):
    return [CameraParams.look_at([3 * np.cos(a), 3 * np.sin(a), 1.2], [0, 0, 1]) for a in np.linspace(0, 5, n)]


def feats(n, seed=0):
    rng = np.random.default_rng(seed)
    return [ViewFeature(rng.normal(size=32), rng.normal(size=16)) for _ in range(n)]


def random_jrn(seed=0):
    net = Jrn(seed=seed)
    rng = np.random.default_rng(seed + 10)
    for p in net.params.values():
        p.data = rng.normal(0, 0.3, p.shape)
    return net


def brute_force_fuse(stack, scores, group):
    n, p = stack.shape
    out = np.zeros(p)
    for j in range(p):
        num = den = 0.0
        for c in range(n):
            num += stack[c, j] * scores[c, group[j]]
            den += scores[c, group[j]]
        out[j] = num / den
    return out


# -- scores -------------------------------------------------------------------
def test_single_view_row_shape_and_positive():
    s = jrn_scores(random_jrn(), feats(1), cams(1))
    assert s.body_scores.shape == (1, 21) and s.hand_scores.shape == (1, 4)
    assert np.all(s.body_scores > 0) and np.all(s.hand_scores > 0)


def test_duplicated_view_identical_rows():
    f, c = feats(1), cams(1)
    s = jrn_scores(random_jrn(), f * 3, c * 3)
    assert np.array_equal(s.body_scores[0], s.body_scores[2])
    assert np.array_equal(s.hand_scores[0], s.hand_scores[1])


def test_untrained_scores_are_uniform():
    s = jrn_scores(Jrn(), feats(4), cams(4))
    np.testing.assert_allclose(s.body_scores, np.log(2.0), atol=1e-15)


def test_per_hand_mode():
    net = Jrn(hand_mode="hand")
    assert jrn_scores(net, feats(2), cams(2)).hand_scores.shape == (2, 2)
    assert hand_group_map(2, "hand").tolist() == [0, 0, 1, 1]
    with pytest.raises(ValueError):
        hand_group_map(2, "finger")


def test_feature_length_mismatch():
    with pytest.raises(ValueError):
        jrn_scores(Jrn(), [ViewFeature(np.zeros(31), np.zeros(16))], cams(1))
    with pytest.raises(ValueError):
        jrn_scores(Jrn(), feats(2), cams(1))


# -- fusion --------------------------------------------------------------------
def test_weighted_example():
    out = fuse_weighted(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [3.0]]), [0, 0])
    np.testing.assert_allclose(out, [2.5, 3.5], atol=1e-15)


def test_equal_scores_give_mean():
    stack = np.random.default_rng(0).normal(size=(5, 9))
    np.testing.assert_allclose(fuse_weighted(stack, np.full((5, 3), 0.7), rotation_group_map([0, 1, 2])),
                               stack.mean(0), atol=1e-14)


def test_dominant_view_limit():
    stack = np.array([[1.0, -2.0, 0.5], [7.0, 8.0, 9.0]])
    out = fuse_weighted(stack, np.array([[1.0], [1e-12]]), [0, 0, 0])
    np.testing.assert_allclose(out, stack[0], atol=1e-10)


def test_fuse_rejects_bad_inputs():
    stack = np.ones((2, 3))
    with pytest.raises(ValueError):
        fuse_weighted(stack, np.array([[1.0], [0.0]]), [0, 0, 0])
    with pytest.raises(ValueError):
        fuse_weighted(stack, np.array([[1.0], [1.0]]), [0, 1, 0])
    with pytest.raises(ValueError):
        fuse_weighted(stack, np.array([[1.0], [1.0]]), [0, 0])


def test_brute_force_oracle_many_draws():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        n, g = rng.integers(1, 6), rng.integers(1, 5)
        group = rng.integers(0, g, size=rng.integers(1, 8))
        stack = rng.normal(size=(n, len(group)))
        scores = rng.uniform(0.01, 5.0, size=(n, g))
        worst = max(worst, np.abs(fuse_weighted(stack, scores, group) - brute_force_fuse(stack, scores, group)).max())
    assert worst < 1e-9


@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 2), elements=st.floats(0.01, 10)), st.floats(1e-3, 1e3))
def test_idempotence_and_scale_invariance(stack, scores, c):
    group = [0, 0, 0, 1, 1, 1]
    same = np.tile(stack[0], (4, 1))
    np.testing.assert_allclose(fuse_weighted(same, scores, group), stack[0], atol=1e-12)
    np.testing.assert_allclose(fuse_weighted(stack, scores * c, group), fuse_weighted(stack, scores, group),
                               atol=1e-12)


def test_tensor_and_array_paths_agree():
    rng = np.random.default_rng(2)
    stack, scores = rng.normal(size=(3, 2, 6)), rng.uniform(0.1, 2, (3, 2, 2))
    group = [0, 0, 0, 1, 1, 1]
    a = fuse_weighted(stack, scores, group)
    b = fuse_weighted(tensor(stack), tensor(scores), group).data
    np.testing.assert_allclose(a, b, atol=1e-14)


# -- target distribution and KL --------------------------------------------------
def test_target_two_cameras():
    q = target_distribution(np.array([[0.0], [1.0]]), temperature=1.0)
    np.testing.assert_allclose(q[:, 0], [np.e / (np.e + 1), 1 / (np.e + 1)], atol=1e-12)
    np.testing.assert_allclose(q[:, 0], [0.7311, 0.2689], atol=1e-4)


def test_target_equidistant_uniform_and_cold_limit():
    np.testing.assert_allclose(target_distribution(np.full((4, 3), 0.3)), 0.25, atol=1e-15)
    q = target_distribution(np.array([[0.2], [0.0], [1.0]]), temperature=1e-4)
    np.testing.assert_allclose(q[:, 0], [0, 1, 0], atol=1e-12)
    with pytest.raises(ValueError):
        target_distribution(np.zeros((2, 1)), 0.0)


def test_kl_identity_is_zero():
    z = np.random.default_rng(0).normal(size=(4, 21))
    p = np.exp(z) / np.exp(z).sum(0)
    assert abs(jrn_loss(z, p)) < 1e-12


def test_kl_closed_form():
    logits = np.zeros((2, 1))
    assert abs(jrn_loss(logits, np.array([[0.25], [0.75]])) - 0.14384) < 1e-5
    np.testing.assert_allclose(jrn_loss(logits, np.array([[0.25], [0.75]])),
                               0.5 * np.log(2) + 0.5 * np.log(2 / 3), atol=1e-15)


def test_kl_nonnegative_many_draws():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = rng.integers(2, 6)
        z = rng.normal(0, 3, (n, 5))
        q = rng.dirichlet(np.ones(n), size=5).T
        assert jrn_loss(z, q) >= -1e-15


def test_kl_clamps_zero_targets():
    val = jrn_loss(np.zeros((2, 1)), np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(val, 0.5 * np.log(0.5) + 0.5 * np.log(0.5 / 1e-12), rtol=1e-12)


def test_kl_shift_invariance():
    z = np.random.default_rng(1).normal(size=(3, 21))
    q = target_distribution(np.random.default_rng(2).uniform(size=(3, 21)))
    assert jrn_loss(z, q) == pytest.approx(jrn_loss(z + 4.0, q), abs=1e-13)


def test_kl_gradient_through_score_head():
    net = random_jrn(3)
    f, c = feats(3, 1), cams(3)
    from muc.camera import camera_condition_vector
    task = np.stack([x.task_feature for x in f])
    hand = np.stack([x.hand_feature for x in f])
    cond = np.stack([camera_condition_vector(x) for x in c])
    q = target_distribution(np.random.default_rng(4).uniform(size=(3, 21)))

    def loss():
        bl, _ = net.logits(task, hand, cond)
        return jrn_loss(bl, q)

    errs = check_gradients(loss, net.body.params)
    assert max(errs.values()) < 1e-4, errs
    assert isinstance(loss(), ad.Tensor)
