"""Loss-function tests.

The CTC forward is checked against an exhaustive path-enumeration
oracle in extended precision, and its hand-written backward against
central differences plus the per-frame posterior-mass invariant.
"""

import itertools

import mpmath as mp
import numpy as np
import pytest

from minis2s import tensor as T
from minis2s.errors import (DimensionError, ImpossibleAlignmentError)
from minis2s.losses import (LossReport, ctc_log_likelihood, ctc_min_frames,
                            expand_with_blanks, guided_attention_loss,
                            guided_attention_weight, joint_asr_loss,
                            s2s_cross_entropy, tts_l1, tts_total_loss,
                            weighted_bce)
from minis2s.tensor import Tensor, backward, grad_check

mp.mp.dps = 50


def rand_logprobs(rng, t, v):
    logits = Tensor(rng.standard_normal((t, v)), requires_grad=True)
    return logits, T.log_softmax(logits)


# -- cross-entropy ------------------------------------------------------------


def test_ce_uniform_vocab4():
    lp = Tensor(np.full((3, 4), np.log(0.25)))
    loss = s2s_cross_entropy(lp, [0, 2, 3])
    assert abs(loss.item() - 1.3862943611198906188) < 1e-12


def test_ce_matches_extended_precision():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 5))
    targets = [4, 0, 2]
    _, lp = rand_logprobs(np.random.default_rng(0), 3, 5)
    want = mp.mpf(0)
    for i, y in enumerate(targets):
        zs = [mp.mpf(float(z)) for z in logits[i]]
        lse = mp.log(mp.fsum(mp.e**z for z in zs))
        want += -(zs[y] - lse)
    want /= 3
    got = s2s_cross_entropy(lp, targets).item()
    assert abs(got - float(want)) < 1e-12


def test_ce_row_count_mismatch():
    lp = Tensor(np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        s2s_cross_entropy(lp, [1, 2])


def test_ce_denom_replaces_length():
    rng = np.random.default_rng(1)
    _, lp = rand_logprobs(rng, 4, 6)
    mean = s2s_cross_entropy(lp, [1, 2, 3, 2])
    summed = s2s_cross_entropy(lp, [1, 2, 3, 2], denom=1.0)
    assert abs(summed.item() - 4.0 * mean.item()) < 1e-12


def test_ce_gradient():
    rng = np.random.default_rng(2)

    def f(logits):
        return s2s_cross_entropy(T.log_softmax(logits), [1, 0, 2])

    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    assert grad_check(f, [x]) < 1e-6


# -- CTC ----------------------------------------------------------------------


def collapse(path, blank=0):
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def brute_ctc(u, target, blank=0):
    """Sum over every length-T path whose collapse equals the target."""
    n, v = u.shape
    total = mp.mpf(0)
    for path in itertools.product(range(v), repeat=n):
        if collapse(path, blank) == list(target):
            total += mp.e**mp.fsum(mp.mpf(float(u[t, k]))
                                   for t, k in enumerate(path))
    return float(mp.log(total))


def test_expand_with_blanks():
    assert expand_with_blanks([1, 2]) == [0, 1, 0, 2, 0]
    assert expand_with_blanks([]) == [0]


def test_ctc_min_frames():
    assert ctc_min_frames([]) == 0
    assert ctc_min_frames([1, 2, 3]) == 3
    assert ctc_min_frames([1, 1]) == 3
    assert ctc_min_frames([1, 1, 1]) == 5
    assert ctc_min_frames([1, 2, 2, 3, 3]) == 7


def test_ctc_single_frame_single_label():
    # one frame must emit the one label directly
    _, lp = rand_logprobs(np.random.default_rng(3), 1, 4)
    got = ctc_log_likelihood(lp, [2]).item()
    assert abs(got - lp.data[0, 2]) < 1e-12


def test_ctc_two_frames_hand_sum():
    _, lp = rand_logprobs(np.random.default_rng(4), 2, 2)
    u = lp.data
    want = np.log(np.exp(u[0, 1] + u[1, 1]) + np.exp(u[0, 0] + u[1, 1])
                  + np.exp(u[0, 1] + u[1, 0]))
    assert abs(ctc_log_likelihood(lp, [1]).item() - want) < 1e-12


def test_ctc_empty_target_is_all_blanks():
    _, lp = rand_logprobs(np.random.default_rng(5), 4, 3)
    got = ctc_log_likelihood(lp, []).item()
    assert abs(got - lp.data[:, 0].sum()) < 1e-12


@pytest.mark.parametrize("n_frames,target,vocab", [
    (3, [1], 3),
    (4, [1, 2], 3),
    (5, [1, 1], 3),
    (6, [2, 1, 3], 4),
    (6, [3, 3, 2], 4),
    (5, [1, 2, 1], 3),
    (6, [1], 2),
    (4, [], 4),
])
def test_ctc_matches_path_enumeration(n_frames, target, vocab):
    _, lp = rand_logprobs(np.random.default_rng(n_frames * 7 + vocab),
                          n_frames, vocab)
    want = brute_ctc(lp.data, target)
    got = ctc_log_likelihood(lp, target).item()
    assert abs(got - want) < 1e-9


def test_ctc_infeasible_raises():
    _, lp = rand_logprobs(np.random.default_rng(6), 2, 3)
    with pytest.raises(ImpossibleAlignmentError):
        ctc_log_likelihood(lp, [1, 1])
    with pytest.raises(ImpossibleAlignmentError):
        ctc_log_likelihood(lp, [1, 2, 1])


def test_ctc_blank_in_target_rejected():
    _, lp = rand_logprobs(np.random.default_rng(7), 4, 3)
    with pytest.raises(DimensionError):
        ctc_log_likelihood(lp, [1, 0, 2])


def test_ctc_target_outside_vocab():
    _, lp = rand_logprobs(np.random.default_rng(8), 4, 3)
    with pytest.raises(IndexError):
        ctc_log_likelihood(lp, [3])


def test_ctc_posterior_rows_sum_to_one():
    # d logp / d u[t, :] is the frame-t posterior over symbols
    rng = np.random.default_rng(9)
    u = Tensor(np.log(T.softmax(Tensor(rng.standard_normal((5, 3)))).data),
               requires_grad=True)
    logp = ctc_log_likelihood(u, [1, 2])
    backward(logp)
    sums = u.grad.sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-10)


def test_ctc_gradient_finite_differences():
    rng = np.random.default_rng(10)

    def f(logits):
        return -ctc_log_likelihood(T.log_softmax(logits), [1, 2])

    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    assert grad_check(f, [x]) < 1e-5


def test_ctc_gradient_with_repeat_label():
    rng = np.random.default_rng(11)

    def f(logits):
        return -ctc_log_likelihood(T.log_softmax(logits), [2, 2])

    x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    assert grad_check(f, [x]) < 1e-5


# -- joint --------------------------------------------------------------------


def test_joint_hand_value():
    got = joint_asr_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)), 0.7)
    assert abs(got.item() - 1.3) < 1e-12


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7, 1.0])
def test_joint_linear_in_alpha(alpha):
    s2s = Tensor(np.asarray(1.75))
    ctc = Tensor(np.asarray(0.5))
    got = joint_asr_loss(s2s, ctc, alpha).item()
    assert got == alpha * 1.75 + (1.0 - alpha) * 0.5


def test_joint_without_ctc():
    s2s = Tensor(np.asarray(3.0))
    assert joint_asr_loss(s2s, None, 1.0) is s2s
    with pytest.raises(DimensionError):
        joint_asr_loss(s2s, None, 0.7)


# -- TTS L1 -------------------------------------------------------------------


def test_tts_l1_hand_value():
    target = np.zeros((2, 3))
    coarse = Tensor(np.full((2, 3), 0.5), requires_grad=True)
    refined = Tensor(np.zeros((2, 3)), requires_grad=True)
    loss = tts_l1(coarse, refined, target)
    assert abs(loss.item() - 0.5) < 1e-12


def test_tts_l1_sums_both_stages():
    rng = np.random.default_rng(12)
    target = rng.standard_normal((3, 4))
    c = Tensor(rng.standard_normal((3, 4)))
    r = Tensor(rng.standard_normal((3, 4)))
    want = np.abs(c.data - target).mean() + np.abs(r.data - target).mean()
    assert abs(tts_l1(c, r, target).item() - want) < 1e-12


def test_tts_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        tts_l1(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))),
               np.zeros((2, 4)))


def test_tts_l1_gradient():
    rng = np.random.default_rng(13)
    target = rng.standard_normal((3, 2))

    def f(c, r):
        return tts_l1(c, r, target)

    c = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    assert grad_check(f, [c, r]) < 1e-6


# -- weighted BCE -------------------------------------------------------------


def test_bce_hand_value_positive():
    # logit 0 on the stop frame, weight 5: loss is 5 log 2
    logits = Tensor(np.zeros(1))
    loss = weighted_bce(logits, [1.0], pos_weight=5.0)
    assert abs(loss.item() - 3.4657359027997265471) < 1e-12


def test_bce_hand_value_negative():
    logits = Tensor(np.zeros(1))
    loss = weighted_bce(logits, [0.0], pos_weight=5.0)
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_bce_unit_weight_matches_plain_formula():
    rng = np.random.default_rng(14)
    z = rng.standard_normal(6)
    y = (rng.random(6) > 0.5).astype(float)
    sig = 1.0 / (1.0 + np.exp(-z))
    plain = -(y * np.log(sig) + (1.0 - y) * np.log(1.0 - sig)).mean()
    got = weighted_bce(Tensor(z), y, pos_weight=1.0).item()
    assert abs(got - plain) < 1e-12


def test_bce_stable_at_extreme_logits():
    logits = Tensor(np.asarray([1000.0, -1000.0]))
    loss = weighted_bce(logits, [1.0, 1.0], pos_weight=5.0)
    assert np.isfinite(loss.item())
    # the missed positive at -1000 dominates: 5 * 1000 / 2 frames
    assert abs(loss.item() - 2500.0) < 1e-6


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        weighted_bce(Tensor(np.zeros(3)), [1.0, 0.0])


def test_bce_gradient():
    rng = np.random.default_rng(15)
    y = (rng.random(5) > 0.6).astype(float)

    def f(z):
        return weighted_bce(z, y, pos_weight=5.0)

    z = Tensor(rng.standard_normal(5), requires_grad=True)
    assert grad_check(f, [z]) < 1e-6


# -- guided attention ----------------------------------------------------------


def test_guided_weight_diagonal_zero():
    w = guided_attention_weight(4, 4)
    assert np.allclose(np.diag(w), 0.0)
    assert np.all(w >= 0.0) and np.all(w < 1.0)


def test_guided_antidiagonal_2x2():
    a = Tensor(np.asarray([[0.0, 1.0], [1.0, 0.0]]))
    loss = guided_attention_loss([a])
    assert abs(loss.item() - 0.5421666382283857391) < 1e-12


def test_guided_diagonal_is_zero():
    a = Tensor(np.eye(5))
    assert guided_attention_loss([a]).item() == 0.0


def test_guided_uniform_exceeds_diagonal():
    n = 6
    uniform = guided_attention_loss([Tensor(np.full((n, n), 1.0 / n))]).item()
    diag = guided_attention_loss([Tensor(np.eye(n))]).item()
    assert uniform > diag


def test_guided_head_average():
    rng = np.random.default_rng(16)
    a = Tensor(rng.random((3, 5)))
    b = Tensor(rng.random((3, 5)))
    la = guided_attention_loss([a]).item()
    lb = guided_attention_loss([b]).item()
    both = guided_attention_loss([a, b]).item()
    assert abs(both - 0.5 * (la + lb)) < 1e-12


def test_guided_sharper_g_penalizes_more():
    a = Tensor(np.full((4, 4), 0.25))
    assert (guided_attention_loss([a], g=0.2).item()
            > guided_attention_loss([a], g=0.4).item())


def test_guided_empty_selection_rejected():
    with pytest.raises(DimensionError):
        guided_attention_loss([])


def test_guided_gradient():
    rng = np.random.default_rng(17)

    def f(logits):
        return guided_attention_loss([T.softmax(logits)])

    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    assert grad_check(f, [x]) < 1e-6


# -- composite and report ------------------------------------------------------


def test_tts_total_sums_terms():
    l1 = Tensor(np.asarray(1.5))
    bce = Tensor(np.asarray(0.25))
    guided = Tensor(np.asarray(0.125))
    assert tts_total_loss(l1, bce, guided).item() == 1.875
    assert tts_total_loss(l1, bce, None).item() == 1.75


def test_loss_report_components():
    r = LossReport(total=1.3, components={"s2s": 1.0, "ctc": 2.0},
                   n_tokens=7, n_frames=40)
    assert r.component("s2s") == 1.0
    assert r.component("l1") == 0.0
    assert abs(r.total - (0.7 * r.component("s2s")
                          + 0.3 * r.component("ctc"))) < 1e-12
