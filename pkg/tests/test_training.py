"""Optimizer, checkpoint, and training-loop tests.

Checkpoint round-trips must be bit-exact and the loop byte-identical
across reruns with the same seed; accumulation splits must reproduce
the big-batch update to near machine precision.
"""

import itertools
import os
from collections import namedtuple

import numpy as np
import pytest

from minis2s import tensor as T
from minis2s.errors import ConfigError, DataError
from minis2s.losses import s2s_cross_entropy
from minis2s.models import SOS_EOS_ID, ModelConfig, RnnLm, build_model
from minis2s.tensor import Tensor, backward
from minis2s.training import (Adadelta, Adam, Checkpoint, EarlyStopping,
                              TrainConfig, accumulate_gradients,
                              average_checkpoints, evaluate_dev, grad_norm,
                              load_checkpoint, load_into_model, noam_lr,
                              save_checkpoint, spec_augment, train_lm,
                              train_loop)

Utt = namedtuple("Utt", "utt_id feats tokens")


def asr_cfg(**kw):
    base = dict(task="asr", vocab_size=5, feat_dim=8, e=1, d=1, d_att=16,
                d_ff=32, d_head=2, dropout_rate=0.0, alpha=0.7, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def toy_utts(n=4, seed=0, feat=8):
    rng = np.random.default_rng(seed)
    protos = {3: rng.standard_normal((8, feat)),
              4: rng.standard_normal((8, feat))}
    seqs = [[3, 4], [4, 3], [3, 3], [4, 4], [3], [4], [3, 4], [4, 3]][:n]
    utts = []
    for i, s in enumerate(seqs):
        f = np.concatenate([protos[t] for t in s])
        f = f + 0.05 * rng.standard_normal(f.shape)
        utts.append(Utt(f"u{i:02d}", f, s))
    return utts


def tts_utts(n=4, seed=0, feat=6):
    rng = np.random.default_rng(seed)
    protos = {3: rng.standard_normal((4, feat)),
              4: rng.standard_normal((4, feat))}
    seqs = [[3, 4], [4, 3], [3], [4]][:n]
    return [Utt(f"t{i:02d}", np.concatenate([protos[t] for t in s]), s)
            for i, s in enumerate(seqs)]


# -- schedule -------------------------------------------------------------------


def test_noam_step_one_value():
    lr = noam_lr(1, d_att=256, warmup=2000)
    assert abs(lr - 0.0625 * 2000 ** -1.5) < 1e-18
    assert abs(lr - 6.9877e-7) < 5e-11


def test_noam_peak_exactly_at_warmup():
    warmup = 50
    lrs = [noam_lr(s, 64, warmup) for s in range(1, 10 * warmup + 1)]
    assert int(np.argmax(lrs)) + 1 == warmup
    # both branches agree at the corner
    assert abs(noam_lr(warmup, 64, warmup)
               - 64 ** -0.5 * warmup ** -0.5) < 1e-18


def test_noam_monotone_either_side():
    warmup = 40
    lrs = [noam_lr(s, 32, warmup) for s in range(1, 200)]
    for a, b in zip(lrs[:warmup - 1], lrs[1:warmup]):
        assert b >= a
    for a, b in zip(lrs[warmup - 1:-1], lrs[warmup:]):
        assert b <= a


def test_noam_rejects_step_zero():
    with pytest.raises(ConfigError):
        noam_lr(0, 256, 2000)


# -- optimizers -----------------------------------------------------------------


def test_adam_single_scalar_hand_step():
    p = Tensor(np.asarray(1.0), requires_grad=True)
    p.grad = np.asarray(0.5)
    opt = Adam([p])
    opt.step(lr=0.1)
    assert abs(p.data - 0.9) < 1e-8


def test_adam_zero_grad_no_move():
    p = Tensor(np.asarray([2.0, -3.0]), requires_grad=True)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt = Adam([p])
    for _ in range(5):
        opt.step(lr=0.5)
    assert np.array_equal(p.data, before)


def test_adam_none_grad_treated_as_zero():
    p = Tensor(np.asarray([1.0]), requires_grad=True)
    Adam([p]).step(lr=0.3)
    assert p.data[0] == 1.0


def test_adam_step_counter():
    p = Tensor(np.asarray(1.0), requires_grad=True)
    opt = Adam([p])
    for i in range(3):
        p.grad = np.asarray(0.1)
        opt.step(lr=0.01)
        assert opt.t == i + 1


def test_adadelta_descends_quadratic():
    x = Tensor(np.asarray(1.0), requires_grad=True)
    opt = Adadelta([x])
    prev = float(x.data) ** 2
    for _ in range(100):
        x.grad = np.asarray(2.0 * float(x.data))
        opt.step()
        cur = float(x.data) ** 2
        assert cur <= prev + 1e-15
        prev = cur
    assert prev < 1.0 - 1e-3


def test_grad_norm():
    a = Tensor(np.asarray([3.0]), requires_grad=True)
    b = Tensor(np.asarray([4.0]), requires_grad=True)
    a.grad = np.asarray([3.0])
    b.grad = np.asarray([4.0])
    assert abs(grad_norm([a, b]) - 5.0) < 1e-12
    assert grad_norm([Tensor(np.ones(2), requires_grad=True)]) == 0.0


# -- accumulation equivalence ----------------------------------------------------


def batch_loss_closures(model, utts, split):
    """One closure per micro-batch, all normalized by the full-batch
    token count."""
    n_tok = sum(len(u.tokens) + 1 for u in utts)

    def make(group):
        def closure():
            total = None
            for u in group:
                enc = model.encode(Tensor(u.feats))
                lp = model.decode_logprobs(enc, [SOS_EOS_ID] + list(u.tokens))
                ce = s2s_cross_entropy(lp, list(u.tokens) + [SOS_EOS_ID],
                                       denom=n_tok)
                total = ce if total is None else total + ce
            return total
        return closure

    return [make(utts[lo:hi]) for lo, hi in split]


@pytest.mark.parametrize("split", [
    [(0, 4)],
    [(0, 1), (1, 2), (2, 3), (3, 4)],
    [(0, 2), (2, 4)],
])
def test_accumulation_matches_big_batch(split):
    utts = toy_utts(4)
    big = build_model(asr_cfg(alpha=1.0))
    micro = build_model(asr_cfg(alpha=1.0))
    with T.Graph(seed=0):
        loss_big = accumulate_gradients(big, batch_loss_closures(big, utts, [(0, 4)]))
    with T.Graph(seed=0):
        loss_micro = accumulate_gradients(micro, batch_loss_closures(micro, utts, split))
    assert abs(loss_big - loss_micro) < 1e-10
    opt_a, opt_b = Adam(big.parameters()), Adam(micro.parameters())
    opt_a.step(lr=0.01)
    opt_b.step(lr=0.01)
    for pa, pb in zip(big.parameters(), micro.parameters()):
        assert np.max(np.abs(pa.data - pb.data)) < 1e-10


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(asr_cfg())
    path = str(tmp_path / "m.esc")
    save_checkpoint(path, model, epoch=7)
    ck = load_checkpoint(path)
    assert ck.epoch == 7
    for name, p in model.named_parameters():
        assert np.array_equal(ck.params[name], p.data)
    assert list(ck.params) == [n for n, _ in model.named_parameters()]


def test_checkpoint_scalar_param_roundtrip(tmp_path):
    path = str(tmp_path / "s.esc")
    save_checkpoint(path, {"alpha": np.asarray(2.5), "w": np.ones((2, 3))})
    ck = load_checkpoint(path)
    assert ck.params["alpha"].shape == ()
    assert ck.params["alpha"] == 2.5


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.esc")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    path = str(tmp_path / "t.esc")
    save_checkpoint(path, {"w": np.zeros(2)})
    with open(path, "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    path = str(tmp_path / "u.esc")
    save_checkpoint(path, {"w": np.zeros(4)})
    raw = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(raw[:-8])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_average_identical_and_means(tmp_path):
    a = str(tmp_path / "a.esc")
    b = str(tmp_path / "b.esc")
    save_checkpoint(a, {"w": np.zeros((2, 2))})
    save_checkpoint(b, {"w": np.full((2, 2), 2.0)})
    avg = average_checkpoints([a, b])
    assert np.array_equal(avg.params["w"], np.ones((2, 2)))
    same = average_checkpoints([a, a])
    assert np.array_equal(same.params["w"], np.zeros((2, 2)))


def test_average_order_independent(tmp_path):
    rng = np.random.default_rng(3)
    paths = []
    for i in range(3):
        p = str(tmp_path / f"c{i}.esc")
        save_checkpoint(p, {"w": rng.standard_normal((3, 4))})
        paths.append(p)
    for perm in itertools.permutations(paths):
        got = average_checkpoints(list(perm))
        want = average_checkpoints(paths)
        assert np.array_equal(got.params["w"], want.params["w"])


def test_average_empty_rejected():
    with pytest.raises(DataError):
        average_checkpoints([])


def test_load_into_model_roundtrip(tmp_path):
    m1 = build_model(asr_cfg(seed=1))
    m2 = build_model(asr_cfg(seed=2))
    path = str(tmp_path / "m1.esc")
    save_checkpoint(path, m1)
    load_into_model(m2, load_checkpoint(path))
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_load_into_model_name_mismatch(tmp_path):
    model = build_model(asr_cfg())
    with pytest.raises(DataError):
        load_into_model(model, Checkpoint(params={"nope": np.zeros(1)}))


# -- early stopping -------------------------------------------------------------


def test_early_stopping_rule_trace():
    es = EarlyStopping(patience=3)
    decisions = [es.update(v) for v in [3.0, 2.0, 2.5, 2.4, 2.6]]
    assert decisions == [False, False, False, False, True]


def test_early_stopping_never_on_improvement():
    es = EarlyStopping(patience=3)
    assert not any(es.update(v) for v in np.linspace(5.0, 1.0, 20))


def test_early_stopping_flat_history():
    es = EarlyStopping(patience=3)
    decisions = [es.update(1.0) for _ in range(4)]
    assert decisions == [False, False, False, True]


def test_early_stopping_needs_min_delta():
    es = EarlyStopping(patience=2, min_delta=1e-4)
    assert not es.update(1.0)
    assert not es.update(1.0 - 5e-5)   # too small to count
    assert es.update(1.0 - 9e-5)


# -- augmentation ---------------------------------------------------------------


def test_spec_augment_identity_when_disabled():
    x = np.random.default_rng(4).standard_normal((20, 16))
    y = spec_augment(x, n_time_masks=0, n_freq_masks=0, seed=1)
    assert np.array_equal(x, y)
    assert y is not x


def test_spec_augment_masks_zero_rest_untouched():
    x = np.random.default_rng(5).standard_normal((30, 16)) + 10.0
    y = spec_augment(x, n_time_masks=2, n_freq_masks=1, max_t=6, max_f=3,
                     seed=2)
    changed = y != x
    assert np.all(y[changed] == 0.0)
    assert np.array_equal(y[~changed], x[~changed])


def test_spec_augment_deterministic_per_seed():
    x = np.random.default_rng(6).standard_normal((25, 16))
    a = spec_augment(x, seed=9)
    b = spec_augment(x, seed=9)
    c = spec_augment(x, seed=10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_spec_augment_expected_mask_fraction():
    # one time mask, width uniform on 0..max_t: mean width max_t/2
    n, max_t = 50, 10
    x = np.ones((n, 8))
    fractions = []
    for seed in range(1000):
        y = spec_augment(x, n_time_masks=1, n_freq_masks=0, max_t=max_t,
                         seed=seed)
        fractions.append((y.sum(axis=1) == 0).mean())
    want = (max_t / 2) / n
    got = float(np.mean(fractions))
    assert abs(got - want) / want < 0.2


# -- the loop -------------------------------------------------------------------


def test_train_loop_artifacts_and_descent(tmp_path):
    utts = toy_utts(4)
    model = build_model(asr_cfg())
    tcfg = TrainConfig(epochs=30, batch_size=4, optimizer="adam",
                       warmup_steps=100, noam_k=5.0, seed=0, keep_last=5)
    res = train_loop(model, utts, utts[:2], tcfg, str(tmp_path / "run"))
    assert len(res.ckpt_paths) == 30
    assert all(os.path.exists(p) for p in res.ckpt_paths)
    assert os.path.exists(res.avg_path)
    assert len(res.dev_losses) == 30
    rows = open(res.log_path).read().strip().split("\n")
    assert rows[0] == "step,epoch,lr,total,s2s,ctc,l1,bce,guided,grad_norm,wall_ms"
    assert len(rows) == 1 + 30
    first = float(rows[1].split(",")[3])
    last = float(rows[-1].split(",")[3])
    assert last < 0.5 * first
    assert all(r.split(",")[-1] == "0" for r in rows[1:])


def test_train_loop_byte_identical_reruns(tmp_path):
    utts = toy_utts(4)
    outs = []
    for run in ("a", "b"):
        model = build_model(asr_cfg(dropout_rate=0.1))
        tcfg = TrainConfig(epochs=2, batch_size=2, optimizer="adam", seed=3)
        res = train_loop(model, utts, utts[:1], tcfg, str(tmp_path / run))
        outs.append(res)
    log_a = open(outs[0].log_path, "rb").read()
    log_b = open(outs[1].log_path, "rb").read()
    assert log_a == log_b
    for pa, pb in zip(outs[0].ckpt_paths, outs[1].ckpt_paths):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    assert open(outs[0].avg_path, "rb").read() == \
        open(outs[1].avg_path, "rb").read()


def test_train_loop_tts_smoke(tmp_path):
    cfg = ModelConfig(task="tts", body="transformer", vocab_size=5, feat_dim=6,
                      e=1, d=2, d_att=16, d_ff=32, d_head=2, dropout_rate=0.0,
                      alpha=1.0, reduction_factor=2, prenet_units=8,
                      postnet_layers=3, prenet_dropout_rate=0.0, seed=2)
    model = build_model(cfg)
    utts = tts_utts(4)
    tcfg = TrainConfig(epochs=2, batch_size=2, optimizer="adam", seed=1)
    res = train_loop(model, utts, utts[:2], tcfg, str(tmp_path / "tts"))
    rows = open(res.log_path).read().strip().split("\n")[1:]
    assert len(rows) == 4
    for r in rows:
        parts = r.split(",")
        assert float(parts[6]) > 0.0     # l1
        assert float(parts[7]) > 0.0     # bce
        assert float(parts[8]) >= 0.0    # guided
        assert float(parts[4]) == 0.0    # no s2s term in tts
    assert len(res.dev_losses) == 2


def test_train_loop_early_stop(tmp_path):
    # dev loss cannot improve with lr 0, so patience trips immediately
    utts = toy_utts(4)
    model = build_model(asr_cfg())
    tcfg = TrainConfig(epochs=10, batch_size=4, optimizer="adam",
                       noam_k=0.0, seed=0, early_stop=True, patience=2)
    res = train_loop(model, utts, utts[:2], tcfg, str(tmp_path / "es"))
    assert res.stopped_early
    assert len(res.ckpt_paths) < 10


def test_train_loop_empty_data_rejected(tmp_path):
    model = build_model(asr_cfg())
    with pytest.raises(DataError):
        train_loop(model, [], [], TrainConfig(epochs=1), str(tmp_path / "x"))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="sgd").validate()


def test_train_loop_with_augmentation_runs(tmp_path):
    utts = toy_utts(4)
    model = build_model(asr_cfg())
    tcfg = TrainConfig(epochs=1, batch_size=2, augment=True, max_t=3,
                       max_f=2, seed=5)
    res = train_loop(model, utts, utts[:1], tcfg, str(tmp_path / "aug"))
    assert len(res.ckpt_paths) == 1


def test_train_lm_loss_decreases():
    lm = RnnLm(6, d_lm=12, seed=0)
    seqs = [[3, 4, 5], [3, 4], [4, 5, 3], [5, 5, 4], [3, 3]]
    trace = train_lm(lm, seqs, epochs=4, lr=5e-3, seed=0)
    assert trace[-1] < trace[0]


def test_evaluate_dev_matches_manual_mean():
    utts = toy_utts(2)
    model = build_model(asr_cfg(alpha=1.0))
    model.eval()
    n_tok = sum(len(u.tokens) + 1 for u in utts)
    manual = 0.0
    with T.no_grad(), T.Graph(seed=0):
        for u in utts:
            enc = model.encode(Tensor(u.feats))
            lp = model.decode_logprobs(enc, [SOS_EOS_ID] + list(u.tokens))
            manual += s2s_cross_entropy(lp, list(u.tokens) + [SOS_EOS_ID],
                                        denom=n_tok).item()
    got = evaluate_dev(model, utts)
    assert abs(got - manual) < 1e-12
