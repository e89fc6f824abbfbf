"""Optimization and the training loop: warmup schedule, Adam and
Adadelta, gradient accumulation, binary checkpoints with averaging,
early stopping, feature masking, and a deterministic CSV-logged loop.

Losses are normalized by batch-global token (ASR/ST) or element (TTS)
counts, so splitting a batch into micro-batches accumulates to exactly
the big-batch update.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ConfigError, DataError
from .models import SOS_EOS_ID, build_model
from .tensor import Tensor, backward

CKPT_MAGIC = b"ESC1"
LOG_COLUMNS = ["step", "epoch", "lr", "total", "s2s", "ctc", "l1", "bce",
               "guided", "grad_norm", "wall_ms"]


def noam_lr(step: int, d_att: int, warmup: int, k: float = 1.0) -> float:
    """Width-scaled warmup-then-decay rate; peaks exactly at step=warmup."""
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    return k * d_att ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1 ** self.t)
            vhat = self.v[i] / (1.0 - b2 ** self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


class Adadelta:
    def __init__(self, params: Sequence[Tensor], rho: float = 0.95,
                 eps: float = 1e-8):
        self.params = list(params)
        self.rho, self.eps = rho, eps
        self.t = 0
        self.eg = [np.zeros_like(p.data) for p in self.params]
        self.ex = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float = 1.0) -> None:
        self.t += 1
        rho, eps = self.rho, self.eps
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.eg[i] = rho * self.eg[i] + (1.0 - rho) * g * g
            delta = -np.sqrt(self.ex[i] + eps) / np.sqrt(self.eg[i] + eps) * g
            self.ex[i] = rho * self.ex[i] + (1.0 - rho) * delta * delta
            p.data += lr * delta


def grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def accumulate_gradients(model, micro_losses: Iterable[Callable[[], Tensor]]) -> float:
    """Run backward over several loss closures, summing gradients.

    Each closure must normalize by the batch-global denominator; the
    summed gradients (and returned loss) then equal the single
    big-batch computation.
    """
    model.zero_grad()
    total = 0.0
    for make_loss in micro_losses:
        loss = make_loss()
        backward(loss)
        total += loss.item()
    return total


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    epoch: int = 0


def _named_params(source) -> "OrderedDict[str, np.ndarray]":
    if isinstance(source, Mapping):
        return OrderedDict((k, np.asarray(v, dtype=np.float64))
                           for k, v in source.items())
    return OrderedDict((name, p.data) for name, p in source.named_parameters())


def save_checkpoint(path: str, source, epoch: int = 0) -> None:
    """Binary dump: magic, u32 count, then per parameter a u16 name
    length, the UTF-8 name, u8 rank, u32 dims, and float64 values.
    All integers little-endian; round-trip is bit-exact."""
    params = _named_params(source)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", value.ndim))
            for dim in value.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    meta = path + ".epoch"
    with open(meta, "w", encoding="utf-8") as fh:
        fh.write(f"{epoch}\n")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0]
                          for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise DataError(f"{path}: truncated values for {name}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last parameter")
    epoch = 0
    meta = path + ".epoch"
    if os.path.exists(meta):
        with open(meta, "r", encoding="utf-8") as fh:
            epoch = int(fh.read().strip() or 0)
    return Checkpoint(params=params, epoch=epoch)


def average_checkpoints(paths: Sequence[str]) -> Checkpoint:
    """Arithmetic mean per parameter; optimizer state plays no part.

    Inputs are canonicalized by path so any permutation of the same
    files produces bit-identical output.
    """
    if not paths:
        raise DataError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in sorted(paths)]
    names = list(ckpts[0].params)
    for c in ckpts[1:]:
        if list(c.params) != names:
            raise DataError("checkpoints disagree on parameter names")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in names:
        out[name] = np.stack([c.params[name] for c in ckpts]).mean(axis=0)
    return Checkpoint(params=out, epoch=max(c.epoch for c in ckpts))


def load_into_model(model, ckpt: Checkpoint) -> None:
    have = dict(model.named_parameters())
    if set(have) != set(ckpt.params):
        missing = sorted(set(have) ^ set(ckpt.params))
        raise DataError(f"checkpoint/model parameter mismatch: {missing[:4]}")
    for name, p in have.items():
        value = ckpt.params[name]
        if p.data.shape != value.shape:
            raise DataError(f"{name}: shape {value.shape} does not match "
                            f"model {p.data.shape}")
        p.data[...] = value


# -- early stopping and augmentation -------------------------------------------


class EarlyStopping:
    """Stop once the dev loss has not improved by min_delta for
    `patience` consecutive epochs."""

    def __init__(self, patience: int = 3, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, dev_loss: float) -> bool:
        if dev_loss < self.best - self.min_delta:
            self.best = dev_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def spec_augment(x: np.ndarray, n_time_masks: int = 2, n_freq_masks: int = 2,
                 max_t: int = 8, max_f: int = 4,
                 seed: int = 0) -> np.ndarray:
    """Zero random time and frequency bands of a (frames, dims) array."""
    x = np.array(x, copy=True)
    n, d = x.shape
    rng = np.random.default_rng(seed)
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        w = min(w, n)
        start = int(rng.integers(0, n - w + 1))
        x[start:start + w, :] = 0.0
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_f + 1))
        w = min(w, d)
        start = int(rng.integers(0, d - w + 1))
        x[:, start:start + w] = 0.0
    return x


# -- the loop -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    optimizer: str = "adam"       # adam | adadelta
    warmup_steps: int = 2000
    noam_k: float = 1.0
    adadelta_lr: float = 1.0
    seed: int = 0
    keep_last: int = 5            # checkpoint averaging window
    early_stop: bool = False
    patience: int = 3
    min_delta: float = 1e-4
    log_timing: bool = False      # wall_ms stays 0 unless set
    augment: bool = False
    n_time_masks: int = 2
    n_freq_masks: int = 2
    max_t: int = 8
    max_f: int = 4

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "adadelta"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class TrainResult:
    ckpt_paths: List[str]
    log_path: str
    dev_losses: List[float]
    avg_path: Optional[str] = None
    stopped_early: bool = False


def _asr_utt_loss(model, utt, n_tokens_total: int) -> L.LossReport:
    """Joint loss for one utterance, normalized by the batch token count.

    Returns the Tensor on report.loss (not a dataclass field; attached
    dynamically to keep LossReport serialization-plain)."""
    cfg = model.config
    ys = list(utt.tokens)
    enc = model.encode(Tensor(utt.feats))
    lp = model.decode_logprobs(enc, [SOS_EOS_ID] + ys)
    ce = L.s2s_cross_entropy(lp, ys + [SOS_EOS_ID], denom=n_tokens_total)
    report = L.LossReport(n_tokens=len(ys) + 1)
    if cfg.uses_ctc:
        ctc_nll = -L.ctc_log_likelihood(model.ctc_logprobs(enc), ys) \
            / n_tokens_total
        loss = L.joint_asr_loss(ce, ctc_nll, cfg.alpha)
        report.components = {"s2s": ce.item(), "ctc": ctc_nll.item()}
    else:
        loss = ce
        report.components = {"s2s": ce.item(), "ctc": 0.0}
    report.total = loss.item()
    report.loss = loss
    return report


def _tts_utt_loss(model, utt, n_elems_total: int, n_steps_total: int,
                  n_utts: int) -> L.LossReport:
    target = np.asarray(utt.feats, dtype=np.float64)
    padded = model.pad_target(target)
    enc = model.encode(list(utt.tokens))
    fwd = model.forward_teacher(enc, target)
    l1 = L.tts_l1(fwd.coarse, fwd.refined, padded, denom=n_elems_total)
    eos_y = np.zeros(fwd.n_steps)
    eos_y[-1] = 1.0
    bce = L.weighted_bce(fwd.eos_logits, eos_y, denom=n_steps_total)
    guided = L.guided_attention_loss(model.guided_attention_records(fwd.records))
    guided = guided / n_utts
    loss = L.tts_total_loss(l1, bce, guided)
    report = L.LossReport(
        total=loss.item(),
        components={"l1": l1.item(), "bce": bce.item(),
                    "guided": guided.item()},
        n_frames=int(target.shape[0]))
    report.loss = loss
    return report


def make_batches(dataset: Sequence, batch_size: int, rng) -> List[List]:
    """Length-bucketed batches in seeded-random order."""
    order = sorted(range(len(dataset)),
                   key=lambda i: (_utt_length(dataset[i]), i))
    batches = [[dataset[i] for i in order[lo:lo + batch_size]]
               for lo in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


def _utt_length(utt) -> int:
    feats = getattr(utt, "feats", None)
    return len(feats) if feats is not None else len(utt.tokens)


def _fmt(x: float) -> str:
    return repr(float(x))


def evaluate_dev(model, dev_set: Sequence) -> float:
    """Mean per-token (ASR/ST) or per-element (TTS) dev loss."""
    is_tts = model.config.task == "tts"
    model.eval()
    total = 0.0
    with T.no_grad(), T.Graph(seed=0):
        if is_tts:
            n_elems = sum(model.pad_target(np.asarray(u.feats)).size
                          for u in dev_set)
            n_steps = sum(model.pad_target(np.asarray(u.feats)).shape[0]
                          // model.config.reduction_factor for u in dev_set)
            for u in dev_set:
                rep = _tts_utt_loss(model, u, n_elems, n_steps, len(dev_set))
                total += rep.total
        else:
            n_tok = sum(len(u.tokens) + 1 for u in dev_set)
            for u in dev_set:
                rep = _asr_utt_loss(model, u, n_tok)
                total += rep.total
    model.train()
    return total


def train_loop(model, train_set: Sequence, dev_set: Sequence,
               tcfg: TrainConfig, out_dir: str) -> TrainResult:
    """Deterministic epoch loop: bucketed batches, accumulation,
    per-step CSV logging, a checkpoint per epoch, and a final
    parameter average over the last keep_last checkpoints."""
    tcfg.validate()
    if not train_set:
        raise DataError("empty training set")
    os.makedirs(out_dir, exist_ok=True)
    is_tts = model.config.task == "tts"
    params = model.parameters()
    if tcfg.optimizer == "adam":
        opt = Adam(params)
    else:
        opt = Adadelta(params)

    log_path = os.path.join(out_dir, "log.csv")
    stopper = EarlyStopping(tcfg.patience, tcfg.min_delta)
    ckpt_paths: List[str] = []
    dev_losses: List[float] = []
    stopped = False
    step = 0
    with open(log_path, "w", encoding="utf-8", newline="") as log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)
        for epoch in range(1, tcfg.epochs + 1):
            model.train()
            rng = np.random.default_rng(tcfg.seed * 1_000_003 + epoch)
            for batch in make_batches(train_set, tcfg.batch_size, rng):
                step += 1
                t0 = time.perf_counter()
                model.zero_grad()
                if is_tts:
                    n_elems = sum(model.pad_target(np.asarray(u.feats)).size
                                  for u in batch)
                    n_steps = sum(
                        model.pad_target(np.asarray(u.feats)).shape[0]
                        // model.config.reduction_factor for u in batch)
                else:
                    n_tok = sum(len(u.tokens) + 1 for u in batch)
                sums: Dict[str, float] = {"total": 0.0, "s2s": 0.0,
                                          "ctc": 0.0, "l1": 0.0,
                                          "bce": 0.0, "guided": 0.0}
                with T.Graph(seed=tcfg.seed * 999_983 + step):
                    for i, utt in enumerate(batch):
                        feats = np.asarray(utt.feats, dtype=np.float64)
                        if tcfg.augment and not is_tts:
                            feats = spec_augment(
                                feats, tcfg.n_time_masks, tcfg.n_freq_masks,
                                tcfg.max_t, tcfg.max_f,
                                seed=tcfg.seed * 31 + step * 7 + i)
                            utt = type(utt)(utt.utt_id, feats, utt.tokens)
                        if is_tts:
                            rep = _tts_utt_loss(model, utt, n_elems,
                                                n_steps, len(batch))
                        else:
                            rep = _asr_utt_loss(model, utt, n_tok)
                        backward(rep.loss)
                        sums["total"] += rep.total
                        for k, v in rep.components.items():
                            sums[k] += v
                gnorm = grad_norm(params)
                if tcfg.optimizer == "adam":
                    lr = noam_lr(opt.t + 1, model.config.d_att,
                                 tcfg.warmup_steps, tcfg.noam_k)
                    opt.step(lr)
                else:
                    lr = tcfg.adadelta_lr
                    opt.step(lr)
                wall = int((time.perf_counter() - t0) * 1000) \
                    if tcfg.log_timing else 0
                writer.writerow([step, epoch, _fmt(lr), _fmt(sums["total"]),
                                 _fmt(sums["s2s"]), _fmt(sums["ctc"]),
                                 _fmt(sums["l1"]), _fmt(sums["bce"]),
                                 _fmt(sums["guided"]), _fmt(gnorm), wall])
            path = os.path.join(out_dir, f"ckpt-{epoch:03d}.esc")
            save_checkpoint(path, model, epoch=epoch)
            ckpt_paths.append(path)
            if dev_set:
                dev = evaluate_dev(model, dev_set)
                dev_losses.append(dev)
                if tcfg.early_stop and stopper.update(dev):
                    stopped = True
                    break

    avg_path = None
    window = ckpt_paths[-min(tcfg.keep_last, len(ckpt_paths)):]
    if window:
        avg_path = os.path.join(out_dir, "avg.esc")
        avg = average_checkpoints(window)
        save_checkpoint(avg_path, avg.params, epoch=avg.epoch)
    return TrainResult(ckpt_paths=ckpt_paths, log_path=log_path,
                       dev_losses=dev_losses, avg_path=avg_path,
                       stopped_early=stopped)


def train_lm(lm, sequences: Sequence[Sequence[int]], epochs: int = 5,
             lr: float = 1e-2, seed: int = 0) -> List[float]:
    """Plain cross-entropy training of the fusion LM; returns the
    per-epoch mean loss trace."""
    if not sequences:
        raise DataError("empty LM training set")
    opt = Adam(lm.parameters())
    trace: List[float] = []
    for epoch in range(epochs):
        rng = np.random.default_rng(seed + epoch)
        order = rng.permutation(len(sequences))
        total = 0.0
        n_tok = sum(len(s) + 1 for s in sequences)
        for i in order:
            ys = list(sequences[i])
            lm.zero_grad()
            with T.Graph(seed=seed * 7919 + epoch * 613 + int(i)):
                lp = lm.full_logprobs([SOS_EOS_ID] + ys)
                loss = L.s2s_cross_entropy(lp, ys + [SOS_EOS_ID])
                backward(loss)
            opt.step(lr)
            total += loss.item() * (len(ys) + 1) / n_tok
        trace.append(total)
    return trace
