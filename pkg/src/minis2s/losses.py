"""Training objectives: token cross-entropy, CTC, the joint weighted
loss, and the TTS composite (L1 + weighted BCE + guided attention).

Every loss that normalizes accepts an optional `denom`: passing the
batch-level token/frame count instead of the per-utterance one makes
micro-batch gradient accumulation reproduce the big-batch update
exactly, because each utterance contributes sum/denom with the same
denominator either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, ImpossibleAlignmentError
from .tensor import Tensor

LOG_ZERO = -1e30  # stand-in for log 0 inside the DP lattice


@dataclass
class LossReport:
    """Per-step loss bookkeeping written to the training log."""

    total: float = 0.0
    components: Dict[str, float] = field(default_factory=dict)
    n_tokens: int = 0
    n_frames: int = 0

    def component(self, name: str) -> float:
        return self.components.get(name, 0.0)


def s2s_cross_entropy(log_probs: Tensor, targets: Sequence[int],
                      denom: Optional[float] = None) -> Tensor:
    """Mean negative log-probability of the target tokens.

    `targets` must end with the end-of-sequence token; `denom` replaces
    the per-utterance length as the normalizer when accumulating.
    """
    targets = list(targets)
    if log_probs.shape[0] != len(targets):
        raise DimensionError(f"{log_probs.shape[0]} prediction rows for "
                             f"{len(targets)} targets")
    denom = float(len(targets)) if denom is None else float(denom)
    return -T.pick(log_probs, targets).sum() / denom


def expand_with_blanks(targets: Sequence[int], blank: int = 0) -> List[int]:
    z = [blank]
    for y in targets:
        z.append(y)
        z.append(blank)
    return z


def ctc_min_frames(targets: Sequence[int]) -> int:
    """Fewest frames that can carry the target: one per label plus a
    mandatory blank between equal neighbors."""
    targets = list(targets)
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _logsumexp(*vals: float) -> float:
    m = max(vals)
    if m <= LOG_ZERO:
        return LOG_ZERO
    return m + np.log(sum(np.exp(v - m) for v in vals))


def ctc_log_likelihood(log_probs: Tensor, targets: Sequence[int],
                       blank: int = 0) -> Tensor:
    """log p(targets | frames) marginalized over all blank-augmented
    monotonic alignments; the standard log-space forward algorithm.

    `log_probs` rows are per-frame log distributions over the vocabulary
    with the blank at index `blank`. The backward pass distributes the
    gradient by alignment posteriors (forward-backward), hand-derived
    for this op.
    """
    targets = [int(y) for y in targets]
    u = log_probs.data
    n_frames, vocab = u.shape
    for y in targets:
        if not 0 <= y < vocab:
            raise IndexError(f"target id {y} outside vocabulary of {vocab}")
        if y == blank:
            raise DimensionError("blank cannot appear in a CTC target")
    if ctc_min_frames(targets) > n_frames:
        raise ImpossibleAlignmentError(
            f"target of {len(targets)} labels needs at least "
            f"{ctc_min_frames(targets)} frames, got {n_frames}")
    if n_frames == 0:
        return Tensor(np.asarray(0.0))  # empty target over zero frames

    z = expand_with_blanks(targets, blank)
    s_len = len(z)

    alpha = np.full((n_frames, s_len), LOG_ZERO)
    alpha[0, 0] = u[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = u[0, z[1]]
    for t in range(1, n_frames):
        for s in range(s_len):
            best = alpha[t - 1, s]
            if s >= 1:
                best = _logsumexp(best, alpha[t - 1, s - 1])
            if s >= 2 and z[s] != blank and z[s] != z[s - 2]:
                best = _logsumexp(best, alpha[t - 1, s - 2])
            alpha[t, s] = best + u[t, z[s]] if best > LOG_ZERO else LOG_ZERO

    tail = (alpha[n_frames - 1, s_len - 1],)
    if s_len > 1:
        tail = tail + (alpha[n_frames - 1, s_len - 2],)
    logp = _logsumexp(*tail)

    beta = np.full((n_frames, s_len), LOG_ZERO)
    beta[n_frames - 1, s_len - 1] = u[n_frames - 1, z[s_len - 1]]
    if s_len > 1:
        beta[n_frames - 1, s_len - 2] = u[n_frames - 1, z[s_len - 2]]
    for t in range(n_frames - 2, -1, -1):
        for s in range(s_len - 1, -1, -1):
            best = beta[t + 1, s]
            if s + 1 < s_len:
                best = _logsumexp(best, beta[t + 1, s + 1])
            if s + 2 < s_len and z[s + 2] != blank and z[s + 2] != z[s]:
                best = _logsumexp(best, beta[t + 1, s + 2])
            beta[t, s] = best + u[t, z[s]] if best > LOG_ZERO else LOG_ZERO

    def bwd(g, log_probs=log_probs, alpha=alpha, beta=beta, u=u, z=z,
            logp=logp, n_frames=n_frames, vocab=vocab):
        if not log_probs.requires_grad:
            return
        grad = np.zeros((n_frames, vocab))
        for t in range(n_frames):
            per_symbol: Dict[int, float] = {}
            for s, k in enumerate(z):
                if alpha[t, s] <= LOG_ZERO or beta[t, s] <= LOG_ZERO:
                    continue
                v = alpha[t, s] + beta[t, s]
                per_symbol[k] = _logsumexp(per_symbol[k], v) if k in per_symbol else v
            for k, v in per_symbol.items():
                # alpha and beta both include u[t, k]; remove one copy
                grad[t, k] = np.exp(v - u[t, k] - logp)
        log_probs._accumulate(float(g) * grad)

    return T.from_op(np.asarray(logp), (log_probs,), bwd)


def joint_asr_loss(s2s_nll: Tensor, ctc_nll: Optional[Tensor],
                   alpha: float) -> Tensor:
    """alpha-weighted sum of the attention and CTC negative
    log-likelihoods."""
    if ctc_nll is None:
        if alpha != 1.0:
            raise DimensionError("alpha < 1 requires a CTC term")
        return s2s_nll
    return s2s_nll * alpha + ctc_nll * (1.0 - alpha)


def tts_l1(coarse: Tensor, refined: Tensor, target: np.ndarray,
           denom: Optional[float] = None) -> Tensor:
    """Mean absolute error against the target frames, summed over the
    pre-Postnet and post-Postnet predictions."""
    target = np.asarray(target, dtype=np.float64)
    if coarse.shape != target.shape or refined.shape != target.shape:
        raise DimensionError(f"prediction shapes {coarse.shape}/{refined.shape} "
                             f"do not match target {target.shape}")
    denom = float(target.size) if denom is None else float(denom)
    tgt = Tensor(target)
    return ((coarse - tgt).abs().sum() + (refined - tgt).abs().sum()) / denom


def weighted_bce(eos_logits: Tensor, eos_targets: Sequence[float],
                 pos_weight: float = 5.0,
                 denom: Optional[float] = None) -> Tensor:
    """Binary cross-entropy on the stop flag with positives up-weighted,
    computed through log-sigmoid for stability at large logits."""
    y = np.asarray(list(eos_targets), dtype=np.float64)
    if eos_logits.shape != y.shape:
        raise DimensionError(f"{eos_logits.shape} logits for {y.shape} targets")
    denom = float(y.size) if denom is None else float(denom)
    pos = T.log_sigmoid(eos_logits) * Tensor(pos_weight * y)
    neg = T.log_sigmoid(-eos_logits) * Tensor(1.0 - y)
    return -(pos + neg).sum() / denom


def guided_attention_weight(n_dec: int, n_enc: int, g: float = 0.4) -> np.ndarray:
    """Penalty mask that is 0 on the time-normalized diagonal and grows
    toward 1 away from it."""
    t = np.arange(n_dec)[:, None] / n_dec
    u = np.arange(n_enc)[None, :] / n_enc
    return 1.0 - np.exp(-((u - t) ** 2) / (2.0 * g * g))


def guided_attention_loss(matrices: Sequence[Tensor], g: float = 0.4) -> Tensor:
    """Average over the selected heads of the per-row penalty mass.

    Each attention row is a distribution, so the per-head value is
    sum(A * W) / n_rows: the expected penalty under the attention,
    averaged over decoder steps.
    """
    matrices = list(matrices)
    if not matrices:
        raise DimensionError("guided attention needs at least one matrix")
    per_head = []
    for a in matrices:
        n_dec, n_enc = a.shape
        w = guided_attention_weight(n_dec, n_enc, g)
        per_head.append((a * Tensor(w)).sum() / n_dec)
    total = per_head[0]
    for v in per_head[1:]:
        total = total + v
    return total / len(per_head)


def tts_total_loss(l1: Tensor, bce: Tensor, guided: Optional[Tensor]) -> Tensor:
    total = l1 + bce
    if guided is not None:
        total = total + guided
    return total
