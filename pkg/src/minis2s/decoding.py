"""Search-time inference: hybrid beam search over the attention
decoder with incremental CTC prefix scoring and optional recurrent-LM
fusion, plus a greedy baseline.

Scores combine as lambda * log p_s2s + (1 - lambda) * log p_ctc
+ gamma * log p_lm; models without a CTC head drop the middle term
(lambda acts as 1). All scoring is in log space; impossible CTC
prefixes carry -inf without ever producing NaN.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .models import BLANK_ID, SOS_EOS_ID


@dataclass
class BeamConfig:
    beam_size: int = 20
    lam: float = 0.7          # weight on the attention score; CTC gets 1 - lam
    gamma: float = 0.3        # LM weight when an LM is supplied
    max_len_ratio: float = 1.0
    length_penalty: float = 0.0  # additive per-token ranking bonus, off by default

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.max_len_ratio <= 0:
            raise ConfigError("max_len_ratio must be positive")


@dataclass
class CtcPrefixState:
    """Forward variables for one prefix: per-frame log-probability of
    having emitted the prefix with the last symbol non-blank (r_n) or
    with trailing blanks (r_b), plus the total prefix score."""

    r_n: np.ndarray
    r_b: np.ndarray
    psi: float
    last: Optional[int]


class CtcPrefixScorer:
    """Incremental prefix scoring over fixed per-frame CTC posteriors.

    extend() grows the prefix by one label and returns its total prefix
    log-probability; finish() scores the prefix as the complete
    labeling (the eos case)."""

    def __init__(self, log_probs: np.ndarray, blank: int = BLANK_ID):
        log_probs = np.asarray(log_probs, dtype=np.float64)
        if log_probs.ndim != 2 or log_probs.shape[0] < 1:
            raise DataError(f"CTC posteriors must be (frames, vocab), "
                            f"got {log_probs.shape}")
        self.u = log_probs
        self.blank = blank

    def initial_state(self) -> CtcPrefixState:
        n = self.u.shape[0]
        r_b = np.cumsum(self.u[:, self.blank])
        r_n = np.full(n, -np.inf)
        return CtcPrefixState(r_n=r_n, r_b=r_b, psi=0.0, last=None)

    def extend(self, state: CtcPrefixState, token: int) -> Tuple[float, CtcPrefixState]:
        if token == self.blank:
            raise DataError("cannot extend a CTC prefix with the blank")
        u = self.u
        n = u.shape[0]
        r_n = np.full(n, -np.inf)
        r_b = np.full(n, -np.inf)
        psi_terms = np.full(n, -np.inf)
        for t in range(n):
            if t == 0:
                # the new label is the first emission overall
                phi = 0.0 if state.last is None else -np.inf
                prev_n = -np.inf
                prev_b = -np.inf
            else:
                phi = state.r_b[t - 1]
                if token != state.last:
                    phi = np.logaddexp(phi, state.r_n[t - 1])
                prev_n = r_n[t - 1]
                prev_b = r_b[t - 1]
            r_n[t] = np.logaddexp(prev_n, phi) + u[t, token]
            r_b[t] = np.logaddexp(prev_b, r_n[t - 1] if t else -np.inf) \
                + u[t, self.blank]
            psi_terms[t] = phi + u[t, token]
        m = psi_terms.max()
        psi = float(m + np.log(np.exp(psi_terms - m).sum())) \
            if np.isfinite(m) else -np.inf
        return psi, CtcPrefixState(r_n=r_n, r_b=r_b, psi=psi, last=token)

    def finish(self, state: CtcPrefixState) -> float:
        """log-probability that the complete labeling equals the prefix."""
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...] = (SOS_EOS_ID,)
    log_s2s: float = 0.0
    log_ctc: float = 0.0
    log_lm: float = 0.0
    combined: float = 0.0
    finished: bool = False
    ctc_state: Optional[CtcPrefixState] = None

    @property
    def tokens(self) -> Tuple[int, ...]:
        toks = self.prefix[1:]
        if toks and toks[-1] == SOS_EOS_ID:
            toks = toks[:-1]
        return toks


def combined_score(log_s2s: float, log_ctc: float, log_lm: float,
                   config: BeamConfig, use_ctc: bool) -> float:
    # zero weights must kill their term even when the score is -inf
    lam = config.lam if use_ctc else 1.0
    total = lam * log_s2s if lam else 0.0
    if use_ctc and (1.0 - lam):
        total += (1.0 - lam) * log_ctc
    if config.gamma:
        total += config.gamma * log_lm
    return total


def _rank_key(hyp: Hypothesis, config: Optional[BeamConfig] = None):
    score = hyp.combined
    if config is not None and config.length_penalty:
        score += config.length_penalty * len(hyp.tokens)
    return (-score, len(hyp.tokens), hyp.tokens)


def rank_hypotheses(hyps: Sequence[Hypothesis],
                    config: Optional[BeamConfig] = None) -> List[Hypothesis]:
    """Best first; ties go to the shorter hypothesis, then to the
    lexicographically smaller token sequence."""
    return sorted(hyps, key=lambda h: _rank_key(h, config))


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: List[Hypothesis] = field(default_factory=list)
    no_finished: bool = False


def beam_search(enc, model, lm=None, config: Optional[BeamConfig] = None) -> BeamResult:
    """Breadth-synchronous beam search over decoder steps.

    Every live hypothesis is expanded with every vocabulary token
    except the blank; extensions ending on eos move to the finished
    pool with the CTC termination score. Runs until all beams finish
    or ceil(max_len_ratio * n_sub) steps elapse.
    """
    config = config or BeamConfig()
    config.validate()
    n_sub = enc.x_e.shape[0]
    if n_sub == 0:
        raise DataError("cannot decode an empty encoded sequence")
    max_len = math.ceil(config.max_len_ratio * n_sub)
    vocab = model.config.vocab_size
    use_ctc = bool(getattr(model.config, "uses_ctc", False))

    scorer = None
    init_state = None
    if use_ctc:
        scorer = CtcPrefixScorer(model.ctc_logprobs(enc).data)
        init_state = scorer.initial_state()
    use_lm = lm is not None and config.gamma != 0.0

    live = [Hypothesis(ctc_state=init_state)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        candidates: List[Hypothesis] = []
        for hyp in live:
            prev = list(hyp.prefix[1:])
            s2s_row = model.next_token_logprobs(enc, prev)
            lm_row = lm.next_logprobs(prev) if use_lm else None
            for tok in range(vocab):
                if tok == BLANK_ID:
                    continue
                s2s = hyp.log_s2s + float(s2s_row[tok])
                lmp = hyp.log_lm + float(lm_row[tok]) if use_lm else 0.0
                if tok == SOS_EOS_ID:
                    ctc = scorer.finish(hyp.ctc_state) if scorer else 0.0
                    state = hyp.ctc_state
                elif scorer is not None:
                    ctc, state = scorer.extend(hyp.ctc_state, tok)
                else:
                    ctc, state = 0.0, None
                cand = Hypothesis(
                    prefix=hyp.prefix + (tok,), log_s2s=s2s, log_ctc=ctc,
                    log_lm=lmp, finished=(tok == SOS_EOS_ID), ctc_state=state)
                cand.combined = combined_score(s2s, ctc, lmp, config, use_ctc)
                candidates.append(cand)
        if not candidates:
            break
        # eos extensions compete with the rest for beam slots; the
        # survivors that finished retire to the pool
        kept = rank_hypotheses(candidates, config)[:config.beam_size]
        live = []
        for cand in kept:
            if cand.finished:
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break

    if finished:
        pool = rank_hypotheses(finished, config)
        return BeamResult(best=pool[0], nbest=pool[:config.beam_size])
    warnings.warn("no hypothesis finished within the length budget; "
                  "returning the best unfinished one")
    pool = rank_hypotheses(live, config)
    return BeamResult(best=pool[0], nbest=pool[:config.beam_size],
                      no_finished=True)


def greedy_decode(enc, model, max_len: Optional[int] = None) -> List[int]:
    """Argmax token per step until eos; diagnostic baseline."""
    n_sub = enc.x_e.shape[0]
    if n_sub == 0:
        raise DataError("cannot decode an empty encoded sequence")
    if max_len is None:
        max_len = n_sub
    tokens: List[int] = []
    for _ in range(max_len):
        row = np.array(model.next_token_logprobs(enc, tokens), copy=True)
        row[BLANK_ID] = -np.inf
        tok = int(row.argmax())
        if tok == SOS_EOS_ID:
            break
        tokens.append(tok)
    return tokens


def lm_score(lm, prefix: Sequence[int], next_token: int) -> float:
    return float(lm.next_logprobs(list(prefix))[next_token])
