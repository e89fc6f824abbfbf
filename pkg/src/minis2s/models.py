"""Model assembly: front ends, encoder/decoder bodies, task heads.

One factorization serves every task: EncPre -> EncBody -> DecPre ->
DecBody -> DecPost. Speech input goes through a subsampling front end,
text input through an embedding; the bodies are swappable between a
Transformer and an RNN without changing any interface shape.

Padded batches: every forward that takes sequences accepts the true
length next to the (possibly padded) buffer. Convolution tails are
re-zeroed stage by stage and attention masks hide padded keys, so a
padded run equals the unpadded run on the real frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .nn import (Conv1d, Conv2d, Dropout, Embedding, FeedForward, LayerNorm,
                 Linear, LSTM, LSTMCell, Module, ModuleList)
from .tensor import Tensor

BLANK_ID = 0
UNK_ID = 1
SOS_EOS_ID = 2
N_RESERVED = 3


@dataclass
class ModelConfig:
    task: str = "asr"                 # asr | st | tts
    body: str = "transformer"         # transformer | rnn
    e: int = 12                       # encoder layers
    d: int = 6                        # decoder layers
    d_att: int = 256
    d_ff: int = 2048
    d_head: int = 4
    dropout_rate: float = 0.1
    vocab_size: int = 0               # includes the 3 reserved ids
    feat_dim: int = 16
    normalize: str = "pre"            # pre | post | none
    src_residual: str = "paper"       # paper | conventional
    enc_pre: str = "conv"             # conv | vgg (speech front ends)
    alpha: float = 0.7                # s2s share of the joint loss; 1.0 = no CTC
    # tts
    reduction_factor: int = 1
    prenet_units: int = 256
    postnet_layers: int = 5
    prenet_dropout_rate: float = 0.5
    prenet_dropout_at_infer: bool = True
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.task not in ("asr", "st", "tts"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.body not in ("transformer", "rnn"):
            raise ConfigError(f"unknown body {self.body!r}")
        if self.e < 1 or self.d < 1:
            raise ConfigError("e and d must both be >= 1")
        if self.d_head < 1:
            raise ConfigError("d_head must be >= 1")
        if self.normalize not in ("pre", "post", "none"):
            raise ConfigError(f"unknown normalize mode {self.normalize!r}")
        if self.src_residual not in ("paper", "conventional"):
            raise ConfigError(f"unknown src_residual {self.src_residual!r}")
        if self.enc_pre not in ("conv", "vgg"):
            raise ConfigError(f"unknown enc_pre {self.enc_pre!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.task == "st" and self.alpha != 1.0:
            raise ConfigError("st targets are not monotonic with the source; "
                              "CTC cannot be enabled (alpha must be 1.0)")
        if self.task != "tts" and self.vocab_size < N_RESERVED + 1:
            raise ConfigError(f"vocab_size must be at least {N_RESERVED + 1}")
        if self.task == "tts":
            if self.vocab_size < N_RESERVED + 1:
                raise ConfigError("tts needs the text vocabulary size")
            if self.reduction_factor < 1:
                raise ConfigError("reduction_factor must be >= 1")
        return self

    @property
    def uses_ctc(self) -> bool:
        return self.task == "asr" and self.alpha < 1.0


@dataclass
class EncodedSequence:
    x_e: Tensor          # n_sub x d_att
    n_sub: int


@dataclass
class DecoderRecords:
    """Attention matrices captured per decoder layer during one forward."""
    self_att: List[A.AttentionRecord] = field(default_factory=list)
    src_att: List[A.AttentionRecord] = field(default_factory=list)


def conv_len(n: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def subsample_length(n: int, mode: str = "conv") -> int:
    if mode == "conv":
        return conv_len(conv_len(n))
    return n // 2 // 2


def _zero_tail(x: Tensor, n_true: int) -> Tensor:
    """Kill activations in padded rows so later stages see clean zeros."""
    if n_true >= x.shape[0]:
        return x
    mask = np.zeros(x.shape)
    mask[:n_true] = 1.0
    return x * Tensor(mask)


# ------------------------------------------------------------- front ends


class ConvSubsampler(Module):
    """Two stride-2 kernel-3 convolutions with ReLU, then projection + PE.

    Quarters the frame count: n -> ceil(n/2) -> ceil(ceil(n/2)/2).
    """

    MIN_FRAMES = 4

    def __init__(self, feat_dim: int, d_att: int, dropout_rate: float,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv1d(feat_dim, d_att, 3, rng, stride=2, padding=1)
        self.conv2 = Conv1d(d_att, d_att, 3, rng, stride=2, padding=1)
        self.proj = Linear(d_att, d_att, rng)
        self.drop = Dropout(dropout_rate)

    def forward(self, x: Tensor, n_true: int) -> Tuple[Tensor, int]:
        if n_true < self.MIN_FRAMES:
            raise DataError(f"input of {n_true} frames is too short for two "
                            f"stride-2 stages (need >= {self.MIN_FRAMES})")
        h = T.relu(self.conv1(x))
        len1 = conv_len(n_true)
        h = _zero_tail(h, len1)
        h = T.relu(self.conv2(h))
        len2 = conv_len(len1)
        h = _zero_tail(h, len2)
        h = self.drop(A.add_positional_encoding(self.proj(h)))
        return h, len2


class VggSubsampler(Module):
    """VGG-style alternative: two conv2d blocks with max pooling.

    Frame count drops to floor(n/4); the feature axis is pooled the same
    way and flattened into channels before the projection.
    """

    MIN_FRAMES = 4

    def __init__(self, feat_dim: int, d_att: int, dropout_rate: float,
                 rng: np.random.Generator):
        super().__init__()
        if feat_dim < 4:
            raise ConfigError("vgg front end needs feat_dim >= 4")
        c1 = max(1, d_att // 4)
        c2 = max(1, d_att // 2)
        self.c1, self.c2 = c1, c2
        self.conv1a = Conv2d(1, c1, 3, rng, padding=1)
        self.conv1b = Conv2d(c1, c1, 3, rng, padding=1)
        self.conv2a = Conv2d(c1, c2, 3, rng, padding=1)
        self.conv2b = Conv2d(c2, c2, 3, rng, padding=1)
        self.proj = Linear(c2 * (feat_dim // 4), d_att, rng)
        self.drop = Dropout(dropout_rate)

    def _block(self, x: Tensor, conv_a: Conv2d, conv_b: Conv2d,
               n_true: int) -> Tuple[Tensor, int]:
        h = T.relu(conv_a(x))
        h = self._zero_rows(h, n_true)
        h = T.relu(conv_b(h))
        h = self._zero_rows(h, n_true)
        h = T.max_pool2d(h, 2)
        return h, n_true // 2

    @staticmethod
    def _zero_rows(x: Tensor, n_true: int) -> Tensor:
        if n_true >= x.shape[1]:
            return x
        mask = np.zeros(x.shape)
        mask[:, :n_true] = 1.0
        return x * Tensor(mask)

    def forward(self, x: Tensor, n_true: int) -> Tuple[Tensor, int]:
        if n_true < self.MIN_FRAMES:
            raise DataError(f"input of {n_true} frames is too short for two "
                            f"pooling stages (need >= {self.MIN_FRAMES})")
        n, feat = x.shape
        img = x.reshape(1, n, feat)
        h, len1 = self._block(img, self.conv1a, self.conv1b, n_true)
        h, len2 = self._block(h, self.conv2a, self.conv2b, len1)
        h = self._zero_rows(h, len2)
        # (c2, t, f) -> (t, c2*f) as channel-blocked columns
        t4, f4 = h.shape[1], h.shape[2]
        planes = [h[c:c + 1].reshape(t4, f4) for c in range(self.c2)]
        flat = T.concat(planes, axis=1)
        out = self.drop(A.add_positional_encoding(self.proj(flat)))
        return out, len2


class TokenFrontEnd(Module):
    """Embedding + positional encoding; the decoder-side DecPre for
    token targets and the encoder-side EncPre for text input (TTS)."""

    def __init__(self, vocab_size: int, d_att: int, dropout_rate: float,
                 rng: np.random.Generator, scaled_pe: bool = False):
        super().__init__()
        self.embed = Embedding(vocab_size, d_att, rng)
        self.drop = Dropout(dropout_rate)
        # glorot rows are tiny next to unit-amplitude PE; the usual
        # sqrt(d) factor keeps token identity visible in the sum
        self.scale = float(np.sqrt(d_att))
        self.alpha = Tensor(1.0, requires_grad=True) if scaled_pe else None

    def forward(self, ids) -> Tensor:
        y = self.embed(list(ids)) * self.scale
        if y.shape[0] == 0:
            return y
        if self.alpha is not None:
            y = A.scaled_positional_encoding(y, self.alpha)
        else:
            y = A.add_positional_encoding(y)
        return self.drop(y)


# ------------------------------------------------------------- bodies


class TransformerEncoderLayer(Module):
    def __init__(self, d_att: int, d_ff: int, d_head: int, dropout_rate: float,
                 normalize: str, rng: np.random.Generator):
        super().__init__()
        from .nn import MultiHeadAttention
        self.normalize = normalize
        self.mha = MultiHeadAttention(d_att, d_head, rng)
        self.ff = FeedForward(d_att, d_ff, rng)
        self.drop = Dropout(dropout_rate)
        if normalize != "none":
            self.ln1 = LayerNorm(d_att)
            self.ln2 = LayerNorm(d_att)

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        if self.normalize == "pre":
            h = self.ln1(x)
            x = x + self.drop(self.mha(h, h, h, mask=mask))
            x = x + self.drop(self.ff(self.ln2(x)))
        elif self.normalize == "post":
            x = self.ln1(x + self.drop(self.mha(x, x, x, mask=mask)))
            x = self.ln2(x + self.drop(self.ff(x)))
        else:
            x = x + self.drop(self.mha(x, x, x, mask=mask))
            x = x + self.drop(self.ff(x))
        return x


class TransformerEncoderBody(Module):
    def __init__(self, e: int, d_att: int, d_ff: int, d_head: int,
                 dropout_rate: float, normalize: str, rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList([
            TransformerEncoderLayer(d_att, d_ff, d_head, dropout_rate,
                                    normalize, rng)
            for _ in range(e)])
        self.final_ln = LayerNorm(d_att) if normalize == "pre" else None

    def forward(self, x0: Tensor, n_true: int) -> Tensor:
        n_buf = x0.shape[0]
        mask = None
        if n_true < n_buf:
            key_ok = np.zeros(n_buf, dtype=bool)
            key_ok[:n_true] = True
            mask = np.tile(key_ok, (n_buf, 1))
        x = x0
        for layer in self.layers:
            x = layer(x, mask)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return x[:n_true] if n_true < n_buf else x


class BlstmEncoderLayer(Module):
    def __init__(self, d_in: int, d_att: int, rng: np.random.Generator):
        super().__init__()
        self.fwd = LSTM(d_in, d_att, rng)
        self.bwd = LSTM(d_in, d_att, rng, reverse=True)
        self.proj = Linear(2 * d_att, d_att, rng)

    def forward(self, x: Tensor) -> Tensor:
        both = T.concat([self.fwd(x), self.bwd(x)], axis=1)
        return T.tanh(self.proj(both))


class BlstmEncoderBody(Module):
    """Stacked bidirectional LSTM; forward/backward states concatenated
    and projected back to d_att after every layer."""

    def __init__(self, e: int, d_att: int, rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList([BlstmEncoderLayer(d_att, d_att, rng)
                                  for _ in range(e)])

    def forward(self, x0: Tensor, n_true: int) -> Tensor:
        x = x0[:n_true] if n_true < x0.shape[0] else x0
        for layer in self.layers:
            x = layer(x)
        return x


class TransformerDecoderLayer(Module):
    def __init__(self, d_att: int, d_ff: int, d_head: int, dropout_rate: float,
                 normalize: str, src_residual: str, rng: np.random.Generator):
        super().__init__()
        from .nn import MultiHeadAttention
        self.normalize = normalize
        self.src_residual = src_residual
        self.self_mha = MultiHeadAttention(d_att, d_head, rng)
        self.src_mha = MultiHeadAttention(d_att, d_head, rng)
        self.ff = FeedForward(d_att, d_ff, rng)
        self.drop = Dropout(dropout_rate)
        if normalize != "none":
            self.ln1 = LayerNorm(d_att)
            self.ln2 = LayerNorm(d_att)
            self.ln3 = LayerNorm(d_att)

    def forward(self, y: Tensor, x_e: Tensor, mask: np.ndarray,
                rec_self: Optional[A.AttentionRecord],
                rec_src: Optional[A.AttentionRecord]) -> Tensor:
        if self.normalize == "pre":
            h = self.ln1(y)
            y1 = y + self.drop(self.self_mha(h, h, h, mask=mask, record=rec_self))
            q = self.ln2(y1)
            base = y if self.src_residual == "paper" else y1
            y2 = base + self.drop(self.src_mha(q, x_e, x_e, record=rec_src))
            y3 = y2 + self.drop(self.ff(self.ln3(y2)))
        elif self.normalize == "post":
            y1 = self.ln1(y + self.drop(self.self_mha(y, y, y, mask=mask,
                                                      record=rec_self)))
            base = y if self.src_residual == "paper" else y1
            y2 = self.ln2(base + self.drop(self.src_mha(y1, x_e, x_e,
                                                        record=rec_src)))
            y3 = self.ln3(y2 + self.drop(self.ff(y2)))
        else:
            y1 = y + self.drop(self.self_mha(y, y, y, mask=mask, record=rec_self))
            base = y if self.src_residual == "paper" else y1
            y2 = base + self.drop(self.src_mha(y1, x_e, x_e, record=rec_src))
            y3 = y2 + self.drop(self.ff(y2))
        return y3


class TransformerDecoderBody(Module):
    def __init__(self, d: int, d_att: int, d_ff: int, d_head: int,
                 dropout_rate: float, normalize: str, src_residual: str,
                 rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList([
            TransformerDecoderLayer(d_att, d_ff, d_head, dropout_rate,
                                    normalize, src_residual, rng)
            for _ in range(d)])
        self.final_ln = LayerNorm(d_att) if normalize == "pre" else None

    def forward(self, y0: Tensor, x_e: Tensor,
                records: Optional[DecoderRecords] = None) -> Tensor:
        t = y0.shape[0]
        mask = A.causal_mask(t)
        y = y0
        for layer in self.layers:
            rec_self = rec_src = None
            if records is not None:
                rec_self = A.AttentionRecord()
                rec_src = A.AttentionRecord()
                records.self_att.append(rec_self)
                records.src_att.append(rec_src)
            y = layer(y, x_e, mask, rec_self, rec_src)
        if self.final_ln is not None:
            y = self.final_ln(y)
        return y


class AdditiveAttention(Module):
    """Content-based single-head attention for the RNN decoder: scores
    v^T tanh(W_h h_u + W_s s + b), normalized per step."""

    def __init__(self, d_att: int, rng: np.random.Generator):
        super().__init__()
        self.w_enc = Linear(d_att, d_att, rng, bias=False)
        self.w_state = Linear(d_att, d_att, rng)
        self.v = Linear(d_att, 1, rng, bias=False)

    def precompute(self, x_e: Tensor) -> Tensor:
        return self.w_enc(x_e)

    def forward(self, enc_proj: Tensor, x_e: Tensor, state: Tensor
                ) -> Tuple[Tensor, Tensor]:
        shift = self.w_state(state).reshape(enc_proj.shape[1])
        scores = self.v(T.tanh(enc_proj + shift))
        alpha = T.softmax(scores.T)            # (1, n_k)
        ctx = alpha @ x_e                       # (1, d_att)
        return ctx, alpha


class LstmDecoderBody(Module):
    """Unidirectional LSTM stack; every step attends over the encoder
    output, and the context vector rides along with the token embedding."""

    def __init__(self, d: int, d_att: int, rng: np.random.Generator):
        super().__init__()
        self.attention = AdditiveAttention(d_att, rng)
        cells = [LSTMCell(2 * d_att, d_att, rng)]
        cells += [LSTMCell(d_att, d_att, rng) for _ in range(d - 1)]
        self.cells = ModuleList(cells)
        self.out = Linear(2 * d_att, d_att, rng)
        self.d_att = d_att

    def forward(self, y0: Tensor, x_e: Tensor,
                records: Optional[DecoderRecords] = None) -> Tensor:
        t = y0.shape[0]
        d_att = self.d_att
        enc_proj = self.attention.precompute(x_e)
        hs = [Tensor(np.zeros((1, d_att))) for _ in self.cells]
        cs = [Tensor(np.zeros((1, d_att))) for _ in self.cells]
        outs = []
        alphas = []
        for step in range(t):
            ctx, alpha = self.attention(enc_proj, x_e, hs[-1])
            alphas.append(alpha)
            inp = T.concat([y0[step:step + 1], ctx], axis=1)
            for i, cell in enumerate(self.cells):
                hs[i], cs[i] = cell(inp, hs[i], cs[i])
                inp = hs[i]
            outs.append(T.tanh(self.out(T.concat([hs[-1], ctx], axis=1))))
        if records is not None:
            rec = A.AttentionRecord()
            rec.weights.append(T.concat(alphas, axis=0))
            records.src_att.append(rec)
        return T.concat(outs, axis=0)


# ------------------------------------------------------------- task models


class S2SModel(Module):
    """ASR/ST model: speech in, token log-probabilities out, with an
    optional CTC head sharing the encoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        if config.task not in ("asr", "st"):
            raise ConfigError(f"S2SModel serves asr/st, not {config.task!r}")
        self.config = config
        rng = np.random.default_rng(config.seed)
        sub_cls = ConvSubsampler if config.enc_pre == "conv" else VggSubsampler
        self.enc_pre = sub_cls(config.feat_dim, config.d_att,
                               config.dropout_rate, rng)
        if config.body == "transformer":
            self.enc_body = TransformerEncoderBody(
                config.e, config.d_att, config.d_ff, config.d_head,
                config.dropout_rate, config.normalize, rng)
            self.dec_body = TransformerDecoderBody(
                config.d, config.d_att, config.d_ff, config.d_head,
                config.dropout_rate, config.normalize, config.src_residual, rng)
        else:
            self.enc_body = BlstmEncoderBody(config.e, config.d_att, rng)
            self.dec_body = LstmDecoderBody(config.d, config.d_att, rng)
        self.dec_pre = TokenFrontEnd(config.vocab_size, config.d_att,
                                     config.dropout_rate, rng)
        self.dec_post = Linear(config.d_att, config.vocab_size, rng)
        self.ctc_post = (Linear(config.d_att, config.vocab_size, rng)
                         if config.uses_ctc else None)

    def encode(self, x: Tensor, n_true: Optional[int] = None) -> EncodedSequence:
        n_true = x.shape[0] if n_true is None else n_true
        x0, n_sub = self.enc_pre(x, n_true)
        x_e = self.enc_body(x0, n_sub)
        return EncodedSequence(x_e=x_e, n_sub=n_sub)

    def decode_logprobs(self, enc: EncodedSequence, ys_in,
                        records: Optional[DecoderRecords] = None) -> Tensor:
        """Log-probabilities for each next token given the prefix so far;
        ys_in starts with the start-of-sequence id."""
        y0 = self.dec_pre(ys_in)
        y_d = self.dec_body(y0, enc.x_e, records=records)
        return T.log_softmax(self.dec_post(y_d))

    def ctc_logprobs(self, enc: EncodedSequence) -> Tensor:
        if self.ctc_post is None:
            raise ConfigError("this model has no CTC head")
        return T.log_softmax(self.ctc_post(enc.x_e))

    def next_token_logprobs(self, enc: EncodedSequence, prefix) -> np.ndarray:
        """Decode-time scoring: distribution over the next token after
        [sos] + prefix. Full-prefix recomputation each call."""
        with T.no_grad():
            lp = self.decode_logprobs(enc, [SOS_EOS_ID] + list(prefix))
        return lp.data[-1]


@dataclass
class TtsForward:
    coarse: Tensor        # n_pad x feat_dim (frame rate)
    refined: Tensor       # n_pad x feat_dim
    eos_logits: Tensor    # n_steps (decoder rate)
    records: DecoderRecords
    n_pad: int
    n_steps: int


class Prenet(Module):
    """Feature bottleneck in front of the TTS decoder. Its dropout stays
    active at inference when the config says so; that stochasticity is
    what keeps autoregressive generation from collapsing."""

    def __init__(self, feat_dim: int, units: int, d_att: int, rate: float,
                 always_dropout: bool, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(feat_dim, units, rng)
        self.lin2 = Linear(units, units, rng)
        self.proj = Linear(units, d_att, rng)
        self.rate = rate
        self.always_dropout = always_dropout

    def forward(self, y: Tensor) -> Tensor:
        training = self.training or self.always_dropout
        h = T.dropout(T.relu(self.lin1(y)), self.rate, training=training)
        h = T.dropout(T.relu(self.lin2(h)), self.rate, training=training)
        return self.proj(h)


class Postnet(Module):
    """Five 1-d convolutions refining the coarse spectrogram residually.

    Batch statistics are useless at batch size 1, so the inner layers
    normalize per frame instead (layer_norm substitution).
    """

    def __init__(self, feat_dim: int, channels: int, n_layers: int,
                 dropout_rate: float, rng: np.random.Generator):
        super().__init__()
        convs, norms = [], []
        for i in range(n_layers):
            c_in = feat_dim if i == 0 else channels
            c_out = feat_dim if i == n_layers - 1 else channels
            convs.append(Conv1d(c_in, c_out, 5, rng, stride=1, padding=2))
            norms.append(LayerNorm(c_out) if i < n_layers - 1 else None)
        self.convs = ModuleList(convs)
        self.norms = ModuleList([n for n in norms if n is not None])
        self.n_layers = n_layers
        self.drop = Dropout(dropout_rate)

    def forward(self, y: Tensor) -> Tensor:
        h = y
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < self.n_layers - 1:
                h = self.drop(T.tanh(self.norms[i](h)))
        return h


class TtsModel(Module):
    """Text in, feature frames out, with EOS logits per decoder step and
    a reduction factor r grouping r frames per step."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        if config.task != "tts":
            raise ConfigError("TtsModel requires task=tts")
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.enc_pre = TokenFrontEnd(config.vocab_size, config.d_att,
                                     config.dropout_rate, rng, scaled_pe=True)
        if config.body == "transformer":
            self.enc_body = TransformerEncoderBody(
                config.e, config.d_att, config.d_ff, config.d_head,
                config.dropout_rate, config.normalize, rng)
            self.dec_body = TransformerDecoderBody(
                config.d, config.d_att, config.d_ff, config.d_head,
                config.dropout_rate, config.normalize, config.src_residual, rng)
        else:
            self.enc_body = BlstmEncoderBody(config.e, config.d_att, rng)
            self.dec_body = LstmDecoderBody(config.d, config.d_att, rng)
        self.prenet = Prenet(config.feat_dim, config.prenet_units, config.d_att,
                             config.prenet_dropout_rate,
                             config.prenet_dropout_at_infer, rng)
        self.dec_alpha = Tensor(1.0, requires_grad=True)
        r = config.reduction_factor
        self.feat_head = Linear(config.d_att, config.feat_dim * r, rng)
        self.eos_head = Linear(config.d_att, 1, rng)
        self.postnet = Postnet(config.feat_dim, config.d_att,
                               config.postnet_layers, config.dropout_rate, rng)

    def encode(self, token_ids) -> EncodedSequence:
        ids = list(token_ids)
        if not ids:
            raise DataError("empty text input")
        x0 = self.enc_pre(ids)
        x_e = self.enc_body(x0, len(ids))
        return EncodedSequence(x_e=x_e, n_sub=len(ids))

    def pad_target(self, feats: np.ndarray) -> np.ndarray:
        """Repeat the final frame until the length divides r."""
        r = self.config.reduction_factor
        n = feats.shape[0]
        rem = (-n) % r
        if rem:
            feats = np.concatenate([feats, np.tile(feats[-1:], (rem, 1))])
        return feats

    def _decoder_inputs(self, padded: np.ndarray) -> np.ndarray:
        """Teacher forcing: step j consumes the last frame of group j-1;
        step 0 consumes zeros."""
        r = self.config.reduction_factor
        n_steps = padded.shape[0] // r
        prev = np.zeros((n_steps, padded.shape[1]))
        for j in range(1, n_steps):
            prev[j] = padded[j * r - 1]
        return prev

    def _run_decoder(self, enc: EncodedSequence, frames_in: np.ndarray,
                     records: Optional[DecoderRecords]) -> Tensor:
        y0 = self.prenet(Tensor(frames_in))
        y0 = A.scaled_positional_encoding(y0, self.dec_alpha)
        return self.dec_body(y0, enc.x_e, records=records)

    def forward_teacher(self, enc: EncodedSequence,
                        target_feats: np.ndarray) -> TtsForward:
        r = self.config.reduction_factor
        feat_dim = self.config.feat_dim
        padded = self.pad_target(np.asarray(target_feats, dtype=np.float64))
        n_pad = padded.shape[0]
        n_steps = n_pad // r
        records = DecoderRecords()
        y_d = self._run_decoder(enc, self._decoder_inputs(padded), records)
        coarse = self.feat_head(y_d).reshape(n_pad, feat_dim)
        eos_logits = self.eos_head(y_d).reshape(n_steps)
        refined = coarse + self.postnet(coarse)
        return TtsForward(coarse=coarse, refined=refined, eos_logits=eos_logits,
                          records=records, n_pad=n_pad, n_steps=n_steps)

    def infer(self, token_ids, eos_threshold: float = 0.5,
              max_frames: int = 400, seed: int = 0) -> Tuple[np.ndarray, str]:
        """Autoregressive generation; returns (frames, stop reason), where
        the reason is "eos" or "cap".

        Each step recomputes the decoder over the whole refined prefix
        (naive quadratic recompute) and feeds the refined frames back
        through the Prenet. The Prenet may keep its dropout on here, so
        the pass runs under its own seeded Graph for reproducibility.
        """
        r = self.config.reduction_factor
        feat_dim = self.config.feat_dim
        max_steps = max(1, -(-max_frames // r))
        refined = np.zeros((0, feat_dim))
        reason = "cap"
        with T.no_grad(), T.Graph(seed=seed):
            enc = self.encode(token_ids)
            for step in range(max_steps):
                prev = np.zeros((step + 1, feat_dim))
                for j in range(1, step + 1):
                    prev[j] = refined[j * r - 1]
                y_d = self._run_decoder(enc, prev, records=None)
                coarse = self.feat_head(y_d).reshape((step + 1) * r, feat_dim)
                refined = (coarse + self.postnet(coarse)).data
                eos_logit = float(self.eos_head(y_d).data[step, 0])
                if _sigmoid_scalar(eos_logit) > eos_threshold:
                    reason = "eos"
                    break
        if reason == "cap":
            refined = refined[:max_frames]
        return refined, reason

    def guided_attention_records(self, records: DecoderRecords,
                                 n_layers: int = 2, n_heads: int = 2
                                 ) -> List[Tensor]:
        """Default selection for the guided attention loss: up to n_heads
        heads from each of the last n_layers source-attention records."""
        selected = []
        for rec in records.src_att[-n_layers:]:
            selected.extend(rec.weights[:n_heads])
        return selected


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


class RnnLm(Module):
    """Small recurrent LM over target token sequences for decode fusion."""

    def __init__(self, vocab_size: int, d_lm: int = 128, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.embed = Embedding(vocab_size, d_lm, rng)
        self.lstm = LSTM(d_lm, d_lm, rng)
        self.out = Linear(d_lm, vocab_size, rng)

    def full_logprobs(self, ys_in) -> Tensor:
        """(t, V) next-token log-probs for teacher-forced training."""
        y = self.embed(list(ys_in))
        return T.log_softmax(self.out(self.lstm(y)))

    def next_logprobs(self, prefix) -> np.ndarray:
        with T.no_grad():
            lp = self.full_logprobs([SOS_EOS_ID] + list(prefix))
        return lp.data[-1]


def build_model(config: ModelConfig):
    if config.task == "tts":
        return TtsModel(config)
    return S2SModel(config)
