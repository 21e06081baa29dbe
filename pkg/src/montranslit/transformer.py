"""Self-attention encoder-decoder with sinusoidal position encoding.

Pre-norm residual wiring: every sub-layer computes ``x + f(norm(x))``,
with a final layer norm after each stack.  Decoder blocks run masked
self-attention, cross-attention over the encoder output, then the
feed-forward net.  Masked attention logits get -1e9 added before the
softmax; a query's own position is never masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import Batch
from .rnn import xavier_uniform


class ConfigError(ValueError):
    """Inconsistent transformer configuration."""


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 0  # 0 means 4 * d_model
    dropout: float = 0.0
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the position encoding")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Sinusoidal features: sin at even columns, cos at odd columns."""
    if d_model % 2 != 0:
        raise ConfigError("d_model must be even")
    pos = np.arange(length)[:, None]
    idx = np.arange(0, d_model, 2)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe)


@dataclass(frozen=True)
class MaskSpec:
    """Attention visibility: key padding per sequence plus a causal flag."""

    key_padding: np.ndarray | None = None  # [B, Tk], 1.0 = real position
    causal: bool = False

    def additive(self, t_q: int, t_k: int) -> np.ndarray | None:
        if self.key_padding is None and not self.causal:
            return None
        batch = 1 if self.key_padding is None else self.key_padding.shape[0]
        mask = np.zeros((batch, 1, t_q, t_k))
        if self.key_padding is not None:
            mask += (1.0 - self.key_padding[:, None, None, :]) * -1e9
        if self.causal:
            mask += np.triu(np.ones((t_q, t_k)), k=1) * -1e9
        return mask


class TransformerModel:
    def __init__(
        self,
        config: TransformerConfig,
        n_src_vocab: int,
        n_tgt_vocab: int,
        rng: np.random.Generator,
    ):
        self.config = config
        self.n_src_vocab = n_src_vocab
        self.n_tgt_vocab = n_tgt_vocab
        self.params: dict[str, Parameter] = {}
        d, f = config.d_model, config.ffn_dim

        def add(name, value):
            self.params[name] = Parameter(name, value)

        def add_attention(prefix):
            # no projection biases: a key bias cancels inside the softmax
            for proj in ("q", "k", "v", "o"):
                add(f"{prefix}.w{proj}", xavier_uniform(rng, d, d))

        def add_norm(prefix):
            add(f"{prefix}.g", np.ones(d))
            add(f"{prefix}.b", np.zeros(d))

        add("src_embed", xavier_uniform(rng, n_src_vocab, d))
        add("tgt_embed", xavier_uniform(rng, n_tgt_vocab, d))
        for layer in range(config.layers):
            enc = f"enc.{layer}"
            add_norm(f"{enc}.ln1")
            add_attention(f"{enc}.self")
            add_norm(f"{enc}.ln2")
            add(f"{enc}.ffn.w1", xavier_uniform(rng, d, f))
            add(f"{enc}.ffn.b1", np.zeros(f))
            add(f"{enc}.ffn.w2", xavier_uniform(rng, f, d))
            add(f"{enc}.ffn.b2", np.zeros(d))
            dec = f"dec.{layer}"
            add_norm(f"{dec}.ln1")
            add_attention(f"{dec}.self")
            add_norm(f"{dec}.ln2")
            add_attention(f"{dec}.cross")
            add_norm(f"{dec}.ln3")
            add(f"{dec}.ffn.w1", xavier_uniform(rng, d, f))
            add(f"{dec}.ffn.b1", np.zeros(f))
            add(f"{dec}.ffn.w2", xavier_uniform(rng, f, d))
            add(f"{dec}.ffn.b2", np.zeros(d))
        add_norm("enc.final_ln")
        add_norm("dec.final_ln")
        # quarter-scale output projection: the final layer norm feeds unit
        # variance, so a full-scale init would start far from uniform
        add("out.w", 0.25 * xavier_uniform(rng, d, n_tgt_vocab))
        add("out.b", np.zeros(n_tgt_vocab))

    kind = "transformer"

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def bind(self, tape) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(p.value) for k, p in self.params.items()}
        return {k: tape.watch(p) for k, p in self.params.items()}

    def config_dict(self) -> dict:
        return {
            "d_model": self.config.d_model,
            "heads": self.config.heads,
            "layers": self.config.layers,
            "ffn_dim": self.config.ffn_dim,
            "dropout": self.config.dropout,
            "label_smoothing": self.config.label_smoothing,
            "n_src_vocab": self.n_src_vocab,
            "n_tgt_vocab": self.n_tgt_vocab,
        }

    def loss(self, batch: Batch, tape, dropout_rng=None) -> Tensor:
        return loss_teacher_forced(batch, self, tape, dropout_rng)

    def start_session(self, src_ids) -> "TransformerSession":
        return TransformerSession(self, src_ids)


def _attention_params(bound, prefix):
    return {name: bound[f"{prefix}.{name}"] for name in ("wq", "wk", "wv", "wo")}


def multi_head_attention(q, k, v, mask: MaskSpec | None, params: dict, heads: int):
    """Scaled dot-product attention over H heads; returns (output, weights).

    Accepts ``[T, d]`` or ``[B, T, d]`` operands; weights come back as
    ``[B, H, Tq, Tk]`` (or without the batch axis for 2-D inputs).
    """
    single = q.ndim == 2
    if single:
        q = ad.reshape(q, (1,) + q.shape)
        k = ad.reshape(k, (1,) + k.shape)
        v = ad.reshape(v, (1,) + v.shape)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ad.ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    batch, t_q, d = q.shape
    t_k = k.shape[1]
    if d % heads != 0:
        raise ad.ShapeError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads

    def project(x, t_len, w):
        out = ad.matmul(x, w)
        return ad.transpose(ad.reshape(out, (batch, t_len, heads, dh)), (0, 2, 1, 3))

    qh = project(q, t_q, params["wq"])  # [B, H, Tq, dh]
    kh = project(k, t_k, params["wk"])
    vh = project(v, t_k, params["wv"])
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    additive = mask.additive(t_q, t_k) if mask is not None else None
    if additive is not None:
        scores = scores + Tensor(additive)
    weights = ad.softmax(scores)  # [B, H, Tq, Tk]
    ctx = ad.matmul(weights, vh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, t_q, d))
    out = ad.matmul(merged, params["wo"])
    if single:
        out = ad.reshape(out, out.shape[1:])
        weights = ad.reshape(weights, weights.shape[1:])
    return out, weights


def _ffn(x, bound, prefix):
    hidden = ad.relu(ad.matmul(x, bound[f"{prefix}.w1"]) + bound[f"{prefix}.b1"])
    return ad.matmul(hidden, bound[f"{prefix}.w2"]) + bound[f"{prefix}.b2"]


def _norm(x, bound, prefix):
    return ad.layer_norm(x, bound[f"{prefix}.g"], bound[f"{prefix}.b"])


def transformer_block(
    x,
    context,
    self_mask: MaskSpec | None,
    cross_mask: MaskSpec | None,
    bound: dict,
    prefix: str,
    heads: int,
    dropout_rate: float = 0.0,
    dropout_rng=None,
):
    """Pre-norm residual block: self-attention, optional cross, then FFN."""

    def maybe_drop(t):
        if dropout_rng is not None and dropout_rate > 0:
            return ad.dropout(t, dropout_rate, dropout_rng)
        return t

    normed = _norm(x, bound, f"{prefix}.ln1")
    attn, _ = multi_head_attention(
        normed, normed, normed, self_mask,
        _attention_params(bound, f"{prefix}.self"), heads,
    )
    x = x + maybe_drop(attn)
    if context is not None:
        queries = _norm(x, bound, f"{prefix}.ln2")
        cross, _ = multi_head_attention(
            queries, context, context, cross_mask,
            _attention_params(bound, f"{prefix}.cross"), heads,
        )
        x = x + maybe_drop(cross)
        ffn_ln = f"{prefix}.ln3"
    else:
        ffn_ln = f"{prefix}.ln2"
    return x + maybe_drop(_ffn(_norm(x, bound, ffn_ln), bound, f"{prefix}.ffn"))


def _embed(bound, name, ids, d_model, dropout_rate=0.0, dropout_rng=None):
    ids = np.asarray(ids, dtype=np.int64)
    emb = ad.embedding_lookup(bound[name], ids) * math.sqrt(d_model)
    pe = positional_encoding(ids.shape[-1], d_model)
    out = emb + pe
    if dropout_rng is not None and dropout_rate > 0:
        out = ad.dropout(out, dropout_rate, dropout_rng)
    return out


def _encode_batch(src_ids, src_mask, bound, config, dropout_rng=None):
    x = _embed(bound, "src_embed", src_ids, config.d_model, config.dropout, dropout_rng)
    mask = MaskSpec(key_padding=src_mask)
    for layer in range(config.layers):
        x = transformer_block(
            x, None, mask, None, bound, f"enc.{layer}", config.heads,
            config.dropout, dropout_rng,
        )
    return _norm(x, bound, "enc.final_ln")


def _decode_batch(tgt_ids, enc_out, src_mask, bound, config, dropout_rng=None):
    x = _embed(bound, "tgt_embed", tgt_ids, config.d_model, config.dropout, dropout_rng)
    self_mask = MaskSpec(causal=True)
    cross_mask = MaskSpec(key_padding=src_mask)
    for layer in range(config.layers):
        x = transformer_block(
            x, enc_out, self_mask, cross_mask, bound, f"dec.{layer}", config.heads,
            config.dropout, dropout_rng,
        )
    x = _norm(x, bound, "dec.final_ln")
    return ad.matmul(x, bound["out.w"]) + bound["out.b"]


# ---------------------------------------------------------------------------
# public single-sequence operations


def encode(ids, model: TransformerModel, tape=None) -> Tensor:
    """Encode one id sequence to ``[n, d_model]`` features."""
    arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    out = _encode_batch(arr, None, model.bind(tape), model.config)
    return ad.reshape(out, out.shape[1:])


def decode_logits(prefix_ids, enc_out, model: TransformerModel, tape=None) -> Tensor:
    """Logits ``[t, V]`` for every position of a BOS-led prefix."""
    arr = np.asarray(prefix_ids, dtype=np.int64).reshape(1, -1)
    enc3 = ad.reshape(enc_out, (1,) + enc_out.shape) if enc_out.ndim == 2 else enc_out
    out = _decode_batch(arr, enc3, None, model.bind(tape), model.config)
    return ad.reshape(out, out.shape[1:])


def loss_teacher_forced(batch: Batch, model: TransformerModel, tape=None, dropout_rng=None) -> Tensor:
    bound = model.bind(tape)
    enc_out = _encode_batch(batch.src, batch.src_mask, bound, model.config, dropout_rng)
    logits = _decode_batch(batch.tgt_in, enc_out, batch.src_mask, bound, model.config, dropout_rng)
    return ad.cross_entropy(
        logits, batch.tgt_out, batch.tgt_mask, model.config.label_smoothing
    )


class TransformerSession:
    """Decode cursor: encoder output cached, prefix re-decoded per step."""

    def __init__(self, model: TransformerModel, src_ids, _carry=None):
        self.model = model
        if _carry is None:
            from .codec import BOS_ID

            bound = model.bind(None)
            arr = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
            enc_out = _encode_batch(arr, None, bound, model.config)
            self._bound, self._enc, self._prefix = bound, enc_out, (BOS_ID,)
        else:
            self._bound, self._enc, self._prefix = _carry
        self._cached = None

    def logprobs(self) -> np.ndarray:
        if self._cached is None:
            arr = np.asarray(self._prefix, dtype=np.int64).reshape(1, -1)
            logits = _decode_batch(arr, self._enc, None, self._bound, self.model.config)
            self._cached = ad.log_softmax_np(logits.data[0, -1])
        return self._cached

    def advanced(self, token_id: int) -> "TransformerSession":
        return TransformerSession(
            self.model, None, (self._bound, self._enc, self._prefix + (token_id,))
        )
