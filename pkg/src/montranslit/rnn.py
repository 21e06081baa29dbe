"""BiLSTM encoder with LSTM decoder, attention optional.

The encoder stacks bidirectional LSTM layers and concatenates the two
directions per position; the decoder is a unidirectional stack of the
same depth whose initial state is an affine map of the encoder's final
forward and backward states.  With attention enabled, the output
projection sees the decoder state concatenated with a bilinear-scored
context over encoder positions; without it, source information enters
only through the initial state.

All internals are batched ``[B, ...]``; the public operations accept a
single sequence and add the batch axis themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import Batch


@dataclass(frozen=True)
class RnnConfig:
    embed_dim: int = 128
    hidden_units: int = 512
    layers: int = 1
    attention: bool = False
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.hidden_units < 1 or self.layers < 1:
            raise ValueError("hidden_units and layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


class RnnModel:
    def __init__(
        self,
        config: RnnConfig,
        n_src_vocab: int,
        n_tgt_vocab: int,
        rng: np.random.Generator,
    ):
        self.config = config
        self.n_src_vocab = n_src_vocab
        self.n_tgt_vocab = n_tgt_vocab
        self.params: dict[str, Parameter] = {}
        u, e, nl = config.hidden_units, config.embed_dim, config.layers

        def add(name, value):
            self.params[name] = Parameter(name, value)

        add("src_embed", xavier_uniform(rng, n_src_vocab, e))
        add("tgt_embed", xavier_uniform(rng, n_tgt_vocab, e))
        for layer in range(nl):
            in_dim = e if layer == 0 else 2 * u
            for direction in ("fw", "bw"):
                prefix = f"enc.{layer}.{direction}"
                add(f"{prefix}.wx", xavier_uniform(rng, in_dim, 4 * u))
                add(f"{prefix}.wh", xavier_uniform(rng, u, 4 * u))
                bias = np.zeros(4 * u)
                bias[u : 2 * u] = 1.0  # forget gate opens at init
                add(f"{prefix}.b", bias)
        for layer in range(nl):
            in_dim = e if layer == 0 else u
            add(f"dec.{layer}.wx", xavier_uniform(rng, in_dim, 4 * u))
            add(f"dec.{layer}.wh", xavier_uniform(rng, u, 4 * u))
            bias = np.zeros(4 * u)
            bias[u : 2 * u] = 1.0
            add(f"dec.{layer}.b", bias)
            add(f"dec.{layer}.init_h.w", xavier_uniform(rng, 2 * u, u))
            add(f"dec.{layer}.init_h.b", np.zeros(u))
            add(f"dec.{layer}.init_c.w", xavier_uniform(rng, 2 * u, u))
            add(f"dec.{layer}.init_c.b", np.zeros(u))
        if config.attention:
            add("att.w", xavier_uniform(rng, u, 2 * u))
        out_in = 3 * u if config.attention else u
        add("out.w", xavier_uniform(rng, out_in, n_tgt_vocab))
        add("out.b", np.zeros(n_tgt_vocab))

    @property
    def kind(self) -> str:
        return "rnn_att" if self.config.attention else "rnn"

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def bind(self, tape) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(p.value) for k, p in self.params.items()}
        return {k: tape.watch(p) for k, p in self.params.items()}

    def config_dict(self) -> dict:
        return {
            "embed_dim": self.config.embed_dim,
            "hidden_units": self.config.hidden_units,
            "layers": self.config.layers,
            "attention": self.config.attention,
            "dropout": self.config.dropout,
            "n_src_vocab": self.n_src_vocab,
            "n_tgt_vocab": self.n_tgt_vocab,
        }

    def loss(self, batch: Batch, tape, dropout_rng=None) -> Tensor:
        return forward_teacher_forced(batch, self, tape, dropout_rng)

    def start_session(self, src_ids) -> "RnnSession":
        return RnnSession(self, src_ids)


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; works on ``[d]`` or ``[B, d]`` inputs.

    Gates in packed order (input, forget, candidate, output):
    ``c' = f*c + i*tanh_cand`` and ``h' = o*tanh(c')``.
    """
    h, c = state
    u = h.shape[-1]
    gates = ad.matmul(x, params["wx"]) + ad.matmul(h, params["wh"]) + params["b"]
    gi = ad.sigmoid(ad.narrow(gates, -1, 0, u))
    gf = ad.sigmoid(ad.narrow(gates, -1, u, u))
    gc = ad.tanh(ad.narrow(gates, -1, 2 * u, u))
    go = ad.sigmoid(ad.narrow(gates, -1, 3 * u, u))
    c_next = gf * c + gi * gc
    h_next = go * ad.tanh(c_next)
    return h_next, c_next


def _lstm_params(bound: dict, prefix: str) -> dict:
    return {"wx": bound[f"{prefix}.wx"], "wh": bound[f"{prefix}.wh"], "b": bound[f"{prefix}.b"]}


def _run_direction(xs, mask, params, units, reverse):
    """Unroll one direction over time with carry-through on padding."""
    batch = xs[0].shape[0]
    h = Tensor(np.zeros((batch, units)))
    c = Tensor(np.zeros((batch, units)))
    outputs = [None] * len(xs)
    steps = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in steps:
        h_new, c_new = lstm_step(xs[t], (h, c), params)
        if mask is not None:
            keep = Tensor(mask[:, t : t + 1])
            drop = Tensor(1.0 - mask[:, t : t + 1])
            h = keep * h_new + drop * h
            c = keep * c_new + drop * c
        else:
            h, c = h_new, c_new
        outputs[t] = h
    return outputs, (h, c)


def _encode(src_ids, src_mask, bound, config, dropout_rng=None):
    """Returns per-position features [B, T, 2U] and the [B, 2U] summary."""
    ids = np.asarray(src_ids, dtype=np.int64)
    t_len = ids.shape[1]
    emb = ad.embedding_lookup(bound["src_embed"], ids)
    if dropout_rng is not None and config.dropout > 0:
        emb = ad.dropout(emb, config.dropout, dropout_rng)
    xs = [ad.reshape(ad.narrow(emb, 1, t, 1), (ids.shape[0], config.embed_dim)) for t in range(t_len)]
    u = config.hidden_units
    fw_final = bw_final = None
    for layer in range(config.layers):
        fw, (fh, _) = _run_direction(xs, src_mask, _lstm_params(bound, f"enc.{layer}.fw"), u, False)
        bw, (bh, _) = _run_direction(xs, src_mask, _lstm_params(bound, f"enc.{layer}.bw"), u, True)
        xs = [ad.concat([fw[t], bw[t]], axis=-1) for t in range(t_len)]
        if dropout_rng is not None and config.dropout > 0 and layer < config.layers - 1:
            xs = [ad.dropout(x, config.dropout, dropout_rng) for x in xs]
        fw_final, bw_final = fh, bh
    enc = ad.stack(xs, axis=1)
    summary = ad.concat([fw_final, bw_final], axis=-1)
    return enc, summary


def _init_decoder_state(summary, bound, config):
    state = []
    for layer in range(config.layers):
        h = ad.tanh(ad.matmul(summary, bound[f"dec.{layer}.init_h.w"]) + bound[f"dec.{layer}.init_h.b"])
        c = ad.tanh(ad.matmul(summary, bound[f"dec.{layer}.init_c.w"]) + bound[f"dec.{layer}.init_c.b"])
        state.append((h, c))
    return state


@dataclass
class AttentionState:
    encoder_outputs: Tensor  # [B, T, 2U]
    weights: Tensor  # [B, T]
    context: Tensor  # [B, 2U]


def attention_context(s_t, enc, w, enc_mask=None) -> AttentionState:
    """Bilinear-scored soft attention over encoder positions.

    Scores are ``s_t^T W h_n``; padded positions get -1e9 before the
    softmax so their weight underflows to zero.
    """
    single = s_t.ndim == 1
    if single:
        s_t = ad.reshape(s_t, (1, s_t.shape[0]))
        enc = ad.reshape(enc, (1,) + enc.shape)
    batch, t_len, _ = enc.shape
    query = ad.matmul(s_t, w)  # [B, 2U]
    scores = ad.reshape(ad.matmul(enc, ad.reshape(query, (batch, query.shape[-1], 1))), (batch, t_len))
    if enc_mask is not None:
        scores = scores + Tensor((1.0 - enc_mask) * -1e9)
    alpha = ad.softmax(scores)
    context = ad.reshape(ad.matmul(ad.reshape(alpha, (batch, 1, t_len)), enc), (batch, enc.shape[-1]))
    if single:
        alpha = ad.reshape(alpha, (t_len,))
        context = ad.reshape(context, (context.shape[-1],))
        enc = ad.reshape(enc, enc.shape[1:])
    return AttentionState(enc, alpha, context)


def _decode_step(prev_ids, state, enc, bound, config, enc_mask=None, dropout_rng=None):
    ids = np.asarray(prev_ids, dtype=np.int64)
    x = ad.embedding_lookup(bound["tgt_embed"], ids)
    if dropout_rng is not None and config.dropout > 0:
        x = ad.dropout(x, config.dropout, dropout_rng)
    new_state = []
    for layer in range(config.layers):
        h, c = lstm_step(x, state[layer], _lstm_params(bound, f"dec.{layer}"))
        new_state.append((h, c))
        x = h
    s_t = x
    if config.attention:
        att = attention_context(s_t, enc, bound["att.w"], enc_mask)
        features = ad.concat([s_t, att.context], axis=-1)
    else:
        features = s_t
    logits = ad.matmul(features, bound["out.w"]) + bound["out.b"]
    return logits, new_state


# ---------------------------------------------------------------------------
# public single-sequence operations


def encode_bilstm(ids, model: RnnModel, tape=None) -> Tensor:
    """Encode one id sequence to per-position features ``[n, 2U]``."""
    arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    enc, _ = _encode(arr, None, model.bind(tape), model.config)
    return ad.reshape(enc, enc.shape[1:])


def decode_step(prev_id: int, dec_state, enc, model: RnnModel, tape=None):
    """One inference step for a single sequence; returns ``[V]`` logits."""
    bound = model.bind(tape)
    enc3 = ad.reshape(enc, (1,) + enc.shape) if enc.ndim == 2 else enc
    logits, state = _decode_step([prev_id], dec_state, enc3, bound, model.config)
    return ad.reshape(logits, (logits.shape[-1],)), state


def forward_teacher_forced(batch: Batch, model: RnnModel, tape=None, dropout_rng=None) -> Tensor:
    """Mean masked cross-entropy over BOS-shifted inputs and EOS targets."""
    bound = model.bind(tape)
    enc, summary = _encode(batch.src, batch.src_mask, bound, model.config, dropout_rng)
    state = _init_decoder_state(summary, bound, model.config)
    steps = []
    for t in range(batch.tgt_in.shape[1]):
        logits, state = _decode_step(
            batch.tgt_in[:, t], state, enc, bound, model.config, batch.src_mask, dropout_rng
        )
        steps.append(logits)
    logits = ad.stack(steps, axis=1)  # [B, Tt, V]
    return ad.cross_entropy(logits, batch.tgt_out, batch.tgt_mask)


class RnnSession:
    """Immutable decode cursor: encoder run once, state advanced per token."""

    def __init__(self, model: RnnModel, src_ids, _carry=None):
        self.model = model
        if _carry is None:
            bound = model.bind(None)
            arr = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
            enc, summary = _encode(arr, None, bound, model.config)
            state = _init_decoder_state(summary, bound, model.config)
            from .codec import BOS_ID

            self._bound, self._enc, self._state, self._prev = bound, enc, state, BOS_ID
        else:
            self._bound, self._enc, self._state, self._prev = _carry
        self._step_out = None

    def _advance_once(self):
        if self._step_out is None:
            logits, state = _decode_step(
                [self._prev], self._state, self._enc, self._bound, self.model.config
            )
            lp = ad.log_softmax_np(logits.data.reshape(-1))
            self._step_out = (lp, state)
        return self._step_out

    def logprobs(self) -> np.ndarray:
        return self._advance_once()[0]

    def advanced(self, token_id: int) -> "RnnSession":
        _, state = self._advance_once()
        return RnnSession(self.model, None, (self._bound, self._enc, state, token_id))
