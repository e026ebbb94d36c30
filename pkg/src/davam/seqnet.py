"""Embeddings, LSTM cells, the encoder, additive attention and the decoder step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from davam import autodiff as ad
from davam.autodiff import Tensor
from davam.errors import ContractError


def uniform_param(rng, shape, scale=0.1, dtype=np.float32) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class Linear:
    """y = x @ W + b with W stored (in, out)."""

    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, n_in, n_out, dtype=np.float32, scale=0.1):
        return cls(uniform_param(rng, (n_in, n_out), scale, dtype), zeros_param((n_out,), dtype))

    def __call__(self, x):
        return x @ self.W + self.b

    def params(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


# -- LSTM -----------------------------------------------------------------------

@dataclass
class LstmParams:
    """One LSTM layer. W is (input + hidden, 4 * hidden), gates ordered i, f, o, g."""

    W: Tensor
    b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[1] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[0] - self.hidden_dim

    @classmethod
    def init(cls, rng, input_dim, hidden_dim, dtype=np.float32, scale=0.1):
        W = uniform_param(rng, (input_dim + hidden_dim, 4 * hidden_dim), scale, dtype)
        b = np.zeros(4 * hidden_dim, dtype=dtype)
        b[hidden_dim:2 * hidden_dim] = 1.0
        return cls(W, Tensor(b, requires_grad=True))

    def params(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def lstm_step(x, state, params: LstmParams):
    """One LSTM update. ``x`` is (..., input_dim); ``state`` is (h, c)."""
    h, c = state
    H = params.hidden_dim
    if x.shape[-1] != params.input_dim or h.shape[-1] != H or c.shape[-1] != H:
        raise ContractError(
            f"lstm_step dims: x {x.shape}, h {h.shape}, c {c.shape}; "
            f"expected input {params.input_dim}, hidden {H}"
        )
    z = ad.concat([x, h], axis=-1) @ params.W + params.b
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H:2 * H])
    o = ad.sigmoid(z[..., 2 * H:3 * H])
    g = ad.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def zero_state(layers, batch, dtype):
    return [
        (Tensor(np.zeros((batch, p.hidden_dim), dtype=dtype)),
         Tensor(np.zeros((batch, p.hidden_dim), dtype=dtype)))
        for p in layers
    ]


def stacked_step(x, states, layers):
    """Run one step through a stack of LSTM layers; returns (top h, new states)."""
    new_states = []
    inp = x
    for p, st in zip(layers, states):
        h, c = lstm_step(inp, st, p)
        new_states.append((h, c))
        inp = h
    return inp, new_states


# -- encoder ----------------------------------------------------------------------

@dataclass
class EncoderStates:
    h: Tensor  # (B, T, hidden) top-layer states, one per input position
    final_cell: Tensor  # (B, hidden) top-layer cell after the last position


def encode(tokens, embed: Tensor, layers) -> EncoderStates:
    """Left-to-right pass over framed token ids, shape (T,) or (B, T).

    Padded positions are processed like any other token; callers mask them.
    Row t depends on tokens 1..t only.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ContractError("cannot encode an empty sequence")
    B, T = ids.shape
    emb = ad.embedding(embed, ids)
    states = zero_state(layers, B, embed.dtype)
    hs = []
    for t in range(T):
        h, states = stacked_step(emb[:, t], states, layers)
        hs.append(h)
    return EncoderStates(ad.stack(hs, axis=1), states[-1][1])


# -- attention ----------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Additive attention score  v^T tanh(W_e value + W_d h_prev + b)."""

    W_e: Tensor  # (attn, latent)
    W_d: Tensor  # (attn, hidden)
    b: Tensor  # (attn,)
    v: Tensor  # (attn,)

    @classmethod
    def init(cls, rng, latent_dim, hidden_dim, attn_dim, dtype=np.float32, scale=0.1):
        return cls(
            uniform_param(rng, (attn_dim, latent_dim), scale, dtype),
            uniform_param(rng, (attn_dim, hidden_dim), scale, dtype),
            zeros_param((attn_dim,), dtype),
            uniform_param(rng, (attn_dim,), scale, dtype),
        )

    def params(self, prefix):
        return {f"{prefix}.W_e": self.W_e, f"{prefix}.W_d": self.W_d,
                f"{prefix}.b": self.b, f"{prefix}.v": self.v}


@dataclass
class AttentionOutput:
    context: Tensor  # (B, latent)
    weights: Tensor  # (B, T)
    scores: Tensor  # (B, T), before masking


def project_values(values, params: AttentionParams):
    """W_e applied to every value; independent of the decoder step, so computed once."""
    return values @ params.W_e.T


def attention(values, prev_dec_state, mask, params: AttentionParams, projected=None) -> AttentionOutput:
    """Context vector for one decoder step.

    values: (B, T, latent) or (T, latent); prev_dec_state: (B, hidden) or
    (hidden,); mask: same leading shape as values, True on valid positions.
    """
    single = values.ndim == 2
    if single:
        values = ad.reshape(values, (1,) + values.shape)
        prev_dec_state = ad.reshape(prev_dec_state, (1,) + prev_dec_state.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        if projected is not None:
            projected = ad.reshape(projected, (1,) + projected.shape)
    B, T, L = values.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, T):
        raise ContractError(f"mask shape {mask.shape} != {(B, T)}")
    if not mask.any(axis=1).all():
        raise ContractError("attention over a row with every position masked")
    if projected is None:
        projected = project_values(values, params)
    query = prev_dec_state @ params.W_d.T + params.b
    act = ad.tanh(projected + ad.expand(query, axis=1, n=T))
    scores = act @ params.v
    weights = ad.softmax(scores, axis=-1, mask=mask)
    context = ad.reshape(ad.matmul(ad.reshape(weights, (B, 1, T)), values), (B, L))
    if single:
        return AttentionOutput(context[0], weights[0], scores[0])
    return AttentionOutput(context, weights, scores)


# -- decoder --------------------------------------------------------------------------

@dataclass
class DecoderParams:
    """Token embedding, LSTM stack and output projection over [h; context]."""

    embed: Tensor  # (V, E)
    layers: list
    out: Linear  # (hidden + context_dim) -> V

    @property
    def context_dim(self) -> int:
        return self.out.W.shape[0] - self.layers[-1].hidden_dim

    @classmethod
    def init(cls, rng, vocab_size, embed_dim, hidden_dim, context_dim, num_layers=1,
             dtype=np.float32, scale=0.1):
        layers = [
            LstmParams.init(rng, (embed_dim + context_dim) if i == 0 else hidden_dim,
                            hidden_dim, dtype, scale)
            for i in range(num_layers)
        ]
        return cls(
            uniform_param(rng, (vocab_size, embed_dim), scale, dtype),
            layers,
            Linear.init(rng, hidden_dim + context_dim, vocab_size, dtype, scale),
        )

    def params(self, prefix):
        out = {f"{prefix}.embed": self.embed}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.lstm{i}"))
        out.update(self.out.params(f"{prefix}.out"))
        return out


def _with_context(x, context):
    if context is None or context.shape[-1] == 0:
        return x
    return ad.concat([x, context], axis=-1)


def decoder_lstm_step(prev_ids, context, states, params: DecoderParams):
    emb = ad.embedding(params.embed, prev_ids)
    return stacked_step(_with_context(emb, context), states, params.layers)


def output_logits(h, context, params: DecoderParams):
    return params.out(_with_context(h, context))


def decode_step(prev_token_id, context, state, params: DecoderParams):
    """Feed [embed(prev); context] through the LSTM; logits from [h; context]."""
    h, new_state = decoder_lstm_step(prev_token_id, context, state, params)
    return output_logits(h, context, params), new_state


def token_nll(logits, targets, mask):
    """Per-sentence summed cross-entropy.

    logits: (B, T, V); targets, mask: (B, T). Masked positions contribute
    exactly zero. Returns a (B,) tensor.
    """
    targets = np.asarray(targets, dtype=np.int64)
    B, T = targets.shape
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
    m = np.asarray(mask, dtype=logits.dtype)
    return -ad.tsum(picked * m, axis=1)
