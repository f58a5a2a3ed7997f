"""Component-segmented attentional LSTM encoder-decoder.

Layout (``E`` embedding size, ``H`` hidden size, ``h = H/2``)::

    source-embedding  src_embed.weight                 [V_src, E]
    encoder           encoder.l0.{fwd,bwd}.W_x/W_h/bias  LSTM E -> h, one per direction
                      encoder.l1.W_x/W_h/bias            LSTM H -> H
    decoder           decoder.init.{h,c}{0,1}.W/b      (decoder_init="last" only)
                      decoder.l0.W_x/W_feed/W_h/bias   LSTM (E + H input feeding) -> H
                      decoder.l1.W_x/W_h/bias          LSTM H -> H
                      decoder.combine.W/b              tanh([h; context] W + b)
    softmax           softmax.W [H, V_tgt], softmax.b [V_tgt]
    target-embedding  tgt_embed.weight                 [V_tgt, E]

Each LSTM has a single bias per gate.  Per-component sizes are therefore::

    encoder = 2 * (4h(E + h) + 4h) + 4H(2H) + 4H
    decoder = 4H(E + 2H) + 4H + 4H(2H) + 4H + 2H*H + H  [+ 4(H*H + H) with "last" init]

which at E = H = 512 gives 3,674,112 and 6,822,400.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import Component, Parameter, ParameterStore, count_params

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

__all__ = [
    "PAD", "BOS", "EOS", "UNK", "Component", "ModelConfig", "DecoderState",
    "build_model", "count_params", "encode", "attention", "decode_step", "forward_loss",
]


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    embed_dim: int = 32
    hidden_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    dropout_rnn: float = 0.1
    label_smoothing: float = 0.1
    decoder_init: str = "last"
    init_scale: float = 0.1

    def __post_init__(self):
        if self.src_vocab <= len(SPECIALS) or self.tgt_vocab <= len(SPECIALS):
            raise ValueError("vocabularies must hold more than the 4 reserved symbols")
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("embedding and hidden sizes must be positive")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (split across encoder directions)")
        if self.encoder_layers != 2 or self.decoder_layers != 2:
            raise ValueError("the architecture has exactly 2 encoder and 2 decoder layers")
        if not 0.0 <= self.dropout_rnn < 1.0:
            raise ValueError("dropout_rnn must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.decoder_init not in ("last", "zero"):
            raise ValueError("decoder_init must be 'last' or 'zero'")

    @classmethod
    def desk(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        # +-0.1 is too small at 32 dimensions: attention scores stay near zero
        # and the decoder never leaves the unigram plateau.
        kw.setdefault("init_scale", 0.3)
        return cls(src_vocab, tgt_vocab, **kw)

    @classmethod
    def full_scale(cls, src_vocab: int = 30000, tgt_vocab: int = 29500, **kw) -> "ModelConfig":
        return cls(src_vocab, tgt_vocab, embed_dim=512, hidden_dim=512, **kw)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], Component]]:
    E, H, h = cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim // 2
    enc, dec = Component.ENCODER, Component.DECODER
    out = [("src_embed.weight", (cfg.src_vocab, E), Component.SOURCE_EMBEDDING)]
    for direction in ("fwd", "bwd"):
        out += [
            (f"encoder.l0.{direction}.W_x", (E, 4 * h), enc),
            (f"encoder.l0.{direction}.W_h", (h, 4 * h), enc),
            (f"encoder.l0.{direction}.bias", (4 * h,), enc),
        ]
    out += [
        ("encoder.l1.W_x", (H, 4 * H), enc),
        ("encoder.l1.W_h", (H, 4 * H), enc),
        ("encoder.l1.bias", (4 * H,), enc),
    ]
    if cfg.decoder_init == "last":
        for state in ("h0", "c0", "h1", "c1"):
            out += [(f"decoder.init.{state}.W", (H, H), dec), (f"decoder.init.{state}.b", (H,), dec)]
    out += [
        ("decoder.l0.W_x", (E, 4 * H), dec),
        ("decoder.l0.W_feed", (H, 4 * H), dec),
        ("decoder.l0.W_h", (H, 4 * H), dec),
        ("decoder.l0.bias", (4 * H,), dec),
        ("decoder.l1.W_x", (H, 4 * H), dec),
        ("decoder.l1.W_h", (H, 4 * H), dec),
        ("decoder.l1.bias", (4 * H,), dec),
        ("decoder.combine.W", (2 * H, H), dec),
        ("decoder.combine.b", (H,), dec),
        ("softmax.W", (H, cfg.tgt_vocab), Component.SOFTMAX),
        ("softmax.b", (cfg.tgt_vocab,), Component.SOFTMAX),
        ("tgt_embed.weight", (cfg.tgt_vocab, E), Component.TARGET_EMBEDDING),
    ]
    return out


def expected_counts(cfg: ModelConfig) -> dict[Component, int]:
    """Closed-form per-component parameter counts for ``cfg``."""
    counts = dict.fromkeys(Component, 0)
    for _, shape, comp in _shapes(cfg):
        counts[comp] += int(np.prod(shape))
    return counts


def build_model(config: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    """Fresh parameters drawn uniform(-init_scale, init_scale) in layout order."""
    store = ParameterStore()
    s = config.init_scale
    for name, shape, comp in _shapes(config):
        store.add(Parameter(name, rng.uniform(-s, s, size=shape), comp))
    return store


# ---------------------------------------------------------------------------
# batching helpers


def pad_batch(seqs: Sequence[Sequence[int]], prefix: Sequence[int] = (), suffix: Sequence[int] = ()):
    """Right-pad id sequences into an int array plus a 0/1 float mask."""
    rows = [list(prefix) + list(s) + list(suffix) for s in seqs]
    if not rows or any(len(r) == 0 for r in rows):
        raise ValueError("cannot batch empty sequences")
    T = max(len(r) for r in rows)
    ids = np.full((len(rows), T), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), T))
    for k, r in enumerate(rows):
        ids[k, : len(r)] = r
        mask[k, : len(r)] = 1.0
    return ids, mask


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderOutput:
    states: Tensor          # [n, T, H] top-layer outputs, zero at padding
    last: Tensor            # [n, H] top-layer state after each row's final token
    layer0: Tensor          # [n, T, H] concatenated [forward; backward] first-layer outputs
    mask: np.ndarray        # [n, T]


def encode_batch(P: dict, src_ids: np.ndarray, src_mask: np.ndarray, cfg: ModelConfig,
                 rng: np.random.Generator | None = None) -> EncoderOutput:
    p = cfg.dropout_rnn if rng is not None else 0.0
    if np.any(src_mask.sum(axis=1) == 0):
        raise ValueError("empty source sequence")
    emb = ad.embedding(P["src_embed.weight"], src_ids)
    fwd, _, _ = ad.lstm_layer(emb, P["encoder.l0.fwd.W_x"], P["encoder.l0.fwd.W_h"],
                              P["encoder.l0.fwd.bias"], src_mask)
    bwd, _, _ = ad.lstm_layer(emb, P["encoder.l0.bwd.W_x"], P["encoder.l0.bwd.W_h"],
                              P["encoder.l0.bwd.bias"], src_mask, reverse=True)
    layer0 = ad.concat([fwd, bwd], axis=-1)
    x1 = ad.dropout(layer0, p, rng)
    top, last, _ = ad.lstm_layer(x1, P["encoder.l1.W_x"], P["encoder.l1.W_h"],
                                 P["encoder.l1.bias"], src_mask)
    top = ad.dropout(top, p, rng)
    return EncoderOutput(top, last, layer0, src_mask)


def encode(src_ids: Sequence[int], store: ParameterStore, config: ModelConfig) -> np.ndarray:
    """Encoder states ``[len, H]`` for one sentence (no dropout)."""
    if len(src_ids) == 0:
        raise ValueError("empty source sequence")
    _check_ids(src_ids, config.src_vocab, "source")
    ids, mask = pad_batch([src_ids])
    out = encode_batch(_values(store), ids, mask, config)
    return out.states.value[0]


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    h: list[Tensor]     # per-layer hidden [n, H]
    c: list[Tensor]     # per-layer cell [n, H]
    feed: Tensor        # previous attentional vector [n, H]


def initial_state(P: dict, enc: EncoderOutput, cfg: ModelConfig) -> DecoderState:
    n, H = enc.last.shape[0], cfg.hidden_dim
    if cfg.decoder_init == "zero":
        z = Tensor(np.zeros((n, H)))
        return DecoderState([z, z], [z, z], z)
    init = {
        s: ad.tanh(ad.affine(enc.last, P[f"decoder.init.{s}.W"], P[f"decoder.init.{s}.b"]))
        for s in ("h0", "c0", "h1", "c1")
    }
    return DecoderState([init["h0"], init["h1"]], [init["c0"], init["c1"]], Tensor(np.zeros((n, H))))


def attention(dec_hidden, enc_states) -> tuple[np.ndarray, np.ndarray]:
    """Single-query dot-product attention: ``(context [H], weights [len])``."""
    q = np.asarray(dec_hidden, dtype=np.float64)
    K = np.asarray(enc_states, dtype=np.float64)
    ctx, w = ad.attention(q[None, :], K[None, :, :])
    return ctx.value[0], w.value[0]


def step_batch(P: dict, prev_emb: Tensor, state: DecoderState, enc: EncoderOutput, cfg: ModelConfig,
               rng: np.random.Generator | None = None) -> tuple[Tensor, DecoderState]:
    """One decoder step for a batch; returns the attentional vector and new state."""
    p = cfg.dropout_rnn if rng is not None else 0.0
    h0, c0 = ad.lstm_cell([prev_emb, state.feed], state.h[0], state.c[0],
                          [P["decoder.l0.W_x"], P["decoder.l0.W_feed"]],
                          P["decoder.l0.W_h"], P["decoder.l0.bias"])
    x1 = ad.dropout(h0, p, rng)
    h1, c1 = ad.lstm_cell(x1, state.h[1], state.c[1], P["decoder.l1.W_x"],
                          P["decoder.l1.W_h"], P["decoder.l1.bias"])
    top = ad.dropout(h1, p, rng)
    ctx, _ = ad.attention(top, enc.states, enc.mask)
    att = ad.tanh(ad.affine(ad.concat([top, ctx], axis=-1), P["decoder.combine.W"], P["decoder.combine.b"]))
    return att, DecoderState([h0, h1], [c0, c1], att)


def output_logits(P: dict, att: Tensor) -> Tensor:
    return ad.affine(att, P["softmax.W"], P["softmax.b"])


def decode_step(prev_tgt_id: int, dec_state: DecoderState, enc_states, store: ParameterStore,
                config: ModelConfig) -> tuple[np.ndarray, DecoderState]:
    """Logits over the target vocabulary for one sentence and the next state.

    ``dec_state`` holds [1, H] tensors; ``enc_states`` is ``[len, H]``.
    """
    _check_ids([prev_tgt_id], config.tgt_vocab, "target")
    P = _values(store)
    K = np.asarray(enc_states, dtype=np.float64)[None]
    enc = EncoderOutput(Tensor(K), Tensor(K[:, -1]), Tensor(K), np.ones(K.shape[:2]))
    emb = ad.embedding(P["tgt_embed.weight"], np.array([prev_tgt_id]))
    att, new = step_batch(P, emb, dec_state, enc, config)
    return output_logits(P, att).value[0], new


def start_state(src_ids: Sequence[int], store: ParameterStore, config: ModelConfig):
    """Encoder states and the initial decoder state for one sentence."""
    _check_ids(src_ids, config.src_vocab, "source")
    ids, mask = pad_batch([src_ids])
    P = _values(store)
    enc = encode_batch(P, ids, mask, config)
    return enc.states.value[0], initial_state(P, enc, config)


def forward_loss(batch: Sequence[tuple[Sequence[int], Sequence[int]]], store: ParameterStore,
                 config: ModelConfig, rng: np.random.Generator | None = None,
                 smoothing: float | None = None) -> tuple[Tensor, int]:
    """Mean per-token label-smoothed cross-entropy under teacher forcing.

    Builds a graph on the active tape (if any).  Dropout is applied only
    when ``rng`` is given and ``config.dropout_rnn > 0``; ``smoothing``
    overrides ``config.label_smoothing``.
    """
    if not batch:
        raise ValueError("empty batch")
    srcs = [s for s, _ in batch]
    tgts = [t for _, t in batch]
    if any(len(t) == 0 for t in tgts):
        raise ValueError("empty target sentence")
    src_ids, src_mask = pad_batch(srcs)
    dec_in, _ = pad_batch(tgts, prefix=[BOS])
    dec_out, _ = pad_batch(tgts, suffix=[EOS])

    P = store.leaves()
    enc = encode_batch(P, src_ids, src_mask, config, rng)
    state = initial_state(P, enc, config)
    emb = ad.embedding(P["tgt_embed.weight"], dec_in)
    atts = []
    for t in range(dec_in.shape[1]):
        att, state = step_batch(P, ad.take(emb, t, axis=1), state, enc, config, rng)
        atts.append(att)
    logits = output_logits(P, ad.stack(atts, axis=1))
    eps = config.label_smoothing if smoothing is None else smoothing
    loss = ad.label_smoothed_ce(logits, dec_out, eps, ignore_index=PAD)
    return loss, int((dec_out != PAD).sum())


def _values(store: ParameterStore) -> dict[str, Tensor]:
    return {p.name: Tensor(p.value) for p in store}


def _check_ids(ids: Sequence[int], vocab: int, side: str) -> None:
    for i in ids:
        if not 0 <= int(i) < vocab:
            raise ValueError(f"{side} token id {i} outside vocabulary of {vocab}")
