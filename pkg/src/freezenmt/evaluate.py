"""Decoding and corpus metrics.

BLEU here is corpus-level over word tokens (subwords merged back first),
with clipped 1..4-gram precisions, their geometric mean and the usual
brevity penalty.  If the unigram precision is zero the score is 0.  A zero
higher-order precision is replaced by add-one smoothing, ``1 / (total + 1)``,
for that order only.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .model import (BOS, EOS, PAD, DecoderState, EncoderOutput, ModelConfig, encode_batch,
                    forward_loss, initial_state, output_logits, pad_batch, step_batch)
from .params import ParameterStore

MAX_ORDER = 4


# ---------------------------------------------------------------------------
# perplexity


def corpus_cross_entropy(store: ParameterStore, config: ModelConfig,
                         pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                         batch_size: int = 100) -> tuple[float, int]:
    """Total unsmoothed cross-entropy (nats) and target-token count, EOS included."""
    if not pairs:
        raise ValueError("empty corpus")
    order = sorted(range(len(pairs)), key=lambda k: (len(pairs[k][0]), len(pairs[k][1]), k))
    total = 0.0
    tokens = 0
    for start in range(0, len(order), batch_size):
        batch = [pairs[k] for k in order[start : start + batch_size]]
        loss, n = forward_loss(batch, store, config, rng=None, smoothing=0.0)
        total += loss.item() * n
        tokens += n
    return total, tokens


def perplexity(checkpoint: Checkpoint, pairs, batch_size: int = 100) -> float:
    """``exp`` of the mean per-token cross-entropy, without label smoothing."""
    total, tokens = corpus_cross_entropy(checkpoint.store, checkpoint.config, pairs, batch_size)
    return math.exp(total / tokens)


# ---------------------------------------------------------------------------
# decoding


def _values(store: ParameterStore) -> dict[str, Tensor]:
    return {p.name: Tensor(p.value) for p in store}


def _encode(P, config, srcs):
    ids, mask = pad_batch(srcs)
    enc = encode_batch(P, ids, mask, config)
    return enc, initial_state(P, enc, config)


def _step(P, config, enc, state, prev_ids):
    emb = ad.embedding(P["tgt_embed.weight"], np.asarray(prev_ids))
    att, new = step_batch(P, emb, state, enc, config)
    logits = output_logits(P, att).value
    if not np.all(np.isfinite(logits)):
        raise ad.NumericalError("decoder produced non-finite logits")
    return ad._log_softmax(logits), new


def _default_max_len(src: Sequence[int]) -> int:
    return 2 * len(src) + 10


def greedy_decode_batch(store: ParameterStore, config: ModelConfig, srcs: Sequence[Sequence[int]],
                        max_len: int | None = None, batch_size: int = 250) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or the length limit (EOS not returned)."""
    P = _values(store)
    out: list[list[int]] = [[] for _ in srcs]
    order = sorted(range(len(srcs)), key=lambda k: (len(srcs[k]), k))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        chunk = [srcs[k] for k in idx]
        limits = np.array([max_len or _default_max_len(s) for s in chunk])
        enc, state = _encode(P, config, chunk)
        prev = np.full(len(chunk), BOS)
        done = np.zeros(len(chunk), dtype=bool)
        hyps: list[list[int]] = [[] for _ in chunk]
        for t in range(int(limits.max())):
            logp, state = _step(P, config, enc, state, prev)
            logp[:, PAD] = -np.inf
            logp[:, BOS] = -np.inf
            prev = logp.argmax(axis=1)
            for r, tok in enumerate(prev):
                if done[r]:
                    continue
                if tok == EOS or t >= limits[r]:
                    done[r] = True
                else:
                    hyps[r].append(int(tok))
            done |= (t + 1) >= limits
            if done.all():
                break
        for k, h in zip(idx, hyps):
            out[k] = h
    return out


def greedy_decode(checkpoint: Checkpoint, src: Sequence[int], max_len: int | None = None) -> list[int]:
    if max_len is not None and max_len <= 0:
        raise ValueError("max_len must be positive")
    return greedy_decode_batch(checkpoint.store, checkpoint.config, [src], max_len)[0]


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        # length includes the closing EOS when finished
        return self.logprob / (len(self.tokens) + (1 if self.finished else 0))


def sequence_logprob(store: ParameterStore, config: ModelConfig, src: Sequence[int],
                     tokens: Sequence[int], finished: bool = True) -> float:
    """Log-probability of ``tokens`` (plus EOS when ``finished``) given ``src``."""
    P = _values(store)
    enc, state = _encode(P, config, [src])
    total = 0.0
    prev = BOS
    for tok in list(tokens) + ([EOS] if finished else []):
        logp, state = _step(P, config, enc, state, [prev])
        total += float(logp[0, tok])
        prev = tok
    return total


def beam_decode(checkpoint: Checkpoint, src: Sequence[int], beam_size: int = 4,
                max_len: int | None = None) -> Hypothesis:
    """Beam search ranked by length-normalized log-probability.

    Beams are pruned by accumulated log-probability; finished and
    length-capped hypotheses compete on ``logprob / length``.  The greedy
    path is always among the candidates, so a wider beam never returns a
    lower-scoring hypothesis than greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    store, config = checkpoint.store, checkpoint.config
    limit = max_len or _default_max_len(src)
    P = _values(store)
    enc, state = _encode(P, config, [src])
    V = config.tgt_vocab
    beams = [Hypothesis([], 0.0, False)]
    beam_state = state
    finished: list[Hypothesis] = []
    for t in range(limit):
        k = len(beams)
        enc_k = EncoderOutput(Tensor(np.repeat(enc.states.value, k, axis=0)), enc.last, enc.layer0,
                              np.repeat(enc.mask, k, axis=0))
        prev = [h.tokens[-1] if h.tokens else BOS for h in beams]
        logp, new_state = _step(P, config, enc_k, beam_state, prev)
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        totals = np.array([h.logprob for h in beams])[:, None] + logp
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        keep_rows, next_beams = [], []
        for pos in order:
            if len(next_beams) >= beam_size or not np.isfinite(flat[pos]):
                break
            row, tok = divmod(int(pos), V)
            if tok == EOS:
                finished.append(Hypothesis(beams[row].tokens, float(flat[pos]), True))
                continue
            next_beams.append(Hypothesis(beams[row].tokens + [tok], float(flat[pos]), False))
            keep_rows.append(row)
        # hypotheses in the beam can no longer beat finished ones only if the beam is empty
        if not next_beams:
            break
        if t == limit - 1:
            finished.extend(next_beams)
            break
        beams = next_beams
        rows = np.array(keep_rows)
        beam_state = DecoderState([Tensor(h.value[rows]) for h in new_state.h],
                                  [Tensor(c.value[rows]) for c in new_state.c],
                                  Tensor(new_state.feed.value[rows]))
    greedy_tokens = greedy_decode_batch(store, config, [src], limit)[0]
    greedy_finished = len(greedy_tokens) < limit
    greedy = Hypothesis(greedy_tokens, sequence_logprob(store, config, src, greedy_tokens, greedy_finished),
                        greedy_finished)
    candidates = finished + [greedy]
    return max(candidates, key=lambda h: (h.score, -len(h.tokens)))


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        if self.hyp_len > self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.hyp_len)

    @property
    def score(self) -> float:
        if self.hyp_len == 0 or self.matches[0] == 0:
            return 0.0
        logs = []
        for n, (m, t) in enumerate(zip(self.matches, self.totals)):
            if m == 0:
                logs.append(math.log(1.0 / (t + 1)))
            else:
                logs.append(math.log(m / t))
        return 100.0 * self.brevity_penalty * math.exp(sum(logs) / MAX_ORDER)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuStats:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStats(matches, totals, hyp_len, ref_len)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU in [0, 100] over tokenized word sequences."""
    return bleu_stats(hypotheses, references).score


def translate_corpus(checkpoint: Checkpoint, codec, src_sentences: Sequence[Sequence[str]],
                     max_len: int | None = None) -> list[list[str]]:
    srcs = [codec.encode_src(s) for s in src_sentences]
    outs = greedy_decode_batch(checkpoint.store, checkpoint.config, srcs, max_len)
    return [codec.decode_tgt(o) for o in outs]


def corpus_bleu(checkpoint: Checkpoint, codec, corpus) -> float:
    """Greedy-decode ``corpus.src`` and score against ``corpus.tgt``."""
    return bleu(translate_corpus(checkpoint, codec, corpus.src), corpus.tgt)
