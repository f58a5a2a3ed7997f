"""Token-id vocabularies over BPE symbols."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .bpe import BpeModel, detokenize, segment_sentence
from .data import ParallelCorpus
from .model import EOS, PAD, SPECIALS, UNK


class Vocab:
    """Ids 0..3 are PAD/BOS/EOS/UNK; BPE symbols follow in sorted order."""

    def __init__(self, symbols: Sequence[str]):
        self.itos = list(SPECIALS) + [s for s in symbols if s not in SPECIALS]
        self.stoi = {s: k for k, s in enumerate(self.itos)}

    @classmethod
    def from_bpe(cls, model: BpeModel) -> "Vocab":
        return cls(model.vocab)

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, symbols: Sequence[str]) -> list[int]:
        return [self.stoi.get(s, UNK) for s in symbols]

    def symbols(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i != PAD:
                out.append(self.itos[i])
        return out


@dataclass
class Codec:
    """Word sentences <-> id sequences for one language pair."""

    src_bpe: BpeModel
    tgt_bpe: BpeModel

    def __post_init__(self):
        self.src_vocab = Vocab.from_bpe(self.src_bpe)
        self.tgt_vocab = Vocab.from_bpe(self.tgt_bpe)

    def encode_src(self, words: Sequence[str]) -> list[int]:
        return self.src_vocab.ids(segment_sentence(words, self.src_bpe))

    def encode_tgt(self, words: Sequence[str]) -> list[int]:
        return self.tgt_vocab.ids(segment_sentence(words, self.tgt_bpe))

    def decode_tgt(self, ids: Sequence[int]) -> list[str]:
        return detokenize(self.tgt_vocab.symbols(ids))

    def encode_corpus(self, corpus: ParallelCorpus) -> list[tuple[list[int], list[int]]]:
        return [(self.encode_src(s), self.encode_tgt(t)) for s, t in zip(corpus.src, corpus.tgt)]

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256((self.src_bpe.digest() + self.tgt_bpe.digest()).encode()).hexdigest()[:16]
