"""Byte-pair-encoding subword segmentation.

Words are split into characters and the end-of-word marker ``</w>`` is glued
onto the final character (``low`` -> ``l o w</w>``).  Training repeatedly
merges the most frequent adjacent symbol pair; ties go to the
lexicographically smallest ``(left, right)`` pair.  Characters outside the
training alphabet become ``<unk>`` (``<unk></w>`` at word end).

Model file::

    bpe-v1 <n_merges>
    <left> <right>          (n_merges lines, in merge order)
    #alphabet <sym> ...     (base symbols seen in training)
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

END = "</w>"
UNK_CHAR = "<unk>"
HEADER = "bpe-v1"


class BpeFormatError(ValueError):
    pass


def _initial(word: str) -> tuple[str, ...]:
    chars = list(word)
    chars[-1] = chars[-1] + END
    return tuple(chars)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    alphabet: frozenset[str]
    _ranks: dict = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._ranks = {pair: k for k, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab(self) -> list[str]:
        """Base symbols plus merged symbols, sorted."""
        return sorted(self.alphabet | {a + b for a, b in self.merges})

    def segment(self, word: str) -> list[str]:
        return apply_bpe(word, self)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        lines = [f"{HEADER} {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("#alphabet " + " ".join(sorted(self.alphabet)))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.splitlines()
        if not lines:
            raise BpeFormatError("empty BPE model file")
        head = lines[0].split()
        if len(head) != 2 or head[0] != HEADER or not head[1].isdigit():
            raise BpeFormatError(f"bad BPE header {lines[0]!r}")
        n = int(head[1])
        if len(lines) < n + 1:
            raise BpeFormatError(f"BPE model truncated: expected {n} merges")
        merges = []
        for line in lines[1 : n + 1]:
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise BpeFormatError(f"bad merge line {line!r}")
            merges.append((parts[0], parts[1]))
        alphabet: set[str] = set()
        for line in lines[n + 1 :]:
            if line.startswith("#alphabet"):
                alphabet.update(line.split()[1:])
        if not alphabet:
            # no alphabet block: recover what the merges imply
            merged = {a + b for a, b in merges}
            alphabet = {s for pair in merges for s in pair if s not in merged}
        return cls(merges, frozenset(alphabet))

    @classmethod
    def load(cls, path) -> "BpeModel":
        try:
            return cls.loads(Path(path).read_text(encoding="utf-8"))
        except UnicodeDecodeError as exc:
            raise BpeFormatError(f"{path}: not UTF-8") from exc


def train_bpe(corpus: Iterable[str], target_vocab: int | None = None,
              num_merges: int | None = None) -> BpeModel:
    """Learn merges from a stream of words (or whitespace-separated lines).

    Stops when the vocabulary reaches ``target_vocab`` symbols, after
    ``num_merges`` merges, or when no pair is left, whichever comes first.
    """
    freqs: Counter[str] = Counter()
    for item in corpus:
        freqs.update(item.split())
    if not freqs:
        raise ValueError("cannot train BPE on an empty corpus")
    words = {_initial(w): n for w, n in freqs.items()}
    alphabet = frozenset(s for w in words for s in w)
    vocab = set(alphabet)
    if target_vocab is not None and len(vocab) > target_vocab:
        raise ValueError(f"base alphabet has {len(vocab)} symbols, above the target {target_vocab}")

    merges: list[tuple[str, str]] = []
    while True:
        if num_merges is not None and len(merges) >= num_merges:
            break
        if target_vocab is not None and len(vocab) >= target_vocab:
            break
        pairs: Counter[tuple[str, str]] = Counter()
        for w, n in words.items():
            for pair in zip(w, w[1:]):
                pairs[pair] += n
        if not pairs:
            break
        best_count = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        vocab.add(best[0] + best[1])
        merged: dict[tuple[str, ...], int] = {}
        for w, n in words.items():
            nw = _merge_word(w, best) if best[0] in w else w
            merged[nw] = merged.get(nw, 0) + n
        words = merged
    return BpeModel(merges, alphabet)


def apply_bpe(word: str, model: BpeModel) -> list[str]:
    """Segment one word by replaying merges in rank order."""
    if word == "":
        return []
    cached = model._cache.get(word)
    if cached is not None:
        return list(cached)
    symbols = tuple(
        s if s in model.alphabet else (UNK_CHAR + END if s.endswith(END) else UNK_CHAR)
        for s in _initial(word)
    )
    ranks = model._ranks
    while len(symbols) > 1:
        best = min(zip(symbols, symbols[1:]), key=lambda p: ranks.get(p, len(ranks)))
        if best not in ranks:
            break
        symbols = _merge_word(symbols, best)
    model._cache[word] = symbols
    return list(symbols)


def segment_sentence(tokens: Sequence[str], model: BpeModel) -> list[str]:
    out: list[str] = []
    for tok in tokens:
        out.extend(apply_bpe(tok, model))
    return out


def detokenize(subwords: Sequence[str]) -> list[str]:
    """Glue subwords back into words; an unterminated tail still forms a word."""
    words: list[str] = []
    buf: list[str] = []
    for piece in subwords:
        if piece.endswith(END):
            buf.append(piece[: -len(END)])
            words.append("".join(buf))
            buf = []
        else:
            buf.append(piece)
    if buf:
        words.append("".join(buf))
    return words
