"""Synthetic two-domain parallel corpora and plain-text corpus I/O.

Sentences come from a small phrase grammar over word classes::

    S  -> NP VERB NP PP*        NP -> DET ADJ* NOUN        PP -> PREP NP

The template set fixes how many adjectives and prepositional phrases are
likely.  Target sentences are a word-by-word lexicon mapping of the source
after one local reordering rule: a noun moves in front of the adjectives
preceding it, by at most ``reorder_window`` positions.  Nouns carry one of
two genders and an adjective agreeing with a gender-1 noun takes a suffixed
target form.

A domain differs from its partner through its template set, its exclusive
vocabulary (nouns and adjectives that never occur in the other domain),
``shifted_senses`` (pairs of core words whose translations are swapped
inside that domain only) and ``regendered_nouns`` (core nouns whose gender
flips inside that domain).  Core vocabulary is shared by both domains.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SRC_CONSONANTS = "bdgklmnprstvz"
TGT_CONSONANTS = "cfhjqwxyrs"
VOWELS = "aeiou"

CLASSES = ("DET", "ADJ", "NOUN", "VERB", "PREP")
CORE_SHARE = {"DET": 0.06, "ADJ": 0.24, "NOUN": 0.38, "VERB": 0.22, "PREP": 0.10}
EXCLUSIVE_SHARE = {"ADJ": 0.4, "NOUN": 0.6}

# template set -> (mean adjectives per NP, P(another PP), weight of exclusive words)
TEMPLATE_SETS = {
    "ood": dict(adj_rate=0.45, pp_prob=0.35, exclusive_rate=0.20),
    "ind": dict(adj_rate=0.90, pp_prob=0.55, exclusive_rate=0.35),
    "flat": dict(adj_rate=0.0, pp_prob=0.0, exclusive_rate=0.20),
}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    core_vocab: int = 120
    exclusive_vocab: int = 30
    length_range: tuple[int, int] = (4, 14)
    templates: str = "ood"
    remap_seed: int = 0
    reorder_window: int = 2
    shifted_senses: int = 0
    regendered_nouns: int = 0

    def __post_init__(self):
        if self.core_vocab < 20:
            raise ValueError("core_vocab must be at least 20")
        if min(self.exclusive_vocab, self.shifted_senses, self.reorder_window, self.regendered_nouns) < 0:
            raise ValueError("vocabulary sizes and window must be non-negative")
        lo, hi = self.length_range
        if not 3 <= lo <= hi:
            raise ValueError(f"bad length range {self.length_range}")
        if self.templates not in TEMPLATE_SETS:
            raise ValueError(f"unknown template set {self.templates!r}")


@dataclass
class ParallelCorpus:
    src: list[list[str]]
    tgt: list[list[str]]
    split: str = "train"

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise CorpusError(f"{len(self.src)} source vs {len(self.tgt)} target sentences")
        for k, (s, t) in enumerate(zip(self.src, self.tgt)):
            if not s or not t:
                raise CorpusError(f"empty sentence at line {k + 1}")

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self) -> list[tuple[list[str], list[str]]]:
        return list(zip(self.src, self.tgt))

    def digest(self) -> str:
        h = hashlib.sha256()
        for s, t in zip(self.src, self.tgt):
            h.update((" ".join(s) + "\t" + " ".join(t) + "\n").encode("utf-8"))
        return h.hexdigest()

    def save(self, prefix) -> None:
        write_parallel_corpus(self, prefix)


DEFAULT_SIZES = {
    "ood.train": 8000, "ood.dev": 500, "ood.test": 500,
    "ind.train": 2000, "ind.dev": 500, "ind.test": 500,
}

PRESETS = {
    "desk": (
        DomainSpec(core_vocab=120, exclusive_vocab=30, templates="ood", remap_seed=11),
        DomainSpec(core_vocab=120, exclusive_vocab=15, templates="ind", remap_seed=23, shifted_senses=8,
                   regendered_nouns=10),
        DEFAULT_SIZES,
    ),
    "tiny": (
        DomainSpec(core_vocab=40, exclusive_vocab=8, length_range=(4, 9), templates="ood", remap_seed=11),
        DomainSpec(core_vocab=40, exclusive_vocab=8, length_range=(4, 9), templates="ind", remap_seed=23,
                   shifted_senses=6, regendered_nouns=6),
        {"ood.train": 600, "ood.dev": 60, "ood.test": 60, "ind.train": 200, "ind.dev": 60, "ind.test": 60},
    ),
    "identical": (
        DomainSpec(core_vocab=120, exclusive_vocab=0, templates="ood", remap_seed=11),
        DomainSpec(core_vocab=120, exclusive_vocab=0, templates="ood", remap_seed=11),
        DEFAULT_SIZES,
    ),
}


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``."""
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    for k in keys:
        words.extend(hashlib.sha256(str(k).encode()).digest()[:4])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def _make_words(rng: np.random.Generator, consonants: str, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(consonants[rng.integers(len(consonants))] + VOWELS[rng.integers(len(VOWELS))]
                    for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _split_classes(n: int, shares: dict[str, float]) -> dict[str, int]:
    counts = {c: max(1, int(round(n * s))) for c, s in shares.items()}
    largest = max(counts, key=counts.get)
    counts[largest] += n - sum(counts.values())
    return counts


@dataclass
class Lexicon:
    """Source words by class, and the source -> target map for one domain."""

    by_class: dict[str, list[str]]
    exclusive: dict[str, list[str]]
    translate: dict[str, str] = field(repr=False)
    word_class: dict[str, str] = field(repr=False)
    gender: dict[str, int] = field(repr=False)        # nouns -> 0 or 1
    feminine: dict[str, str] = field(repr=False)      # adjectives -> agreeing form


def build_lexicons(seed: int, ood: DomainSpec, ind: DomainSpec) -> tuple[Lexicon, Lexicon]:
    if ood.core_vocab != ind.core_vocab:
        raise ValueError("both domains must share the same core vocabulary size")
    rng = derive_rng(seed, "lexicon")
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()
    core: dict[str, list[str]] = {}
    word_class: dict[str, str] = {}
    base: dict[str, str] = {}
    for cls, n in _split_classes(ood.core_vocab, CORE_SHARE).items():
        srcs = _make_words(rng, SRC_CONSONANTS, n, src_taken)
        tgts = _make_words(rng, TGT_CONSONANTS, n, tgt_taken)
        core[cls] = srcs
        for s, t in zip(srcs, tgts):
            base[s] = t
            word_class[s] = cls
    genders = {w: int(rng.integers(2)) for w in core["NOUN"]}

    lexicons = []
    for tag, spec in (("ood", ood), ("ind", ind)):
        excl: dict[str, list[str]] = {}
        translate = dict(base)
        wc = dict(word_class)
        if spec.exclusive_vocab:
            for cls, n in _split_classes(spec.exclusive_vocab, EXCLUSIVE_SHARE).items():
                srcs = _make_words(rng, SRC_CONSONANTS, n, src_taken)
                tgts = _make_words(rng, TGT_CONSONANTS, n, tgt_taken)
                excl[cls] = srcs
                for s, t in zip(srcs, tgts):
                    translate[s] = t
                    wc[s] = cls
        gender = dict(genders)
        gender.update((w, int(rng.integers(2))) for w in excl.get("NOUN", []))
        if spec.shifted_senses:
            _shift_senses(translate, core, spec, derive_rng(spec.remap_seed, "senses", tag))
        if spec.regendered_nouns:
            nouns = core["NOUN"]
            pick = derive_rng(spec.remap_seed, "genders", tag).permutation(len(nouns))
            for k in pick[: spec.regendered_nouns]:
                gender[nouns[k]] = 1 - gender[nouns[k]]
        feminine = {w: _feminine(translate[w]) for w in wc if wc[w] == "ADJ"}
        lexicons.append(Lexicon(core, excl, translate, wc, gender, feminine))
    return lexicons[0], lexicons[1]


def _feminine(word: str) -> str:
    # target stems always end in a vowel, so suffixed forms never collide with them
    return word + "n"


def _shift_senses(translate: dict[str, str], core: dict[str, list[str]], spec: DomainSpec,
                  rng: np.random.Generator) -> None:
    # swap translations pairwise among same-class content words
    pool = [(cls, w) for cls in ("NOUN", "ADJ", "VERB") for w in core[cls]]
    order = rng.permutation(len(pool))
    n = min(spec.shifted_senses, len(pool)) // 2 * 2
    picked = [pool[k] for k in order]
    swaps = 0
    used: set[str] = set()
    for k, (cls, w) in enumerate(picked):
        if swaps * 2 >= n or w in used:
            continue
        partner = next((w2 for c2, w2 in picked[k + 1 :] if c2 == cls and w2 not in used and w2 != w), None)
        if partner is None:
            continue
        translate[w], translate[partner] = translate[partner], translate[w]
        used.update((w, partner))
        swaps += 1


def _pick(rng: np.random.Generator, lex: Lexicon, cls: str, rate: float) -> str:
    excl = lex.exclusive.get(cls)
    if excl and rng.random() < rate:
        return excl[rng.integers(len(excl))]
    words = lex.by_class[cls]
    return words[rng.integers(len(words))]


def _sentence(rng: np.random.Generator, lex: Lexicon, spec: DomainSpec) -> list[str]:
    params = TEMPLATE_SETS[spec.templates]
    lo, hi = spec.length_range
    rate = params["exclusive_rate"]
    for _ in range(1000):
        def np_phrase():
            n_adj = int(rng.poisson(params["adj_rate"]))
            return (["DET"] if rng.random() < 0.7 else []) + ["ADJ"] * min(n_adj, 3) + ["NOUN"]

        classes = np_phrase() + ["VERB"] + np_phrase()
        while rng.random() < params["pp_prob"] and len(classes) < hi:
            classes += ["PREP"] + np_phrase()
        if lo <= len(classes) <= hi:
            return [_pick(rng, lex, c, rate) for c in classes]
    raise RuntimeError("template set cannot produce sentences in the requested length range")


def reorder(src: Sequence[str], word_class: dict[str, str], window: int) -> list[str]:
    """Move each noun left over at most ``window`` directly preceding adjectives."""
    out = list(src)
    k = 0
    while k < len(out):
        if word_class.get(out[k]) == "NOUN":
            j = k
            while j > 0 and k - j < window and word_class.get(out[j - 1]) == "ADJ":
                j -= 1
            if j < k:
                out.insert(j, out.pop(k))
        k += 1
    return out


def _head_genders(src: Sequence[str], lex: Lexicon) -> dict[int, int]:
    # each adjective agrees with the next noun, the head of its phrase
    out = {}
    pending = []
    for k, w in enumerate(src):
        cls = lex.word_class[w]
        if cls == "ADJ":
            pending.append(k)
        elif cls == "NOUN":
            out.update((j, lex.gender[w]) for j in pending)
            pending = []
    return out


def translate(src: Sequence[str], lex: Lexicon, spec: DomainSpec) -> list[str]:
    agree = _head_genders(src, lex)
    marked = [(w, agree.get(k, 0)) for k, w in enumerate(src)]
    classes = {m: lex.word_class[m[0]] for m in marked}
    out = []
    for w, g in reorder(marked, classes, spec.reorder_window):
        out.append(lex.feminine[w] if g and w in lex.feminine else lex.translate[w])
    return out


def generate_domain(seed: int, lex: Lexicon, spec: DomainSpec, n: int, split: str) -> ParallelCorpus:
    if n <= 0:
        raise ValueError("corpus size must be positive")
    rng = derive_rng(seed, "sentences", split)
    src = [_sentence(rng, lex, spec) for _ in range(n)]
    return ParallelCorpus(src, [translate(s, lex, spec) for s in src], split)


def generate_domain_pair(seed: int, ood_spec: DomainSpec, ind_spec: DomainSpec,
                         sizes: dict[str, int] | None = None) -> dict[str, ParallelCorpus]:
    """All corpora of one experiment, keyed ``ood.train``, ``ind.test`` etc."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for key, n in sizes.items():
        if n <= 0:
            raise ValueError(f"size of {key} must be positive")
    ood_lex, ind_lex = build_lexicons(seed, ood_spec, ind_spec)
    out = {}
    for key in sorted(sizes):
        domain, split = key.split(".")
        lex, spec = (ood_lex, ood_spec) if domain == "ood" else (ind_lex, ind_spec)
        out[key] = generate_domain(seed, lex, spec, sizes[key], key)
    return out


def expected_overlap(ood_spec: DomainSpec, ind_spec: DomainSpec) -> float:
    """Share of in-domain source word types that also occur out of domain."""
    return ood_spec.core_vocab / (ind_spec.core_vocab + ind_spec.exclusive_vocab)


def observed_overlap(ood: ParallelCorpus, ind: ParallelCorpus) -> float:
    v_ood = {w for s in ood.src for w in s}
    v_ind = {w for s in ind.src for w in s}
    return len(v_ood & v_ind) / len(v_ind)


# ---------------------------------------------------------------------------
# files


def _read_lines(path) -> list[str]:
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 ({exc.reason} at byte {exc.start})") from exc
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def read_parallel_corpus(src_path, tgt_path, split: str = "train") -> ParallelCorpus:
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"line-count mismatch: {src_path} has {len(src_lines)}, "
                          f"{tgt_path} has {len(tgt_lines)}")
    src = [line.split() for line in src_lines]
    tgt = [line.split() for line in tgt_lines]
    return ParallelCorpus(src, tgt, split)


def read_corpus_prefix(prefix, split: str | None = None) -> ParallelCorpus:
    prefix = str(prefix)
    return read_parallel_corpus(prefix + ".src", prefix + ".tgt", split or Path(prefix).name)


def write_parallel_corpus(corpus: ParallelCorpus, prefix) -> None:
    prefix = str(prefix)
    for side, sents in (("src", corpus.src), ("tgt", corpus.tgt)):
        with open(f"{prefix}.{side}", "w", encoding="utf-8", newline="\n") as fh:
            for s in sents:
                fh.write(" ".join(s) + "\n")
