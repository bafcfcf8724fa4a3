"""Vocabulary, synthetic tasks, TSV corpora and token-budget batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .rng import DATA, SHUFFLE, make_rng

logger = logging.getLogger(__name__)

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
TASKS = ("copy", "reverse", "sort")


class DataError(ValueError):
    """Malformed or unusable corpus input."""


class Vocabulary:
    """Token/id bijection with fixed reserved ids pad=0, bos=1, eos=2, unk=3."""

    pad, bos, eos, unk = PAD_ID, BOS_ID, EOS_ID, UNK_ID

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        if len(tokens) < 5:
            raise DataError("vocabulary needs at least one non-reserved token")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD_ID, BOS_ID):
                continue
            if strip and i == EOS_ID:
                break
            out.append(self.tokens[i])
        return out

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """Numeric tokens ``"4" .. str(size-1)`` so ids equal their spelling."""
        return cls(list(RESERVED) + [str(i) for i in range(4, size)])


def build_vocab(corpus: Iterable[Iterable[str]], max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` counts the four reserved entries.
    """
    counts: Counter[str] = Counter()
    for stream in corpus:
        counts.update(stream)
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(max_size - len(RESERVED), 1)]
    return Vocabulary(list(RESERVED) + ranked)


@dataclass
class SentencePair:
    src: list[int]  # ends with eos
    tgt: list[int]  # bos ... eos

    def __post_init__(self):
        if len(self.src) < 1 or len(self.tgt) < 2:
            raise DataError("sentence pairs must be non-empty")


def make_pair(src_tokens: Sequence[int], tgt_tokens: Sequence[int]) -> SentencePair:
    return SentencePair(list(src_tokens) + [EOS_ID], [BOS_ID] + list(tgt_tokens) + [EOS_ID])


def gen_synthetic(task: str, vocab_size: int, min_len: int, max_len: int, n: int,
                  seed: int) -> list[SentencePair]:
    """Random sequences over the non-reserved ids with a deterministic target rule."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    if vocab_size < 5:
        raise DataError("vocab_size must be >= 5")
    if not 1 <= min_len <= max_len:
        raise DataError("need 1 <= min_len <= max_len")
    rng = make_rng(seed, DATA)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    pairs = []
    for length in lengths:
        src = rng.integers(len(RESERVED), vocab_size, size=int(length)).tolist()
        if task == "copy":
            tgt = src
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = sorted(src)
        pairs.append(make_pair(src, tgt))
    return pairs


def read_tsv(path: str | Path) -> list[tuple[list[str], list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            rows.append((fields[0].split(), fields[1].split()))
    if not rows:
        raise DataError(f"{path}: empty corpus")
    return rows


def load_tsv(path: str | Path, max_len: int = 128, vocab: Vocabulary | None = None,
             max_vocab: int | None = None) -> tuple[list[SentencePair], Vocabulary]:
    """Read a source<TAB>target corpus, build a joint vocabulary, encode pairs.

    Pairs whose encoded length (with bos/eos) exceeds ``max_len`` are skipped
    and counted in the log.
    """
    rows = read_tsv(path)
    if vocab is None:
        vocab = build_vocab((tok for pair in rows for tok in (pair[0], pair[1])), max_vocab)
    pairs, skipped = [], 0
    for src, tgt in rows:
        if not src or not tgt:
            skipped += 1
            continue
        if len(src) + 1 > max_len or len(tgt) + 2 > max_len:
            skipped += 1
            continue
        pairs.append(make_pair(vocab.encode(src), vocab.encode(tgt)))
    if skipped:
        logger.info("skipped %d of %d pairs from %s (empty or longer than %d)",
                    skipped, len(rows), path, max_len)
    if not pairs:
        raise DataError(f"{path}: no usable sentence pairs")
    return pairs, vocab


def write_tsv(pairs: Sequence[SentencePair], vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(" ".join(vocab.decode(p.src)) + "\t" + " ".join(vocab.decode(p.tgt)) + "\n")


@dataclass
class Batch:
    src: np.ndarray  # (B, S)
    tgt_in: np.ndarray  # (B, T) bos-shifted
    tgt_out: np.ndarray  # (B, T)

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD_ID

    @property
    def tgt_pad(self) -> np.ndarray:
        return self.tgt_out == PAD_ID

    @property
    def num_tokens(self) -> int:
        return int((~self.tgt_pad).sum())

    def __len__(self) -> int:
        return len(self.src)


def pad_matrix(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(pairs: Sequence[SentencePair]) -> Batch:
    return Batch(
        pad_matrix([p.src for p in pairs]),
        pad_matrix([p.tgt[:-1] for p in pairs]),
        pad_matrix([p.tgt[1:] for p in pairs]),
    )


def make_batches(pairs: Sequence[SentencePair], batch_tokens: int, seed: int = 0,
                 shuffle: bool = True) -> list[Batch]:
    """Length-bucketed batches whose padded target size stays within ``batch_tokens``.

    Pairs are sorted by (target, source) length so padding within a batch is
    minimal; batch order is then shuffled with the seed.
    """
    if not pairs:
        return []
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i].tgt), len(pairs[i].src), i))
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        t = len(pairs[i].tgt) - 1
        if t > batch_tokens:
            raise DataError(f"pair {i} has {t} target tokens, above the batch budget {batch_tokens}")
        new_width = max(width, t)
        if current and new_width * (len(current) + 1) > batch_tokens:
            batches.append(current)
            current, new_width = [], t
        current.append(i)
        width = new_width
    if current:
        batches.append(current)
    if shuffle:
        perm = make_rng(seed, SHUFFLE).permutation(len(batches))
        batches = [batches[j] for j in perm]
    return [collate([pairs[i] for i in b]) for b in batches]
