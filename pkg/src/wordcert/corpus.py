"""Synthetic two-class corpus with planted keywords.

Recipe (deterministic in ``seed``):

* Coordinate 0 of every embedding is reserved for the class signal.
  Filler words are ``N(0, scale^2)`` on the other coordinates and 0 on it.
* Every keyword carries one shared "keyword" direction.  Keywords come
  in antonym pairs ``pos_i`` / ``neg_i`` that also share a pair vector and
  differ only in coordinate 0 (``+signal`` vs ``-signal``).  Same-class
  keywords end up the closest neighbours (cosine about 0.8) and the
  antonym a little further out (about 0.45), the way "good" and "bad" are
  neighbours in real embeddings.
* A text of class 1 draws ``k`` ``pos`` keywords, class 0 draws ``k``
  ``neg`` keywords, with ``k`` uniform in ``keywords`` (1..8 by default).
  With probability ``contamination`` a text with ``k >= 2`` also gets
  ``j`` keywords of the other class, ``j`` uniform in ``1..k-1``, so mixed
  texts are decided by a narrow keyword majority.  Texts with few
  keywords are fragile under heavy noise and the rest are not, which is
  what makes noise trade accuracy for radius.
* Filler words complete the text, then the tokens are shuffled.  The
  keyword majority decides the label, so the classes are linearly
  separable along coordinate 0 of the mean embedding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingTable
from .noise import rng_for


@dataclass
class Corpus:
    texts: list[list[str]]
    labels: list[int]

    def __len__(self):
        return len(self.texts)

    def split(self, first: int) -> tuple["Corpus", "Corpus"]:
        return (
            Corpus(self.texts[:first], self.labels[:first]),
            Corpus(self.texts[first:], self.labels[first:]),
        )


def synthetic_embeddings(vocab: int, dim: int = 16, *, seed: int = 0, scale: float = 0.3,
                         signal: float = 0.45, shared: float = 0.6, pair: float = 0.4,
                         keyword_fraction: float = 0.2) -> EmbeddingTable:
    if vocab < 8:
        raise ValueError("vocab must be at least 8")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = rng_for(seed, 0xE3B)
    pairs = max(2, int(vocab * keyword_fraction) // 2)
    fillers = vocab - 2 * pairs

    def direction(norm):
        v = rng.standard_normal(dim - 1)
        return norm * v / np.linalg.norm(v)

    keyword_dir = direction(shared)
    words, rows = [], []
    for i in range(pairs):
        base = np.zeros(dim)
        base[1:] = keyword_dir + direction(pair)
        for sign, name in ((1.0, f"pos{i}"), (-1.0, f"neg{i}")):
            v = base.copy()
            v[0] = sign * signal
            words.append(name)
            rows.append(v)
    for j in range(fillers):
        v = np.zeros(dim)
        v[1:] = scale * rng.standard_normal(dim - 1)
        words.append(f"w{j}")
        rows.append(v)
    return EmbeddingTable(words, np.array(rows))


def keyword_lists(table: EmbeddingTable) -> tuple[list[str], list[str]]:
    neg = [w for w in table.words if w.startswith("neg")]
    pos = [w for w in table.words if w.startswith("pos")]
    return neg, pos


def generate_corpus(table: EmbeddingTable, size: int, length: int = 16, *, seed: int = 0,
                    contamination: float = 0.3, keywords: tuple[int, int] = (1, 8)) -> Corpus:
    lo, hi = keywords
    if size < 1:
        raise ValueError("size must be positive")
    if not 1 <= lo <= hi or 2 * hi - 1 > length:
        raise ValueError(f"keyword range {keywords} does not fit texts of length {length}")
    rng = rng_for(seed, 0xC0D)
    neg, pos = keyword_lists(table)
    fillers = [w for w in table.words[1:] if w.startswith("w")]
    by_class = (neg, pos)
    texts, labels = [], []
    for i in range(size):
        label = i % 2
        own = by_class[label]
        k = int(rng.integers(lo, hi + 1))
        toks = [own[j] for j in rng.integers(0, len(own), size=k)]
        # mixed texts keep a strict majority for their own class
        if k >= 2 and rng.random() < contamination:
            other = by_class[1 - label]
            j = int(rng.integers(1, k))
            toks += [other[i] for i in rng.integers(0, len(other), size=j)]
        toks += [fillers[j] for j in rng.integers(0, len(fillers), size=length - len(toks))]
        rng.shuffle(toks)
        texts.append(toks)
        labels.append(label)
    order = rng.permutation(size)
    return Corpus([texts[i] for i in order], [labels[i] for i in order])


def write_corpus_csv(fh, corpus: Corpus) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("label", "text"))
    for label, toks in zip(corpus.labels, corpus.texts):
        w.writerow((label, " ".join(toks)))


def read_corpus_csv(fh) -> Corpus:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or not {"label", "text"} <= set(reader.fieldnames):
        raise ValueError("dataset needs a header with columns label,text")
    texts, labels = [], []
    for lineno, row in enumerate(reader, start=2):
        try:
            labels.append(int(row["label"]))
        except (TypeError, ValueError):
            raise ValueError(f"line {lineno}: label {row['label']!r} is not an integer") from None
        texts.append(row["text"].split())
    return Corpus(texts, labels)


def corpus_to_csv_text(corpus: Corpus) -> str:
    buf = io.StringIO()
    write_corpus_csv(buf, corpus)
    return buf.getvalue()
