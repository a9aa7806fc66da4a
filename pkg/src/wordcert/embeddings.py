"""Embedding tables, staircase synonym tables and fixed-length encoding."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = "<pad>"
PAD_ID = 0


class EmbeddingParseError(ValueError):
    pass


class EmbeddingTable:
    """Frozen word -> vector lookup.

    Row 0 is always the pad word (all zeros); parsed words follow in file
    order, which is also the tie-breaking order for neighbour searches.
    """

    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(words):
            raise ValueError("vectors must be (len(words), d)")
        if len(words) == 0:
            raise ValueError("vocabulary is empty")
        if PAD in words:
            raise ValueError(f"{PAD!r} is reserved")
        self.dim = vectors.shape[1]
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        self.words = [PAD, *words]
        self.index = {}
        for i, w in enumerate(self.words):
            if w in self.index:
                raise ValueError(f"duplicate word {w!r}")
            self.index[w] = i
        mat = np.zeros((len(self.words), self.dim))
        mat[1:] = vectors
        mat.setflags(write=False)
        self.vectors = mat

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def __getitem__(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word]]

    @property
    def pad_vector(self) -> np.ndarray:
        return self.vectors[PAD_ID]

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, PAD_ID) for t in tokens]

    def dump(self, fh) -> None:
        for w, v in zip(self.words[1:], self.vectors[1:]):
            fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def load_embedding_table(source, expected_dim: int) -> EmbeddingTable:
    """Parse a GloVe-style text file (``word v1 ... vd`` per line).

    ``source`` may be a path, a text stream or a byte stream.
    """
    if isinstance(source, (str, bytes)) and not hasattr(source, "read"):
        with open(source, "rb") as fh:
            return load_embedding_table(fh, expected_dim)
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    words: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(io.StringIO(data), start=1):
        parts = line.split()
        if not parts:
            continue
        word, vals = parts[0], parts[1:]
        if len(vals) != expected_dim:
            raise EmbeddingParseError(
                f"line {lineno}: expected {expected_dim} values, got {len(vals)}"
            )
        if word in seen or word == PAD:
            raise EmbeddingParseError(f"line {lineno}: duplicate word {word!r}")
        try:
            rows.append([float(v) for v in vals])
        except ValueError as exc:
            raise EmbeddingParseError(f"line {lineno}: {exc}") from None
        seen.add(word)
        words.append(word)
    if not words:
        raise EmbeddingParseError("no embedding records found")
    return EmbeddingTable(words, np.array(rows))


def cosine_similarity(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    c = float(np.dot(v1, v2) / (n1 * n2))
    return min(1.0, max(-1.0, c))


def similarity_to_interval(sim: float, s: int) -> int:
    """Staircase step for a synonym: closer words sit on lower steps."""
    k = math.floor((1.0 - sim) * s + 0.5)
    return min(max(k, 1), s)


@dataclass(frozen=True)
class Synonym:
    word: str
    sim: float
    interval: int


@dataclass
class SynonymTable:
    s: int
    entries: dict[str, list[Synonym]]
    skipped: list[str] = field(default_factory=list)

    @property
    def epsilon(self) -> float:
        return 5.0 / self.s

    def __getitem__(self, word: str) -> list[Synonym]:
        return self.entries.get(word, [])

    def __len__(self):
        return len(self.entries)

    def at_interval(self, word: str, k: int) -> list[Synonym]:
        return [syn for syn in self.entries.get(word, []) if syn.interval == k]

    def to_json(self) -> str:
        payload = {
            w: [{"syn": x.word, "sim": x.sim, "interval": x.interval} for x in syns]
            for w, syns in self.entries.items()
        }
        return json.dumps({"s": self.s, "table": payload}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SynonymTable":
        raw = json.loads(text)
        entries = {
            w: [Synonym(d["syn"], float(d["sim"]), int(d["interval"])) for d in syns]
            for w, syns in raw["table"].items()
        }
        return cls(int(raw["s"]), entries)


def build_synonym_table(table: EmbeddingTable, s: int) -> SynonymTable:
    """Exact top-``s`` cosine neighbours of every word, with staircase steps."""
    if s < 1:
        raise ValueError("s must be >= 1")
    vecs = table.vectors[1:]
    words = table.words[1:]
    if len(words) <= s:
        raise ValueError(f"vocabulary of {len(words)} words cannot supply {s} synonyms")
    norms = np.linalg.norm(vecs, axis=1)
    valid = norms > 0
    unit = np.zeros_like(vecs)
    unit[valid] = vecs[valid] / norms[valid, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)

    entries: dict[str, list[Synonym]] = {}
    skipped = []
    for i, w in enumerate(words):
        if not valid[i]:
            log.warning("skipping %r: zero embedding", w)
            skipped.append(w)
            continue
        row = sims[i].copy()
        row[i] = -np.inf
        row[~valid] = -np.inf
        # stable sort keeps file order among equal similarities
        order = np.argsort(-row, kind="stable")[:s]
        entries[w] = [
            Synonym(words[j], float(row[j]), similarity_to_interval(float(row[j]), s))
            for j in order
            if np.isfinite(row[j])
        ]
    return SynonymTable(s, entries, skipped)


@dataclass
class EncodedInstance:
    """A text as (position map, embedding rows).

    ``positions[i]`` is the slot at which row ``i`` is presented to the
    model.  Positions and labels are 0-based.
    """

    token_ids: np.ndarray
    positions: np.ndarray
    rows: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.rows = np.asarray(self.rows, dtype=np.float64)
        n = len(self.token_ids)
        if self.positions.shape != (n,) or self.rows.shape[0] != n:
            raise ValueError("token_ids, positions and rows disagree on n")
        if not np.array_equal(np.sort(self.positions), np.arange(n)):
            raise ValueError("positions must be a permutation of 0..n-1")

    @property
    def n(self) -> int:
        return len(self.token_ids)

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def word_mask(self) -> np.ndarray:
        return self.token_ids != PAD_ID

    @property
    def num_words(self) -> int:
        return int(self.word_mask.sum())

    def render(self) -> np.ndarray:
        out = np.empty_like(self.rows)
        out[self.positions] = self.rows
        return out

    def rendered_ids(self) -> np.ndarray:
        out = np.empty_like(self.token_ids)
        out[self.positions] = self.token_ids
        return out

    def replace(self, **changes) -> "EncodedInstance":
        fields = dict(
            token_ids=self.token_ids.copy(),
            positions=self.positions.copy(),
            rows=self.rows.copy(),
            label=self.label,
        )
        fields.update(changes)
        return EncodedInstance(**fields)


def encode_instance(tokens: Sequence[str], n: int, table: EmbeddingTable, label: int = 0):
    """Pad or truncate ``tokens`` to ``n`` and look up their embeddings.

    Unknown tokens become pad rows.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = list(tokens)[:n]
    ids = []
    for t in tokens:
        if t not in table.index:
            log.warning("unknown token %r mapped to pad", t)
        ids.append(table.index.get(t, PAD_ID))
    ids += [PAD_ID] * (n - len(ids))
    ids = np.array(ids, dtype=np.int64)
    return EncodedInstance(ids, np.arange(n), table.vectors[ids].copy(), int(label))


def decode_instance(inst: EncodedInstance, table: EmbeddingTable) -> list[str]:
    return [table.words[i] if i > 0 else "<ins>" for i in inst.rendered_ids() if i != PAD_ID]


def compute_ogn_mean(table: EmbeddingTable) -> np.ndarray:
    """Per-dimension mean of the vocabulary, pad excluded."""
    return table.vectors[1:].mean(axis=0)
