"""Smoothing transformations, perturbation transforms and perturbation norms.

Every sampler takes an explicit ``numpy.random.Generator``; :func:`rng_for`
derives counter-based (Philox) streams from a master seed so that a chunk of
samples is reproducible independently of which worker draws it.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import PAD_ID, EmbeddingTable, EncodedInstance, SynonymTable


class Mechanism(str, enum.Enum):
    SUBSTITUTION = "substitution"
    REORDER = "reorder"
    INSERTION = "insertion"
    DELETION = "deletion"

    @property
    def tag(self) -> str:
        return self.value[0].upper()


def rng_for(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# Low/Med/High presets.  Reorder stores lambda; the preset is 2*lambda as a fraction of n.
_SUBSTITUTION_S = {"low": 50, "med": 100, "high": 250}
_REORDER_TWO_LAMBDA = {"low": 0.25, "med": 0.5, "high": 1.0}
_SIGMA = {
    "lstm": {"low": 0.1, "med": 0.2, "high": 0.3},
    "bert": {"low": 0.5, "med": 1.0, "high": 1.5},
}
_DELETION_P = {"low": 0.3, "med": 0.5, "high": 0.7}
LEVELS = ("low", "med", "high")


def _level(name: str) -> str:
    key = name.strip().lower()
    key = {"medium": "med", "med.": "med"}.get(key, key)
    if key not in LEVELS:
        raise ValueError(f"unknown noise level {name!r}; use Low/Med/High")
    return key


@dataclass
class SmoothingConfig:
    """Mechanism tag plus the parameters of its noise.

    Only the block belonging to ``mechanism`` is read.  Insertion and
    deletion always fully shuffle positions; their certified reorder radius
    uses ``lam = n / 2`` (a full shuffle is ``2*lambda = n``).
    """

    mechanism: Mechanism
    s: int = 0
    gamma: float = 1.0
    delta_width: float = 1.0
    lam: int = 1
    sigma: float = 0.0
    mean: np.ndarray | None = None
    ogn: bool = False
    p: float = 0.0

    def __post_init__(self):
        self.mechanism = Mechanism(self.mechanism)
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)

    @property
    def epsilon(self) -> float:
        return 5.0 / self.s if self.s > 0 else math.inf

    def validate(self, n: int | None = None) -> "SmoothingConfig":
        m = self.mechanism
        if m is Mechanism.SUBSTITUTION:
            if self.s < 0:
                raise ValueError("s must be >= 0")
            if not 0.0 <= self.gamma <= 1.0:
                raise ValueError("gamma must lie in [0, 1]")
            if self.delta_width <= 0:
                raise ValueError("delta must be positive")
        elif m is Mechanism.REORDER:
            if self.lam < 1 or (n is not None and self.lam > n):
                raise ValueError(f"lambda={self.lam} outside [1, n]")
        elif m is Mechanism.INSERTION:
            if self.sigma < 0:
                raise ValueError("sigma must be >= 0")
        elif m is Mechanism.DELETION:
            if not 0.0 <= self.p <= 1.0:
                raise ValueError("p must lie in [0, 1]")
        return self

    def certified_lambda(self, n: int) -> float:
        if self.mechanism is Mechanism.REORDER:
            return float(self.lam)
        return max(1.0, n / 2.0)

    @classmethod
    def preset(cls, mechanism, level: str, n: int, *, backbone: str = "lstm", mean=None):
        mech = Mechanism(mechanism)
        lv = _level(level)
        if mech is Mechanism.SUBSTITUTION:
            return cls(mech, s=_SUBSTITUTION_S[lv])
        if mech is Mechanism.REORDER:
            lam = max(1, round(_REORDER_TWO_LAMBDA[lv] * n / 2))
            return cls(mech, lam=lam)
        if mech is Mechanism.INSERTION:
            return cls(mech, sigma=_SIGMA[backbone][lv], mean=mean, ogn=mean is not None)
        return cls(mech, p=_DELETION_P[lv])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mechanism"] = self.mechanism.value
        out["mean"] = None if self.mean is None else [float(x) for x in self.mean]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "lambda" in d:
            known["lam"] = d["lambda"]
        if "delta" in d:
            known["delta_width"] = d["delta"]
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "SmoothingConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# staircase law


def staircase_pmf(s: int, epsilon: float, gamma: float = 1.0, delta_width: float = 1.0):
    """Probability of each staircase step 0..s.

    Step ``k`` covers ``|x|`` in ``[k*D, (k+1)*D)`` on both sides of the
    word (step 0 is ``(-D, D)``).  Integrating the staircase density over
    that pair gives mass proportional to
    ``gamma*exp(-k*eps) + (1-gamma)*exp(-(k+1)*eps)``; the width ``D`` only
    scales every step equally.
    """
    if s < 0:
        raise ValueError("s must be >= 0")
    if s == 0:
        return np.ones(1)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if delta_width <= 0:
        raise ValueError("delta must be positive")
    k = np.arange(s + 1, dtype=np.float64)
    mass = 2.0 * delta_width * (gamma * np.exp(-k * epsilon) + (1.0 - gamma) * np.exp(-(k + 1) * epsilon))
    return mass / math.fsum(mass)


class SubstitutionKernel:
    """Per-word candidate tables for vectorised synonym draws.

    ``cands[w, k, :count[w, k]]`` are the word ids a draw of step ``k``
    can produce for word ``w``.  Empty steps borrow the nearest non-empty
    step (ties to the smaller one); words without synonyms map to
    themselves.
    """

    def __init__(self, table: EmbeddingTable, syn: SynonymTable):
        self.table = table
        self.s = syn.s
        V = len(table)
        per_word: list[list[list[int]]] = []
        width = 1
        for wid, word in enumerate(table.words):
            steps: list[list[int]] = [[wid]] + [[] for _ in range(self.s)]
            if wid != PAD_ID:
                for x in syn[word]:
                    if x.word in table.index and 1 <= x.interval <= self.s:
                        steps[x.interval].append(table.index[x.word])
            filled = [k for k in range(1, self.s + 1) if steps[k]]
            if filled:
                for k in range(1, self.s + 1):
                    if not steps[k]:
                        near = min(filled, key=lambda j: (abs(j - k), j))
                        steps[k] = steps[near]
            else:
                for k in range(1, self.s + 1):
                    steps[k] = [wid]
            width = max(width, max(len(c) for c in steps))
            per_word.append(steps)
        self.count = np.zeros((V, self.s + 1), dtype=np.int64)
        self.cands = np.zeros((V, self.s + 1, width), dtype=np.int64)
        for wid, steps in enumerate(per_word):
            for k, c in enumerate(steps):
                self.count[wid, k] = len(c)
                self.cands[wid, k, : len(c)] = c

    def outcome_law(self, word_id: int, pmf: np.ndarray) -> dict[int, float]:
        """Exact distribution of the replacement id for one word."""
        if word_id <= PAD_ID:
            return {word_id: 1.0}
        law: dict[int, float] = {}
        for k, pk in enumerate(pmf):
            c = self.count[word_id, k]
            for j in range(c):
                wid = int(self.cands[word_id, k, j])
                law[wid] = law.get(wid, 0.0) + pk / c
        return law

    def draw(self, token_ids: np.ndarray, pmf: np.ndarray, rng, size: int) -> np.ndarray:
        token_ids = np.asarray(token_ids)
        ids = token_ids if token_ids.ndim == 2 else np.broadcast_to(token_ids, (size, len(token_ids)))
        cdf = np.cumsum(pmf)
        cdf[-1] = 1.0
        steps = np.searchsorted(cdf, rng.random(ids.shape), side="right")
        steps = np.minimum(steps, len(pmf) - 1)
        safe = np.where(ids > 0, ids, 0)
        counts = self.count[safe, steps]
        pick = np.floor(rng.random(ids.shape) * counts).astype(np.int64)
        out = self.cands[safe, steps, pick]
        return np.where(ids > 0, out, ids)


def apply_substitution_noise(inst: EncodedInstance, kernel: SubstitutionKernel, pmf, rng):
    new_ids = kernel.draw(inst.token_ids, np.asarray(pmf), rng, 1)[0]
    changed = new_ids != inst.token_ids
    rows = inst.rows.copy()
    rows[changed] = kernel.table.vectors[new_ids[changed]]
    return inst.replace(token_ids=new_ids, rows=rows)


# ---------------------------------------------------------------------------
# permutations


def _check_lambda(n: int, lam: int):
    if not 1 <= lam <= n:
        raise ValueError(f"lambda={lam} outside [1, {n}]")


def group_permutations(n: int, lam: int, rng, size: int) -> np.ndarray:
    """``size`` draws of the grouped uniform shuffle, shape (size, n).

    Positions are split uniformly at random into groups of ``lam`` (the last
    group takes the remainder) and shuffled within each group.
    """
    _check_lambda(n, lam)
    pi = np.argsort(rng.random((size, n)), axis=1)
    if lam == 1:
        return np.broadcast_to(np.arange(n), (size, n)).copy()
    group = np.arange(n) // lam
    tau = np.argsort(rng.random((size, n)) + group * 2.0, axis=1)
    r = np.empty_like(pi)
    rows = np.arange(size)[:, None]
    r[rows, pi] = pi[rows, tau]
    return r


def uniform_permutations(n: int, rng, size: int) -> np.ndarray:
    return np.argsort(rng.random((size, n)), axis=1)


def sample_group_permutation(n: int, lam: int, rng) -> np.ndarray:
    return group_permutations(n, lam, rng, 1)[0]


def _check_perm(r, n):
    r = np.asarray(r, dtype=np.int64)
    if r.shape != (n,) or not np.array_equal(np.sort(r), np.arange(n)):
        raise ValueError("position map must be a bijection on 0..n-1")
    return r


def apply_permutation(inst: EncodedInstance, r) -> EncodedInstance:
    """Send whatever sits at slot ``j`` to slot ``r[j]``."""
    r = _check_perm(r, inst.n)
    return inst.replace(positions=r[inst.positions])


# ---------------------------------------------------------------------------
# embedding noise


def apply_gaussian_noise(inst: EncodedInstance, sigma: float, mean, rng) -> EncodedInstance:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mean = np.zeros(inst.d) if mean is None else np.asarray(mean, dtype=np.float64)
    rows = inst.rows + mean + sigma * rng.standard_normal(inst.rows.shape)
    return inst.replace(rows=rows)


def apply_bernoulli_deletion(inst: EncodedInstance, p: float, rng) -> EncodedInstance:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    drop = (rng.random(inst.n) < p) & inst.word_mask
    ids = inst.token_ids.copy()
    rows = inst.rows.copy()
    ids[drop] = PAD_ID
    rows[drop] = 0.0
    return inst.replace(token_ids=ids, rows=rows)


# ---------------------------------------------------------------------------
# adversarial transforms


def insertion_transform(inst: EncodedInstance, positions: Sequence[int], vectors, token_ids=None):
    """Insert ``vectors`` so they appear at ``positions`` and truncate to n.

    ``positions`` index the final sequence (0-based, strictly increasing,
    each < n).  The canonical form keeps every surviving original row in
    storage; the rows pushed off the end are overwritten by the inserted
    vectors, and the position map is rearranged to match.
    """
    n = inst.n
    positions = [int(p) for p in positions]
    m = len(positions)
    vectors = np.asarray(vectors, dtype=np.float64).reshape(m, inst.d) if m else np.zeros((0, inst.d))
    if m > n:
        raise ValueError("cannot insert more than n words")
    if m == 0:
        return inst.replace()
    if any(b <= a for a, b in zip(positions, positions[1:])) or positions[0] < 0 or positions[-1] >= n:
        raise ValueError("positions must be strictly increasing within 0..n-1")
    ids_in = [-1] * m if token_ids is None else [int(t) for t in token_ids]

    order = np.argsort(inst.positions)  # storage rows in rendered order
    dropped = order[n - m :]  # last m rendered rows fall off the end
    kept_iter = iter(order[: n - m])
    new_pos = inst.positions.copy()
    ids = inst.token_ids.copy()
    rows = inst.rows.copy()
    ins = iter(range(m))
    pos_set = set(positions)
    for slot in range(n):
        if slot in pos_set:
            k = next(ins)
            row = dropped[k]
            rows[row] = vectors[k]
            ids[row] = ids_in[k]
            new_pos[row] = slot
        else:
            new_pos[next(kept_iter)] = slot
    return inst.replace(token_ids=ids, rows=rows, positions=new_pos)


def deletion_transform(inst: EncodedInstance, positions: Sequence[int]) -> EncodedInstance:
    """Delete the words rendered at ``positions`` (0-based slots).

    Deleted rows become pad rows and move to the tail, so the rendered
    sequence is the text with those words removed, then padding.
    """
    positions = [int(p) for p in positions]
    if len(set(positions)) != len(positions):
        raise ValueError("duplicate deletion positions")
    n = inst.n
    if any(not 0 <= p < n for p in positions):
        raise ValueError("deletion position out of range")
    order = np.argsort(inst.positions)
    gone = set(positions)
    keep = [order[j] for j in range(n) if j not in gone]
    drop = [order[j] for j in range(n) if j in gone]
    new_pos = inst.positions.copy()
    for slot, row in enumerate(keep + drop):
        new_pos[row] = slot
    ids = inst.token_ids.copy()
    rows = inst.rows.copy()
    ids[drop] = PAD_ID
    rows[drop] = 0.0
    return inst.replace(token_ids=ids, rows=rows, positions=new_pos)


def substitution_transform(inst: EncodedInstance, table: EmbeddingTable, replacements: dict[int, str]):
    """Replace rendered slot -> word."""
    ids = inst.token_ids.copy()
    rows = inst.rows.copy()
    order = np.argsort(inst.positions)
    for slot, word in replacements.items():
        row = order[slot]
        ids[row] = table.index[word]
        rows[row] = table.vectors[ids[row]]
    return inst.replace(token_ids=ids, rows=rows)


# ---------------------------------------------------------------------------
# perturbations


@dataclass
class PerturbationSpec:
    """One adversarial edit.

    kind "S": ``intervals`` holds the staircase step of each substitution.
    kind "R": ``target`` is the position map applied to slots.
    kind "I": ``vectors`` inserted at ``positions``; ``replaced`` are the
    rows they overwrite in the canonical form.
    kind "D": ``positions`` deleted.
    """

    kind: str
    intervals: list[int] = field(default_factory=list)
    target: list[int] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)
    vectors: list[list[float]] = field(default_factory=list)
    replaced: list[list[float]] = field(default_factory=list)
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("S", "R", "I", "D"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "R" and self.target:
            _check_perm(self.target, len(self.target))
        if self.kind in ("I", "D"):
            if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
                raise ValueError("positions must be strictly increasing")
        if self.kind == "S" and any(a < 0 for a in self.intervals):
            raise ValueError("interval indices must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def reorder_norm(r) -> int:
    r = np.asarray(r, dtype=np.int64)
    return int(np.abs(r - np.arange(len(r))).sum())


def perturbation_norm(spec: PerturbationSpec) -> float:
    if spec.kind == "S":
        return float(sum(spec.intervals))
    if spec.kind == "R":
        return float(reorder_norm(spec.target)) if spec.target else 0.0
    if spec.kind == "I":
        if not spec.vectors:
            return 0.0
        diff = np.asarray(spec.vectors, dtype=np.float64) - np.asarray(spec.replaced, dtype=np.float64)
        return float(np.linalg.norm(diff.ravel()))
    return float(len(spec.positions))


def insertion_spec(inst: EncodedInstance, positions, vectors, words=()) -> PerturbationSpec:
    m = len(positions)
    order = np.argsort(inst.positions)
    replaced = inst.rows[order[inst.n - m :]] if m else np.zeros((0, inst.d))
    return PerturbationSpec(
        "I",
        positions=[int(p) for p in positions],
        vectors=np.asarray(vectors, dtype=np.float64).reshape(m, inst.d).tolist(),
        replaced=replaced.tolist(),
        words=list(words),
    )


def position_shift_norm(before: EncodedInstance, after: EncodedInstance) -> int:
    """l1 displacement of every storage row between two encodings."""
    return int(np.abs(after.positions - before.positions).sum())


# ---------------------------------------------------------------------------
# batched smoothing noise


class NoiseModel:
    """Draws (theta, phi) noise for a batch of encoded texts.

    Arrays carry a leading batch axis: ``ids`` (B, n), ``rows`` (B, n, d),
    ``positions`` (B, n).  Insertion and deletion shuffle all positions.
    """

    def __init__(self, config: SmoothingConfig, table: EmbeddingTable | None = None,
                 synonyms: SynonymTable | None = None):
        self.config = config.validate()
        self.kernel = None
        self.pmf = None
        if config.mechanism is Mechanism.SUBSTITUTION:
            self.pmf = staircase_pmf(config.s, config.epsilon, config.gamma, config.delta_width)
            if config.s > 0:
                if table is None or synonyms is None:
                    raise ValueError("substitution noise needs an embedding and a synonym table")
                if synonyms.s != config.s:
                    raise ValueError(f"synonym table has s={synonyms.s}, config has s={config.s}")
                self.kernel = SubstitutionKernel(table, synonyms)

    def apply(self, ids, rows, positions, rng):
        cfg = self.config
        B, n = ids.shape
        m = cfg.mechanism
        if m is Mechanism.SUBSTITUTION:
            if self.kernel is None:
                return ids, rows, positions
            new_ids = self.kernel.draw(ids, self.pmf, rng, B)
            changed = new_ids != ids
            rows = np.where(changed[..., None], self.kernel.table.vectors[np.maximum(new_ids, 0)], rows)
            return new_ids, rows, positions
        if m is Mechanism.REORDER:
            r = group_permutations(n, cfg.lam, rng, B)
            return ids, rows, np.take_along_axis(r, positions, axis=1)
        r = uniform_permutations(n, rng, B)
        positions = np.take_along_axis(r, positions, axis=1)
        if m is Mechanism.INSERTION:
            mean = 0.0 if cfg.mean is None else cfg.mean
            return ids, rows + mean + cfg.sigma * rng.standard_normal(rows.shape), positions
        drop = (rng.random(ids.shape) < cfg.p) & (ids != PAD_ID)
        ids = np.where(drop, PAD_ID, ids)
        rows = np.where(drop[..., None], 0.0, rows)
        return ids, rows, positions

    def sample(self, inst: EncodedInstance, rng, size: int):
        ids = np.broadcast_to(inst.token_ids, (size, inst.n))
        rows = np.broadcast_to(inst.rows, (size, inst.n, inst.d))
        pos = np.broadcast_to(inst.positions, (size, inst.n))
        return self.apply(ids, rows, pos, rng)
