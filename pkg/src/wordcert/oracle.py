"""Exact ground truth at tiny scale.

Everything here enumerates: smoothed class probabilities, every
perturbation inside a radius, the Neyman-Pearson deletion radius and
the staircase likelihood-ratio claims.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from .bounds import normal_cdf
from .embeddings import PAD_ID, EmbeddingTable, EncodedInstance, SynonymTable
from .noise import (
    Mechanism,
    PerturbationSpec,
    SmoothingConfig,
    SubstitutionKernel,
    apply_permutation,
    deletion_transform,
    reorder_norm,
    staircase_pmf,
    substitution_transform,
)

ENUMERATION_LIMIT = 10**6
_BATCH = 1 << 15


class NotEnumerable(ValueError):
    pass


def _refuse_if_large(count: int, what: str, limit: int):
    if count > limit:
        raise NotEnumerable(f"{what}: {count} outcomes exceed the enumeration limit {limit}")


def _tally(model, rows: np.ndarray, pos: np.ndarray, weights: np.ndarray) -> np.ndarray:
    probs = np.zeros(model.C)
    for start in range(0, len(weights), _BATCH):
        sl = slice(start, start + _BATCH)
        labels = model.predict_batch(rows[sl], pos[sl])
        probs += np.bincount(labels, weights=weights[sl], minlength=model.C)
    # renormalise away the rounding of long weighted sums
    return probs / math.fsum(probs)


# ---------------------------------------------------------------------------
# exact permutation laws


def _block_partitions(items: tuple[int, ...], lam: int) -> Iterator[list[tuple[int, ...]]]:
    """Every split of ``items`` into blocks of ``lam``, each produced once."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for comp in itertools.combinations(rest, lam - 1):
        left = tuple(x for x in rest if x not in comp)
        for tail in _block_partitions(left, lam):
            yield [(first, *comp), *tail]


def group_partitions(n: int, lam: int) -> list[list[tuple[int, ...]]]:
    """Partitions the grouped shuffle picks from, all equally likely."""
    rem = n % lam
    out = []
    rem_choices = itertools.combinations(range(n), rem) if rem else [()]
    for rem_block in rem_choices:
        left = tuple(i for i in range(n) if i not in rem_block)
        for parts in _block_partitions(left, lam):
            out.append(parts + ([rem_block] if rem else []))
    return out


def group_permutation_law(n: int, lam: int, limit: int = ENUMERATION_LIMIT) -> dict[tuple[int, ...], float]:
    """Exact law of the grouped shuffle as {position map: probability}."""
    if not 1 <= lam <= n:
        raise ValueError(f"lambda={lam} outside [1, {n}]")
    parts = group_partitions(n, lam)
    per = math.factorial(lam) ** (n // lam) * math.factorial(n % lam)
    _refuse_if_large(len(parts) * per, "group permutations", limit)
    law: dict[tuple[int, ...], float] = {}
    w = 1.0 / (len(parts) * per)
    for blocks in parts:
        for choice in itertools.product(*(itertools.permutations(b) for b in blocks)):
            r = [0] * n
            for b, c in zip(blocks, choice):
                for src, dst in zip(b, c):
                    r[src] = dst
            key = tuple(r)
            law[key] = law.get(key, 0.0) + w
    return law


def uniform_permutation_law(n: int, limit: int = ENUMERATION_LIMIT) -> dict[tuple[int, ...], float]:
    _refuse_if_large(math.factorial(n), "permutations", limit)
    w = 1.0 / math.factorial(n)
    return {p: w for p in itertools.permutations(range(n))}


# ---------------------------------------------------------------------------
# exact smoothed distribution


@dataclass
class ExactContext:
    """Tables a substitution oracle needs; built once per vocabulary."""

    table: EmbeddingTable
    synonyms: SynonymTable
    kernel: SubstitutionKernel

    @classmethod
    def build(cls, table, synonyms):
        return cls(table, synonyms, SubstitutionKernel(table, synonyms))


def shifted_outcome_law(kernel: SubstitutionKernel, word_id: int, pmf, shift: int) -> dict[int, float]:
    """Word law when the staircase centre sits ``shift`` steps out on the word's index line.

    The noise index is two-sided (step k >= 1 splits its mass between +k
    and -k); indices past ``s`` land on the outermost step.  ``shift=0``
    is exactly the sampler's law.
    """
    if shift == 0 or word_id <= PAD_ID:
        return kernel.outcome_law(word_id, pmf)
    s = len(pmf) - 1
    law: dict[int, float] = {}
    for z in range(-s, s + 1):
        pz = pmf[0] if z == 0 else pmf[abs(z)] / 2.0
        k = min(abs(shift + z), s)
        c = kernel.count[word_id, k]
        for j in range(c):
            wid = int(kernel.cands[word_id, k, j])
            law[wid] = law.get(wid, 0.0) + pz / c
    return law


def exact_smoothed_distribution(
    model,
    inst: EncodedInstance,
    config: SmoothingConfig,
    *,
    context: ExactContext | None = None,
    shifts=None,
    limit: int = ENUMERATION_LIMIT,
) -> np.ndarray:
    """Class probabilities of the smoothed classifier, summed over every outcome.

    For substitution, ``shifts`` (one per non-pad row) moves each word's
    staircase centre along its own synonym index line, which is the
    perturbed input the staircase certificate speaks about.
    """
    config.validate(inst.n)
    m = config.mechanism
    n = inst.n
    if m is Mechanism.SUBSTITUTION:
        if config.s == 0:
            return _tally(model, inst.rows[None], inst.positions[None], np.ones(1))
        if context is None:
            raise ValueError("substitution needs an ExactContext")
        pmf = staircase_pmf(config.s, config.epsilon, config.gamma, config.delta_width)
        words = np.flatnonzero(inst.token_ids > PAD_ID)
        _refuse_if_large((config.s + 1) ** len(words), "substitution outcomes", limit)
        if shifts is None:
            shifts = [0] * len(words)
        if len(shifts) != len(words):
            raise ValueError(f"{len(shifts)} shifts for {len(words)} words")
        laws = [
            list(shifted_outcome_law(context.kernel, int(inst.token_ids[i]), pmf, int(a)).items())
            for i, a in zip(words, shifts)
        ]
        combos = list(itertools.product(*laws))
        K = len(combos)
        rows = np.broadcast_to(inst.rows, (K, n, inst.d)).copy()
        weights = np.ones(K)
        for k, combo in enumerate(combos):
            for slot, (wid, p) in zip(words, combo):
                rows[k, slot] = context.table.vectors[wid]
                weights[k] *= p
        pos = np.broadcast_to(inst.positions, (K, n))
        return _tally(model, rows, pos, weights)

    if m is Mechanism.REORDER:
        law = group_permutation_law(n, config.lam, limit)
        perms = np.array(list(law.keys()), dtype=np.int64)
        weights = np.array(list(law.values()))
        pos = perms[:, inst.positions]
        rows = np.broadcast_to(inst.rows, (len(perms), n, inst.d))
        return _tally(model, rows, pos, weights)

    perms = np.array(list(uniform_permutation_law(n, limit)), dtype=np.int64)
    pw = 1.0 / len(perms)
    pos_all = perms[:, inst.positions]
    if m is Mechanism.INSERTION:
        if config.sigma != 0.0:
            raise NotEnumerable("Gaussian noise has no finite enumeration; use gaussian_linear_pA")
        rows = inst.rows + (0.0 if config.mean is None else config.mean)
        return _tally(model, np.broadcast_to(rows, (len(perms), n, inst.d)), pos_all, np.full(len(perms), pw))

    words = np.flatnonzero(inst.word_mask)
    _refuse_if_large(2 ** len(words) * len(perms), "deletion outcomes", limit)
    probs = np.zeros(model.C)
    for mask in itertools.product((False, True), repeat=len(words)):
        dropped = int(sum(mask))
        w = config.p**dropped * (1.0 - config.p) ** (len(words) - dropped)
        if w == 0.0:
            continue
        rows = inst.rows.copy()
        rows[words[list(mask)]] = 0.0
        probs += w * _tally(model, np.broadcast_to(rows, (len(perms), n, inst.d)), pos_all, np.full(len(perms), pw))
    return probs / math.fsum(probs)


def top_two(probs: np.ndarray) -> tuple[int, float, float]:
    """(argmax with lowest-id ties, pA, runner-up probability)."""
    top = int(np.argmax(probs))
    rest = np.delete(probs, top)
    return top, float(probs[top]), float(rest.max()) if rest.size else 0.0


# ---------------------------------------------------------------------------
# exhaustive certificate verification


@dataclass
class Verdict:
    sound: bool
    checked: int
    label: int
    counterexample: PerturbationSpec | None = None
    counter_label: int | None = None
    counter_probs: list[float] | None = None


def _index_perturbations(inst, s: int, radius):
    """Shift vectors with entries in 0..s and 0 < l1 <= radius."""
    # shifts are listed per storage row, matching exact_smoothed_distribution
    rows = np.flatnonzero(inst.token_ids > PAD_ID)
    top = s if radius >= s else int(math.floor(radius))
    for a in itertools.product(range(top + 1), repeat=len(rows)):
        if 0 < sum(a) <= radius:
            spec = PerturbationSpec("S", intervals=list(a), positions=sorted(int(inst.positions[r]) for r in rows))
            yield spec, a


def _substitution_perturbations(inst, context: ExactContext, radius) -> Iterator[tuple[PerturbationSpec, EncodedInstance]]:
    order = np.argsort(inst.positions)
    slots = [j for j in range(inst.n) if inst.token_ids[order[j]] > PAD_ID]
    options = []
    for j in slots:
        word = context.table.words[inst.token_ids[order[j]]]
        opts = [(None, 0)] + [(x.word, x.interval) for x in context.synonyms[word] if x.interval <= radius]
        options.append(opts)
    for choice in itertools.product(*options):
        norm = sum(k for _, k in choice)
        if norm > radius or norm == 0:
            continue
        repl = {j: w for j, (w, _) in zip(slots, choice) if w is not None}
        spec = PerturbationSpec("S", intervals=[k for _, k in choice if k], words=list(repl.values()),
                                positions=sorted(repl))
        yield spec, substitution_transform(inst, context.table, repl)


def _reorder_perturbations(inst, radius) -> Iterator[tuple[PerturbationSpec, EncodedInstance]]:
    for t in itertools.permutations(range(inst.n)):
        norm = reorder_norm(t)
        if 0 < norm <= radius:
            yield PerturbationSpec("R", target=list(t)), apply_permutation(inst, t)


def _deletion_perturbations(inst, radius) -> Iterator[tuple[PerturbationSpec, EncodedInstance]]:
    order = np.argsort(inst.positions)
    slots = [j for j in range(inst.n) if inst.token_ids[order[j]] > PAD_ID]
    top = len(slots) if radius >= len(slots) else int(math.floor(radius))
    for k in range(1, top + 1):
        for gone in itertools.combinations(slots, k):
            yield PerturbationSpec("D", positions=list(gone)), deletion_transform(inst, gone)


def perturbations_within(inst, config: SmoothingConfig, radius: float, context: ExactContext | None = None):
    m = config.mechanism
    if m is Mechanism.SUBSTITUTION:
        if context is None:
            raise ValueError("substitution needs an ExactContext")
        return _substitution_perturbations(inst, context, radius)
    if m is Mechanism.REORDER:
        return _reorder_perturbations(inst, radius)
    if m is Mechanism.DELETION:
        return _deletion_perturbations(inst, radius)
    raise NotEnumerable("insertion perturbations are continuous")


def verify_certificate_exhaustive(
    model,
    inst: EncodedInstance,
    config: SmoothingConfig,
    radius: float,
    *,
    context: ExactContext | None = None,
    substitution: str = "index",
    limit: int = ENUMERATION_LIMIT,
) -> Verdict:
    """Check that no perturbation of norm <= radius moves the exact smoothed argmax.

    Substitution perturbations are interval-index shifts by default
    (``substitution="index"``); ``"word"`` instead swaps in actual synonyms
    and smooths around each new word with that word's own synonym list.
    """
    label, _, _ = top_two(exact_smoothed_distribution(model, inst, config, context=context, limit=limit))
    checked = 0
    if radius <= 0:
        return Verdict(True, 0, label)
    if config.mechanism is Mechanism.SUBSTITUTION and substitution == "index":
        for spec, shifts in _index_perturbations(inst, config.s, radius):
            probs = exact_smoothed_distribution(model, inst, config, context=context, shifts=shifts, limit=limit)
            checked += 1
            new = int(np.argmax(probs))
            if new != label:
                return Verdict(False, checked, label, spec, new, probs.tolist())
        return Verdict(True, checked, label)
    if substitution not in ("index", "word"):
        raise ValueError(f"unknown substitution semantics {substitution!r}")
    for spec, moved in perturbations_within(inst, config, radius, context):
        probs = exact_smoothed_distribution(model, moved, config, context=context, limit=limit)
        checked += 1
        new = int(np.argmax(probs))
        if new != label:
            return Verdict(False, checked, label, spec, new, probs.tolist())
    return Verdict(True, checked, label)


def verify_combined_exhaustive(
    model,
    inst: EncodedInstance,
    config: SmoothingConfig,
    rad_reorder: float,
    rad_deletion: float,
    *,
    limit: int = ENUMERATION_LIMIT,
) -> Verdict:
    """Every (reorder, deletion) pair strictly inside the box keeps the argmax.

    Needs a fully shuffled mechanism (deletion here).
    """
    if config.mechanism is not Mechanism.DELETION:
        raise ValueError("the joint check enumerates deletion smoothing")
    label, _, _ = top_two(exact_smoothed_distribution(model, inst, config, limit=limit))
    order_slots = [t for t in itertools.permutations(range(inst.n)) if reorder_norm(t) < rad_reorder]
    word_slots = [j for j in range(inst.n) if inst.rendered_ids()[j] > PAD_ID]
    checked = 0
    for t in order_slots:
        moved = apply_permutation(inst, t)
        slots_after = [int(t[j]) for j in word_slots]
        for k in range(0, len(slots_after) + 1):
            if not k < rad_deletion:
                break
            for gone in itertools.combinations(sorted(slots_after), k):
                if not gone and reorder_norm(t) == 0:
                    continue
                final = deletion_transform(moved, gone)
                probs = exact_smoothed_distribution(model, final, config, limit=limit)
                checked += 1
                if int(np.argmax(probs)) != label:
                    spec = PerturbationSpec("D", target=list(t), positions=list(gone))
                    return Verdict(False, checked, label, spec, int(np.argmax(probs)), probs.tolist())
    return Verdict(True, checked, label)


# ---------------------------------------------------------------------------
# deletion Neyman-Pearson radius


def _np_mass(weights, other, target: Fraction, ascending: bool) -> Fraction:
    """Fill ``target`` mass of ``weights`` in likelihood-ratio order, return ``other`` mass.

    Groups are visited by increasing (``ascending``) or decreasing count;
    the boundary group is split fractionally.
    """
    order = range(len(weights)) if ascending else range(len(weights) - 1, -1, -1)
    left = target
    got = Fraction(0)
    for z in order:
        if left <= 0:
            break
        w = weights[z]
        if w == 0:
            continue
        take = min(Fraction(1), left / w)
        got += take * other[z]
        left -= take * w
    return got


def _deletion_certified(n: int, p: Fraction, pA: Fraction, pB: Fraction, delta: int) -> bool:
    q = 1 - p
    W = [math.comb(n, z) * p**z * q ** (n - z) for z in range(n + 1)]
    V = [
        math.comb(n - delta, z - delta) * p ** (z - delta) * q ** (n - z) if z >= delta else Fraction(0)
        for z in range(n + 1)
    ]
    # V/W grows with z, so A takes low counts and B high counts
    return _np_mass(W, V, pA, ascending=True) > _np_mass(W, V, pB, ascending=False)


def exact_deletion_radius(n: int, p: float, pA: float, pB: float) -> int:
    """Largest delta with every 1..delta deletions certified by the count-grouped NP test."""
    if not 1 <= n <= 20:
        raise ValueError("n must lie in 1..20")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if pA < pB:
        raise ValueError("need pA >= pB")
    pf, af, bf = Fraction(p), Fraction(pA), Fraction(pB)
    delta = 0
    while delta < n and _deletion_certified(n, pf, af, bf, delta + 1):
        delta += 1
    return delta


# ---------------------------------------------------------------------------
# Gaussian linear threshold


def gaussian_linear_pA(weight, bias: float, x, sigma: float) -> float:
    """P[a.(x + e) + b >= 0] for e ~ N(0, sigma^2 I), i.e. the top class when the margin is >= 0."""
    a = np.asarray(weight, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        raise ValueError("weight vector is zero")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    margin = abs(float(a @ x) + bias) / norm
    return normal_cdf(margin / sigma)


def linear_margin(weight, bias: float, x) -> float:
    a = np.asarray(weight, dtype=np.float64).ravel()
    return abs(float(a @ np.asarray(x, dtype=np.float64).ravel()) + bias) / float(np.linalg.norm(a))


# ---------------------------------------------------------------------------
# staircase likelihood-ratio claims


def lattice_pmf(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Two-sided staircase law on Z^k: p(z) proportional to exp(-epsilon * |z|_1)."""
    q = math.exp(-epsilon)
    norm1 = np.abs(points).sum(axis=1)
    k = points.shape[1]
    return ((1.0 - q) / (1.0 + q)) ** k * q**norm1


@dataclass
class ClaimReport:
    trials: int
    violations: int
    worst_slack: float
    examples: list[dict]


def np_claim_checks(epsilon: float, s: int, trials: int, *, dims: int = 2, seed: int = 0,
                    rng=None, tol: float = 1e-12) -> ClaimReport:
    """Check the three staircase bounds on random finite sets and integer shifts.

    W is the two-sided lattice staircase law, V the same law shifted by
    ``delta`` with ``|delta|_1 <= s``.  For each trial a random set A (and
    B) inside the box [-R, R]^dims is drawn and
    P(V in A) >= e^{-|d|eps} P(W in A),
    P(V in A) >= 1 - e^{|d|eps} (1 - P(W in A)),
    P(V in B) <= e^{|d|eps} P(W in B)
    are evaluated exactly; complements are handled through the total mass 1.
    """
    from .noise import rng_for

    rng = rng_for(seed, 0xC1A1) if rng is None else rng
    R = s + 3
    axis = np.arange(-R, R + 1)
    grid = np.array(list(itertools.product(axis, repeat=dims)))
    pw = lattice_pmf(grid, epsilon)
    violations = 0
    worst = math.inf
    examples = []
    for t in range(trials):
        norm = int(rng.integers(0, s + 1))
        cuts = np.sort(rng.integers(0, norm + 1, size=dims - 1))
        mags = np.diff(np.concatenate(([0], cuts, [norm])))
        delta = mags * rng.choice((-1, 1), size=dims)
        pv = lattice_pmf(grid - delta, epsilon)
        density = rng.random()
        A = rng.random(len(grid)) < density
        B = rng.random(len(grid)) < rng.random()
        full = rng.random() < 0.05
        if full:
            A[:] = True
            B[:] = True
        wa, va = math.fsum(pw[A]), math.fsum(pv[A])
        wb, vb = math.fsum(pw[B]), math.fsum(pv[B])
        if full:
            wa = va = wb = vb = 1.0
        e = math.exp(norm * epsilon)
        slacks = (va - wa / e, va - (1.0 - e * (1.0 - wa)), e * wb - vb)
        m = min(slacks)
        worst = min(worst, m)
        if m < -tol:
            violations += 1
            if len(examples) < 5:
                examples.append({"delta": delta.tolist(), "slacks": list(slacks)})
    return ClaimReport(trials, violations, worst, examples)


# ---------------------------------------------------------------------------
# Lipschitz check for the grouped shuffle


@dataclass
class LipschitzReport:
    pairs: int
    violations: int
    worst_ratio: float


def lipschitz_check(model, inst: EncodedInstance, lam: int, *, limit: int = ENUMERATION_LIMIT) -> LipschitzReport:
    """Compare exact smoothed scores at every pair of position maps.

    Passes when |g_c(u) - g_c(u')| <= |u - u'|_1 / (2 lam) for every class.
    """
    n = inst.n
    law = group_permutation_law(n, lam, limit)
    perms = np.array(list(law.keys()), dtype=np.int64)
    weights = np.array(list(law.values()))
    starts = list(itertools.permutations(range(n)))
    _refuse_if_large(len(starts) * len(perms), "Lipschitz enumeration", limit)
    scores = {}
    for u in starts:
        u = np.array(u)
        pos = perms[:, u]
        rows = np.broadcast_to(inst.rows, (len(perms), n, inst.d))
        scores[tuple(u)] = _tally(model, rows, pos, weights)
    keys = list(scores)
    violations = 0
    worst = 0.0
    pairs = 0
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            dist = int(np.abs(np.array(a) - np.array(b)).sum())
            gap = float(np.max(np.abs(scores[a] - scores[b])))
            pairs += 1
            ratio = gap * 2 * lam / dist
            worst = max(worst, ratio)
            if gap > dist / (2.0 * lam) + 1e-12:
                violations += 1
    return LipschitzReport(pairs, violations, worst)


def group_shuffle_total_variation(n: int, lam: int, shift) -> float:
    """TV distance between the grouped shuffle applied before and after ``shift``."""
    law = group_permutation_law(n, lam)
    moved: dict[tuple[int, ...], float] = {}
    for r, p in law.items():
        key = tuple(r[shift[i]] for i in range(n))
        moved[key] = moved.get(key, 0.0) + p
    keys = set(law) | set(moved)
    return 0.5 * math.fsum(abs(law.get(k, 0.0) - moved.get(k, 0.0)) for k in keys)
