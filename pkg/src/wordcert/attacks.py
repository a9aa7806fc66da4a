"""Simple word-level attacks and the certificate soundness harness."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bounds import clopper_pearson_lower
from .certify import CertifyResult, instance_seed
from .embeddings import PAD_ID, EmbeddingTable, EncodedInstance, SynonymTable
from .noise import (
    Mechanism,
    NoiseModel,
    PerturbationSpec,
    SmoothingConfig,
    apply_permutation,
    deletion_transform,
    insertion_spec,
    insertion_transform,
    perturbation_norm,
    position_shift_norm,
    reorder_norm,
    rng_for,
    substitution_transform,
)

log = logging.getLogger(__name__)

ATTACK_COLUMNS = ("instance_id", "attack", "success", "norm", "budget", "trials")


# ---------------------------------------------------------------------------
# scorers


def _stack(instances: Sequence[EncodedInstance]):
    ids = np.stack([x.token_ids for x in instances])
    rows = np.stack([x.rows for x in instances])
    pos = np.stack([x.positions for x in instances])
    return ids, rows, pos


class BaseScorer:
    """Class probabilities of the base classifier."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, instances: Sequence[EncodedInstance]) -> np.ndarray:
        self.calls += len(instances)
        _, rows, pos = _stack(instances)
        return self.model.scores_batch(rows, pos)


class SmoothedScorer:
    """Monte-Carlo label frequencies of the smoothed classifier.

    Each call gets its own stream, so results depend only on the seed and
    the sequence of calls.
    """

    def __init__(self, model, noise: NoiseModel, samples: int, seed: int, stream: int = 7):
        self.model = model
        self.noise = noise
        self.samples = samples
        self.seed = seed
        self.stream = stream
        self.calls = 0

    def counts(self, instances: Sequence[EncodedInstance], samples: int | None = None) -> np.ndarray:
        m = self.samples if samples is None else samples
        out = np.zeros((len(instances), self.model.C), dtype=np.int64)
        block = max(1, 8192 // m)
        for start in range(0, len(instances), block):
            part = instances[start : start + block]
            ids, rows, pos = _stack(part)
            rng = rng_for(self.seed, self.stream, self.calls)
            self.calls += 1
            k = len(part)
            n_ids, n_rows, n_pos = self.noise.apply(
                np.repeat(ids, m, axis=0), np.repeat(rows, m, axis=0), np.repeat(pos, m, axis=0), rng
            )
            labels = self.model.predict_batch(n_rows, n_pos).reshape(k, m)
            for j in range(k):
                out[start + j] = np.bincount(labels[j], minlength=self.model.C)
        return out

    def __call__(self, instances: Sequence[EncodedInstance]) -> np.ndarray:
        return self.counts(instances) / float(self.samples)


Scorer = Callable[[Sequence[EncodedInstance]], np.ndarray]


# ---------------------------------------------------------------------------
# attacks


@dataclass
class AttackResult:
    attack: str
    success: bool
    spec: PerturbationSpec | None = None
    norm: float = 0.0
    norm_reorder: float = 0.0
    instance: EncodedInstance | None = None
    trials: int = 0
    label: int | None = None
    new_label: int | None = None


def _rendered_word_slots(inst: EncodedInstance) -> list[int]:
    ids = inst.rendered_ids()
    return [j for j in range(inst.n) if ids[j] != PAD_ID]


def word_importance(scorer: Scorer, inst: EncodedInstance, label: int) -> dict[int, float]:
    """Drop in the label score when the word rendered at each slot is zeroed."""
    slots = _rendered_word_slots(inst)
    if not slots:
        return {}
    order = np.argsort(inst.positions)
    variants = []
    for j in slots:
        row = order[j]
        ids = inst.token_ids.copy()
        rows = inst.rows.copy()
        ids[row] = PAD_ID
        rows[row] = 0.0
        variants.append(inst.replace(token_ids=ids, rows=rows))
    base = scorer([inst])[0, label]
    drops = base - scorer(variants)[:, label]
    return {j: float(d) for j, d in zip(slots, drops)}


def _label_of(scorer, inst, label):
    return int(np.argmax(scorer([inst])[0])) if label is None else label


def attack_substitution_greedy(
    scorer: Scorer,
    inst: EncodedInstance,
    table: EmbeddingTable,
    syn: SynonymTable,
    budget: float,
    *,
    label: int | None = None,
    max_words: int | None = None,
) -> AttackResult:
    """Swap synonyms into the most important words until the label flips.

    Each word in turn gets whichever affordable synonym (interval <= what
    is left of the budget) lowers the label score most.  Synonyms are
    looked up for the original word, so the norm is the sum of their
    interval indices.
    """
    label = _label_of(scorer, inst, label)
    if budget < 1:
        return AttackResult("substitution", False, label=label)
    imp = word_importance(scorer, inst, label)
    order = np.argsort(inst.positions)
    slots = sorted(imp, key=lambda j: -imp[j])[:max_words]
    current = inst
    spent = 0
    chosen: dict[int, tuple[str, int]] = {}
    trials = 0
    for j in slots:
        word = table.words[inst.token_ids[order[j]]]
        options = [x for x in syn[word] if x.interval <= budget - spent and x.word in table.index]
        if not options:
            continue
        variants = [substitution_transform(current, table, {j: x.word}) for x in options]
        probs = scorer(variants)
        trials += len(variants)
        best = int(np.argmin(probs[:, label]))
        if probs[best, label] >= scorer([current])[0, label]:
            continue
        current = variants[best]
        spent += options[best].interval
        chosen[j] = (options[best].word, options[best].interval)
        new = int(np.argmax(probs[best]))
        if new != label:
            spec = PerturbationSpec(
                "S", intervals=[k for _, k in chosen.values()], positions=sorted(chosen),
                words=[w for w, _ in chosen.values()],
            )
            return AttackResult("substitution", True, spec, perturbation_norm(spec), 0.0, current,
                                trials, label, new)
    spec = PerturbationSpec("S", intervals=[k for _, k in chosen.values()], positions=sorted(chosen),
                            words=[w for w, _ in chosen.values()])
    return AttackResult("substitution", False, spec, perturbation_norm(spec), 0.0, current, trials, label)


def random_local_reorder(n: int, rng, max_norm: float = math.inf) -> np.ndarray:
    """Shuffle a random window of consecutive slots."""
    width = int(rng.integers(2, n + 1))
    start = int(rng.integers(0, n - width + 1))
    r = np.arange(n)
    r[start : start + width] = start + rng.permutation(width)
    return r


def attack_reorder(
    scorer: Scorer,
    inst: EncodedInstance,
    trials: int,
    rng,
    *,
    max_norm: float = math.inf,
    label: int | None = None,
) -> AttackResult:
    """Random local reorderings, tried in order of increasing displacement."""
    label = _label_of(scorer, inst, label)
    if inst.n < 2 or trials < 1:
        return AttackResult("reorder", False, label=label)
    seen = {}
    for _ in range(trials):
        r = random_local_reorder(inst.n, rng)
        norm = reorder_norm(r)
        if 0 < norm <= max_norm:
            seen.setdefault(r.tobytes(), r)
    cands = sorted(seen.values(), key=reorder_norm)
    for start in range(0, len(cands), 256):
        batch = cands[start : start + 256]
        moved = [apply_permutation(inst, r) for r in batch]
        labels = np.argmax(scorer(moved), axis=1)
        for r, m, y in zip(batch, moved, labels):
            if y != label:
                spec = PerturbationSpec("R", target=r.tolist())
                return AttackResult("reorder", True, spec, perturbation_norm(spec), perturbation_norm(spec),
                                    m, trials, label, int(y))
    return AttackResult("reorder", False, trials=trials, label=label)


def _insertion_candidate(inst, table, syn, m, rng):
    present = [table.words[i] for i in inst.token_ids if i > PAD_ID]
    if not present:
        return None
    words = []
    for _ in range(m):
        w = present[int(rng.integers(0, len(present)))]
        options = syn[w]
        if not options:
            return None
        words.append(options[int(rng.integers(0, len(options)))].word)
    slots = np.sort(rng.choice(inst.n, size=m, replace=False))
    vecs = np.stack([table[w] for w in words])
    ids = [table.index[w] for w in words]
    moved = insertion_transform(inst, slots, vecs, ids)
    spec = insertion_spec(inst, slots, vecs, words)
    return spec, moved


def attack_insertion(
    scorer: Scorer,
    inst: EncodedInstance,
    table: EmbeddingTable,
    syn: SynonymTable,
    budget: int,
    rng,
    *,
    trials: int = 200,
    max_norm: float = math.inf,
    max_norm_reorder: float = math.inf,
    label: int | None = None,
) -> AttackResult:
    """Insert up to ``budget`` synonyms of words already in the text at random slots.

    Candidates must satisfy norm < max_norm and reorder norm < max_norm_reorder
    when those bounds are finite.
    """
    label = _label_of(scorer, inst, label)
    if budget < 1 or trials < 1:
        return AttackResult("insertion", False, label=label)
    cands = []
    for _ in range(trials):
        m = int(rng.integers(1, min(budget, inst.n) + 1))
        got = _insertion_candidate(inst, table, syn, m, rng)
        if got is None:
            continue
        spec, moved = got
        norm = perturbation_norm(spec)
        norm_r = position_shift_norm(inst, moved)
        if norm < max_norm and (norm_r < max_norm_reorder or math.isinf(max_norm_reorder)):
            cands.append((spec, moved, norm, norm_r))
    for start in range(0, len(cands), 256):
        batch = cands[start : start + 256]
        labels = np.argmax(scorer([c[1] for c in batch]), axis=1)
        for (spec, moved, norm, norm_r), y in zip(batch, labels):
            if y != label:
                return AttackResult("insertion", True, spec, norm, norm_r, moved, trials, label, int(y))
    return AttackResult("insertion", False, trials=trials, label=label)


def attack_deletion_input_reduction(
    scorer: Scorer,
    inst: EncodedInstance,
    budget: int,
    *,
    label: int | None = None,
) -> AttackResult:
    """Input reduction: keep deleting the word whose loss hurts the label least."""
    label = _label_of(scorer, inst, label)
    if budget < 1:
        return AttackResult("deletion", False, label=label)
    current = inst
    original_slots = list(range(inst.n))  # original slot shown at each rendered slot
    gone: list[int] = []
    trials = 0
    for _ in range(int(min(budget, inst.num_words))):
        slots = _rendered_word_slots(current)
        if not slots:
            break
        variants = [deletion_transform(current, [j]) for j in slots]
        probs = scorer(variants)
        trials += len(variants)
        best = int(np.argmax(probs[:, label]))
        j = slots[best]
        gone.append(original_slots[j])
        original_slots = original_slots[:j] + original_slots[j + 1 :] + [original_slots[j]]
        current = variants[best]
        new = int(np.argmax(probs[best]))
        if new != label:
            spec = PerturbationSpec("D", positions=sorted(gone))
            return AttackResult("deletion", True, spec, float(len(gone)), position_shift_norm(inst, current),
                                current, trials, label, new)
    spec = PerturbationSpec("D", positions=sorted(gone))
    return AttackResult("deletion", False, spec, float(len(gone)), 0.0, current, trials, label)


def attack_deletion_greedy(scorer: Scorer, inst: EncodedInstance, budget: int, *, label: int | None = None):
    """Delete the most important words first."""
    label = _label_of(scorer, inst, label)
    if budget < 1:
        return AttackResult("deletion", False, label=label)
    imp = word_importance(scorer, inst, label)
    order = sorted(imp, key=lambda j: -imp[j])
    for k in range(1, int(min(budget, len(order))) + 1):
        gone = sorted(order[:k])
        moved = deletion_transform(inst, gone)
        y = int(np.argmax(scorer([moved])[0]))
        if y != label:
            spec = PerturbationSpec("D", positions=gone)
            return AttackResult("deletion", True, spec, float(k), position_shift_norm(inst, moved), moved, k, label, y)
    return AttackResult("deletion", False, trials=len(order), label=label)


# ---------------------------------------------------------------------------
# soundness harness


@dataclass
class AttackRow:
    instance_id: object
    attack: str
    success: bool
    norm: float
    budget: float
    trials: int


@dataclass
class Violation:
    instance_id: object
    mechanism: str
    certified_label: int
    spec: PerturbationSpec
    norm: float
    norm_reorder: float
    counts: list[int]

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id, "mechanism": self.mechanism,
            "certified_label": self.certified_label, "spec": self.spec.to_dict(),
            "norm": self.norm, "norm_reorder": self.norm_reorder, "counts": self.counts,
        }


@dataclass
class HarnessReport:
    rows: list[AttackRow] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    certified: int = 0
    candidates: int = 0
    confirmed_checks: int = 0
    unrestricted_attempts: int = 0
    unrestricted_successes: int = 0

    @property
    def sound(self) -> bool:
        return not self.violations

    @property
    def unrestricted_success_rate(self) -> float:
        if self.unrestricted_attempts == 0:
            return 0.0
        return self.unrestricted_successes / self.unrestricted_attempts


def _fingerprint(inst: EncodedInstance) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in (inst.token_ids, inst.positions, inst.rows):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def _within_candidates(inst, result: CertifyResult, config: SmoothingConfig, base: BaseScorer,
                       table, syn, trials: int, rng):
    """Perturbations inside the certified region, as (spec, instance, norm, norm_reorder)."""
    m = config.mechanism
    label = result.label
    out = []
    radius = result.radius
    if m is Mechanism.SUBSTITUTION:
        greedy = attack_substitution_greedy(base, inst, table, syn, radius, label=label)
        if greedy.spec is not None and greedy.spec.intervals:
            out.append((greedy.spec, greedy.instance, greedy.norm, 0.0))
        order = np.argsort(inst.positions)
        slots = _rendered_word_slots(inst)
        for _ in range(trials - 1):
            left = radius
            repl = {}
            for j in rng.permutation(slots):
                word = table.words[inst.token_ids[order[j]]]
                options = [x for x in syn[word] if x.interval <= left]
                if not options or rng.random() < 0.3:
                    continue
                x = options[int(rng.integers(0, len(options)))]
                repl[int(j)] = x
                left -= x.interval
            if not repl:
                continue
            spec = PerturbationSpec("S", intervals=[x.interval for x in repl.values()], positions=sorted(repl),
                                    words=[x.word for x in repl.values()])
            moved = substitution_transform(inst, table, {j: x.word for j, x in repl.items()})
            out.append((spec, moved, perturbation_norm(spec), 0.0))
        return out
    if m is Mechanism.REORDER:
        for _ in range(trials):
            r = random_local_reorder(inst.n, rng)
            norm = reorder_norm(r)
            if 0 < norm <= radius:
                out.append((PerturbationSpec("R", target=r.tolist()), apply_permutation(inst, r), float(norm), float(norm)))
        return out
    rad_r = result.radius_reorder if result.radius_reorder is not None else 0.0
    if m is Mechanism.INSERTION:
        for _ in range(trials):
            got = _insertion_candidate(inst, table, syn, int(rng.integers(1, 3)), rng)
            if got is None:
                continue
            spec, moved = got
            norm, norm_r = perturbation_norm(spec), float(position_shift_norm(inst, moved))
            if norm < radius and norm_r < rad_r:
                out.append((spec, moved, norm, norm_r))
        return out
    slots = _rendered_word_slots(inst)
    cap = int(min(math.floor(radius), len(slots)))
    if cap < 1:
        return out
    for res in (attack_deletion_input_reduction(base, inst, cap, label=label),
                attack_deletion_greedy(base, inst, cap, label=label)):
        if res.instance is not None and res.spec is not None and res.spec.positions:
            out.append((res.spec, res.instance, res.norm, float(position_shift_norm(inst, res.instance))))
    for _ in range(trials):
        k = int(rng.integers(1, cap + 1))
        gone = sorted(int(j) for j in rng.choice(slots, size=k, replace=False))
        moved = deletion_transform(inst, gone)
        out.append((PerturbationSpec("D", positions=gone), moved, float(k), float(position_shift_norm(inst, moved))))
    return out


def _unrestricted(base: BaseScorer, inst, config, table, syn, rng, label) -> bool:
    m = config.mechanism
    if m is Mechanism.SUBSTITUTION:
        return attack_substitution_greedy(base, inst, table, syn, math.inf, label=label).success
    if m is Mechanism.REORDER:
        return attack_reorder(base, inst, 500, rng, label=label).success
    if m is Mechanism.INSERTION:
        return attack_insertion(base, inst, table, syn, inst.n // 2, rng, trials=300, label=label).success
    return (attack_deletion_input_reduction(base, inst, inst.num_words, label=label).success
            or attack_deletion_greedy(base, inst, inst.num_words, label=label).success)


def soundness_harness(
    model,
    instances: Sequence[EncodedInstance],
    results: Sequence[CertifyResult],
    config: SmoothingConfig,
    *,
    ids: Sequence | None = None,
    table: EmbeddingTable | None = None,
    synonyms: SynonymTable | None = None,
    trials: int = 10_000,
    screen: int = 200,
    confirm: int = 20_000,
    alpha: float = 0.001,
    seed: int = 0,
    noise: NoiseModel | None = None,
    unrestricted: bool = True,
) -> HarnessReport:
    """Attack every certified instance inside its certified region.

    Candidates are screened on the smoothed classifier with ``screen``
    Monte-Carlo draws; any that look close to flipping are re-estimated
    with ``confirm`` fresh draws and count as a violation only when the
    Clopper-Pearson bounds separate another class above the certified one.
    Unrestricted attacks against the base classifier run on every
    correctly classified instance.
    """
    ids = list(range(len(instances))) if ids is None else list(ids)
    if len(instances) != len(results):
        raise ValueError("instances and results differ in length")
    needs_words = config.mechanism in (Mechanism.SUBSTITUTION, Mechanism.INSERTION)
    if needs_words and (table is None or synonyms is None):
        raise ValueError(f"{config.mechanism.value} attacks need the embedding and synonym tables")
    noise = noise or NoiseModel(config, table, synonyms)
    base = BaseScorer(model)
    report = HarnessReport()
    name = config.mechanism.value
    for iid, inst, res in zip(ids, instances, results):
        iseed = instance_seed(seed, iid)
        rng = rng_for(iseed, 0xA77)
        smooth = SmoothedScorer(model, noise, screen, seed=iseed)
        if unrestricted:
            clean = int(model.predict_batch(inst.rows[None], inst.positions[None])[0])
            if clean == inst.label:
                report.unrestricted_attempts += 1
                ok = _unrestricted(base, inst, config, table, synonyms, rng, clean)
                report.unrestricted_successes += ok
                report.rows.append(AttackRow(iid, f"{name}-unrestricted", ok, math.nan, math.inf, 1))
        if not res.certified:
            continue
        report.certified += 1
        cands = _within_candidates(inst, res, config, base, table, synonyms, trials, rng)
        unique = {}
        for c in cands:
            unique.setdefault(_fingerprint(c[1]), c)
        cands = list(unique.values())
        report.candidates += len(cands)
        found = None
        max_norm = 0.0
        for start in range(0, len(cands), 512):
            batch = cands[start : start + 512]
            freq = smooth([c[1] for c in batch])
            for c, f in zip(batch, freq):
                max_norm = max(max_norm, c[2])
                others = np.delete(f, res.label)
                if f[res.label] - others.max() > 0.3:
                    continue
                report.confirmed_checks += 1
                counts = smooth.counts([c[1]], samples=confirm)[0]
                k_top = int(counts[res.label])
                other = int(np.argmax(np.where(np.arange(len(counts)) == res.label, -1, counts)))
                upper_top = 1.0 - clopper_pearson_lower(confirm - k_top, confirm, alpha / 2)
                lower_other = clopper_pearson_lower(int(counts[other]), confirm, alpha / 2)
                if lower_other > upper_top:
                    found = Violation(iid, name, int(res.label), c[0], c[2], c[3], counts.tolist())
                    break
            if found:
                break
        if found:
            log.error("within-radius attack succeeded on %s: %s", iid, found.to_dict())
            report.violations.append(found)
        report.rows.append(AttackRow(iid, name, found is not None, found.norm if found else max_norm,
                                     res.radius, trials))
    return report


def write_attack_csv(fh, rows: Sequence[AttackRow]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ATTACK_COLUMNS)
    for r in rows:
        w.writerow((r.instance_id, r.attack, int(r.success), repr(float(r.norm)), repr(float(r.budget)), r.trials))
