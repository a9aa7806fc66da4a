"""Monte-Carlo prediction and certification of the smoothed classifier."""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bounds import (
    confidence_pair,
    rad_deletion,
    rad_insertion,
    rad_reorder,
    rad_substitution,
)
from .embeddings import EmbeddingTable, EncodedInstance, SynonymTable
from .noise import Mechanism, NoiseModel, SmoothingConfig, rng_for

CHUNK = 4096
SELECT_STREAM = 0
ESTIMATE_STREAM = 1

RESULT_COLUMNS = (
    "instance_id", "gold", "outcome", "label", "pA_lower", "radius",
    "radius_reorder", "N", "alpha", "mechanism", "seed",
)


def instance_seed(run_seed: int, instance_id) -> int:
    """Order-independent per-instance seed."""
    digest = hashlib.blake2b(f"{run_seed}:{instance_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _chunk_counts(model, noise: NoiseModel, inst, seed, stream, index, size):
    rng = rng_for(seed, stream, index)
    _, rows, pos = noise.sample(inst, rng, size)
    labels = model.predict_batch(rows, pos)
    return np.bincount(labels, minlength=model.C)


def sample_under_noise(
    model,
    inst: EncodedInstance,
    noise: NoiseModel,
    count: int,
    seed: int,
    *,
    stream: int = ESTIMATE_STREAM,
    workers: int = 1,
) -> np.ndarray:
    """Tally the base classifier's labels over ``count`` noise draws.

    Draws come in fixed chunks, each from its own counter-based stream, so
    the tally does not depend on ``workers``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sizes = [min(CHUNK, count - start) for start in range(0, count, CHUNK)]

    def job(i):
        return _chunk_counts(model, noise, inst, seed, stream, i, sizes[i])

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(i) for i in range(len(sizes))]
    return np.sum(parts, axis=0).astype(np.int64)


@dataclass
class CertifyResult:
    outcome: str  # "certified" or "abstain"
    label: int | None
    radius: float
    radius_reorder: float | None
    pA_lower: float
    pB_upper: float
    counts: list[int]
    n0: int
    N: int
    alpha: float
    mechanism: str
    seed: int
    samples: int = 0

    @property
    def certified(self) -> bool:
        return self.outcome == "certified"


def radius_for(config: SmoothingConfig, pA: float, pB: float, inst: EncodedInstance):
    """(radius, reorder radius) for the configured mechanism."""
    m = config.mechanism
    if m is Mechanism.SUBSTITUTION:
        if config.s == 0:
            return 0.0, None
        return rad_substitution(pA, pB, config.epsilon), None
    if m is Mechanism.REORDER:
        return rad_reorder(pA, pB, config.lam), None
    rad_r = rad_reorder(pA, pB, config.certified_lambda(inst.n))
    if m is Mechanism.INSERTION:
        return rad_insertion(pA, pB, config.sigma), rad_r
    words = inst.num_words
    if words == 0 or config.p in (0.0, 1.0):
        return 0.0, rad_r
    return float(rad_deletion(pA, pB, words, config.p)), rad_r


def certify(
    model,
    inst: EncodedInstance,
    config: SmoothingConfig,
    *,
    n0: int = 100,
    N: int = 100_000,
    alpha: float = 0.001,
    seed: int = 0,
    noise: NoiseModel | None = None,
    table: EmbeddingTable | None = None,
    synonyms: SynonymTable | None = None,
    workers: int = 1,
) -> CertifyResult:
    """Predict with N0 draws, bound pA with N fresh draws, abstain if pA <= 1/2."""
    if n0 < 1 or N < 1 or not 0.0 < alpha < 1.0:
        raise ValueError("need n0 >= 1, N >= 1 and 0 < alpha < 1")
    if noise is None:
        noise = NoiseModel(config, table, synonyms)
    config.validate(inst.n)
    select = sample_under_noise(model, inst, noise, n0, seed, stream=SELECT_STREAM, workers=workers)
    top = int(np.argmax(select))  # argmax takes the lowest id on ties
    counts = sample_under_noise(model, inst, noise, N, seed, stream=ESTIMATE_STREAM, workers=workers)
    pair = confidence_pair(int(counts[top]), N, alpha)
    common = dict(
        pA_lower=pair.pA_lower, pB_upper=pair.pB_upper, counts=[int(c) for c in counts],
        n0=n0, N=N, alpha=alpha, mechanism=config.mechanism.value, seed=seed, samples=n0 + N,
    )
    if pair.pA_lower <= 0.5:
        return CertifyResult("abstain", None, 0.0, None, **common)
    radius, radius_r = radius_for(config, pair.pA_lower, pair.pB_upper, inst)
    return CertifyResult("certified", top, radius, radius_r, **common)


def certify_dataset(
    model,
    instances: Sequence[EncodedInstance],
    config: SmoothingConfig,
    *,
    ids: Sequence | None = None,
    run_seed: int = 0,
    progress=None,
    **kwargs,
) -> list[CertifyResult]:
    ids = list(range(len(instances))) if ids is None else list(ids)
    noise = kwargs.pop("noise", None) or NoiseModel(config, kwargs.pop("table", None), kwargs.pop("synonyms", None))
    out = []
    for iid, inst in zip(ids, instances):
        out.append(certify(model, inst, config, seed=instance_seed(run_seed, iid), noise=noise, **kwargs))
        if progress is not None:
            progress(len(out), len(instances))
    return out


def certified_accuracy_curve(results: Sequence[CertifyResult], gold: Sequence[int], radii) -> list[tuple[float, float]]:
    """Fraction of instances certified with the gold label at radius >= r."""
    if not results:
        raise ValueError("no results")
    if len(results) != len(gold):
        raise ValueError("results and gold labels differ in length")
    ok = np.array([r.certified and r.label == g for r, g in zip(results, gold)])
    rad = np.array([r.radius if r.certified else -math.inf for r in results])
    total = len(results)
    return [(float(t), float(np.sum(ok & (rad >= t))) / total) for t in radii]


def max_certified_radius(results: Sequence[CertifyResult], gold: Sequence[int]) -> float:
    best = 0.0
    for r, g in zip(results, gold):
        if r.certified and r.label == g:
            best = max(best, r.radius)
    return best


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_results_csv(fh, results: Sequence[CertifyResult], gold: Sequence[int], ids: Sequence | None = None):
    ids = list(range(len(results))) if ids is None else list(ids)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for iid, g, r in zip(ids, gold, results):
        w.writerow([
            iid, g, r.outcome, _fmt(r.label), _fmt(r.pA_lower), _fmt(float(r.radius)),
            _fmt(None if r.radius_reorder is None else float(r.radius_reorder)),
            r.N, _fmt(r.alpha), r.mechanism, r.seed,
        ])


def read_results_csv(fh) -> list[dict]:
    rows = list(csv.DictReader(fh))
    if rows and set(RESULT_COLUMNS) - set(rows[0]):
        raise ValueError(f"results file lacks columns {sorted(set(RESULT_COLUMNS) - set(rows[0]))}")
    return rows


def write_curve_csv(fh, curve):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("radius", "certified_accuracy"))
    for r, a in curve:
        w.writerow((repr(float(r)), repr(float(a))))


def results_from_rows(rows: Sequence[dict]):
    """Rebuild (ids, gold, results) from rows of a results CSV.

    Counts are not stored in the CSV, so they come back empty.
    """
    ids, gold, out = [], [], []
    for i, row in enumerate(rows, start=2):
        try:
            rr = row["radius_reorder"]
            res = CertifyResult(
                outcome=row["outcome"],
                label=int(row["label"]) if row["label"] != "" else None,
                radius=float(row["radius"]),
                radius_reorder=float(rr) if rr != "" else None,
                pA_lower=float(row["pA_lower"]),
                pB_upper=1.0 - float(row["pA_lower"]),
                counts=[],
                n0=0,
                N=int(row["N"]),
                alpha=float(row["alpha"]),
                mechanism=row["mechanism"],
                seed=int(row["seed"]),
            )
            g = int(row["gold"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"results line {i}: {exc}") from None
        if res.outcome not in ("certified", "abstain") or (res.certified and res.label is None):
            raise ValueError(f"results line {i}: bad outcome {res.outcome!r}")
        ids.append(row["instance_id"])
        gold.append(g)
        out.append(res)
    return ids, gold, out
