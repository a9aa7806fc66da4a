"""Command-line entry point: ``wordcert <command> [options]``.

Commands: gen-corpus, build-synonyms, train, certify, attack, report.
Exit codes: 0 success, 2 bad input (usage, unreadable files, mismatched
model and config), 3 soundness violation found by ``attack``.

Run configuration is a JSON object::

    {
      "mechanism": "substitution",        # or reorder / insertion / deletion
      "noise": "Med",                      # optional Low/Med/High preset
      "s": 100, "gamma": 1.0, "delta": 1.0,  # substitution
      "lambda": 4,                         # reorder
      "sigma": 0.5, "ogn": false, "backbone": "lstm",  # insertion
      "p": 0.5,                            # deletion
      "n": 16, "d": 16,
      "n0": 100, "nsamples": 100000, "alpha": 0.001, "seed": 0, "workers": 1,
      "embeddings": "embeddings.txt", "synonyms": "synonyms.json",
      "train": {"epochs": 50, "lr": 0.05, "batch": 32, "hidden": 32, "momentum": 0.9, "seed": 0}
    }

Explicit noise parameters override the preset.  Relative file paths are
resolved against the directory holding the config file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import soundness_harness, write_attack_csv
from .certify import (
    certified_accuracy_curve,
    certify_dataset,
    read_results_csv,
    results_from_rows,
    write_curve_csv,
    write_results_csv,
)
from .classifier import ModelFormatError, load_model, save_model, train_smoothed
from .corpus import generate_corpus, read_corpus_csv, synthetic_embeddings, write_corpus_csv
from .embeddings import (
    EmbeddingParseError,
    SynonymTable,
    build_synonym_table,
    compute_ogn_mean,
    encode_instance,
    load_embedding_table,
)
from .noise import Mechanism, SmoothingConfig

log = logging.getLogger("wordcert")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VIOLATION = 3

# synonym list size used for insertion attacks when the config has no s
INSERTION_ATTACK_S = 50


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

_NOISE_KEYS = {"s", "gamma", "delta", "lambda", "sigma", "p"}
_RUN_KEYS = {"n0", "nsamples", "alpha", "seed", "workers"}
_TRAIN_KEYS = {"epochs", "lr", "batch", "hidden", "momentum", "seed"}
_KNOWN = _NOISE_KEYS | _RUN_KEYS | {
    "mechanism", "noise", "ogn", "backbone", "n", "d", "embeddings", "synonyms", "train",
}


@dataclass
class RunConfig:
    smoothing: SmoothingConfig
    n: int
    d: int | None = None
    n0: int = 100
    nsamples: int = 100_000
    alpha: float = 0.001
    seed: int = 0
    workers: int = 1
    embeddings: Path | None = None
    synonyms: Path | None = None
    train: dict = field(default_factory=dict)

    @property
    def mechanism(self) -> Mechanism:
        return self.smoothing.mechanism


def parse_run_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - _KNOWN
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "mechanism" not in raw or "n" not in raw:
        raise UsageError("config needs at least 'mechanism' and 'n'")
    try:
        mech = Mechanism(raw["mechanism"])
    except ValueError:
        raise UsageError(f"unknown mechanism {raw['mechanism']!r}") from None
    n = int(raw["n"])
    if n < 1:
        raise UsageError("n must be positive")
    try:
        if "noise" in raw:
            sm = SmoothingConfig.preset(mech, raw["noise"], n, backbone=raw.get("backbone", "lstm"))
        else:
            sm = SmoothingConfig(mech)
        extra = {k: raw[k] for k in _NOISE_KEYS if k in raw}
        if extra:
            merged = sm.to_dict()
            merged.update(extra)
            sm = SmoothingConfig.from_dict(merged)
        sm.ogn = bool(raw.get("ogn", False))
        sm.validate(n)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"bad noise settings: {exc}") from None
    train = raw.get("train", {})
    if not isinstance(train, dict) or set(train) - _TRAIN_KEYS:
        raise UsageError(f"'train' must be an object with keys from {sorted(_TRAIN_KEYS)}")

    def path(key):
        return (base_dir / raw[key]) if raw.get(key) else None

    return RunConfig(
        smoothing=sm,
        n=n,
        d=int(raw["d"]) if "d" in raw else None,
        n0=int(raw.get("n0", 100)),
        nsamples=int(raw.get("nsamples", 100_000)),
        alpha=float(raw.get("alpha", 0.001)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        embeddings=path("embeddings"),
        synonyms=path("synonyms"),
        train=dict(train),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(raw, path.parent)


# ---------------------------------------------------------------------------
# shared loaders


def _embedding_dim(path: Path) -> int:
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if parts:
                    return len(parts) - 1
    except OSError as exc:
        raise UsageError(f"cannot read embeddings {path}: {exc.strerror}") from None
    raise UsageError(f"{path}: no embedding records found")


def _load_table(path, dim: int | None = None):
    if path is None:
        raise UsageError("no embedding file given (--embeddings or config 'embeddings')")
    path = Path(path)
    dim = dim or _embedding_dim(path)
    try:
        return load_embedding_table(str(path), dim)
    except EmbeddingParseError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read embeddings {path}: {exc.strerror}") from None


def _load_synonyms(path, table, s: int) -> SynonymTable:
    if path is not None:
        try:
            syn = SynonymTable.from_json(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read synonyms {path}: {exc.strerror}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{path}: bad synonym table ({exc})") from None
        if syn.s != s:
            raise UsageError(f"synonym table has s={syn.s} but the config asks for s={s}")
        return syn
    return build_synonym_table(table, s)


def _load_dataset(path, table, n: int):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            corpus = read_corpus_csv(fh)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if any(lab < 0 for lab in corpus.labels):
        raise UsageError(f"{path}: labels must be non-negative")
    return [encode_instance(t, n, table, lab) for t, lab in zip(corpus.texts, corpus.labels)]


def _resources(cfg: RunConfig, args):
    """Embedding table, synonym table (or None) and smoothing config."""
    table = _load_table(getattr(args, "embeddings", None) or cfg.embeddings, cfg.d)
    sm = cfg.smoothing
    if sm.mechanism is Mechanism.INSERTION and sm.ogn:
        sm.mean = compute_ogn_mean(table)
    syn_path = getattr(args, "synonyms", None) or cfg.synonyms
    syn = None
    if sm.mechanism is Mechanism.SUBSTITUTION and sm.s > 0:
        syn = _load_synonyms(syn_path, table, sm.s)
    return table, syn, sm


def _load_checked_model(path, cfg: RunConfig, table):
    try:
        model = load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}") from None
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from None
    trained = model.meta.get("mechanism")
    if trained is not None and trained != cfg.mechanism.value:
        raise UsageError(f"model was trained with {trained} noise but the config asks for {cfg.mechanism.value}")
    if model.n != cfg.n or model.d != table.dim:
        raise UsageError(f"model expects n={model.n}, d={model.d}; config and embeddings give n={cfg.n}, d={table.dim}")
    return model


def _open_out(path):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    if args.size < 1 or args.test_size < 0:
        raise UsageError("--size must be >= 1 and --test-size >= 0")
    if args.vocab < 8 or args.length < 1 or args.dim < 2:
        raise UsageError("need --vocab >= 8, --length >= 1, --dim >= 2")
    table = synthetic_embeddings(args.vocab, args.dim, seed=args.seed)
    corpus = generate_corpus(table, args.size + args.test_size, args.length, seed=args.seed,
                             contamination=args.contamination,
                             keywords=(1, min(8, (args.length + 1) // 2)))
    train, test = corpus.split(args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _open_out(out / "embeddings.txt") as fh:
        table.dump(fh)
    with _open_out(out / "train.csv") as fh:
        write_corpus_csv(fh, train)
    if args.test_size:
        with _open_out(out / "test.csv") as fh:
            write_corpus_csv(fh, test)
    log.info("wrote %d train / %d test texts to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_build_synonyms(args) -> int:
    table = _load_table(args.embeddings, args.dim)
    if not 0 < args.s <= len(table) - 2:
        raise UsageError(f"--s must lie in 1..{len(table) - 2} (vocabulary size minus one)")
    syn = build_synonym_table(table, args.s)
    with _open_out(args.out) as fh:
        fh.write(syn.to_json())
        fh.write("\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    table, syn, sm = _resources(cfg, args)
    data = _load_dataset(args.data, table, cfg.n)
    if not data:
        raise UsageError(f"{args.data}: dataset is empty")
    hp = {"epochs": 50, "lr": 0.05, "batch": 32, "hidden": 32, "momentum": 0.9, "seed": cfg.seed}
    hp.update(cfg.train)
    if args.epochs is not None:
        hp["epochs"] = args.epochs
    if hp["epochs"] < 0:
        raise UsageError("epochs must be >= 0")
    classes = max(2, max(x.label for x in data) + 1)
    result = train_smoothed(data, sm, num_classes=classes, table=table, synonyms=syn, **hp)
    model = result.model
    model.meta = {"mechanism": sm.mechanism.value, "smoothing": sm.to_dict(), "training": hp}
    save_model(model, args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    with _open_out(log_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for i, loss in enumerate(result.losses):
            w.writerow((i, repr(float(loss))))
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = load_run_config(args.config)
    table, syn, sm = _resources(cfg, args)
    model = _load_checked_model(args.model, cfg, table)
    data = _load_dataset(args.data, table, cfg.n)
    if args.limit is not None:
        data = data[: args.limit]
    n0 = args.n0 if args.n0 is not None else cfg.n0
    N = args.n if args.n is not None else cfg.nsamples
    alpha = args.alpha if args.alpha is not None else cfg.alpha
    seed = args.seed if args.seed is not None else cfg.seed
    workers = args.workers if args.workers is not None else cfg.workers
    if n0 < 1 or N < 1 or not 0 < alpha < 1 or workers < 1:
        raise UsageError("need --n0 >= 1, --n >= 1, 0 < --alpha < 1, --workers >= 1")

    def progress(done, total):
        if done % 50 == 0 or done == total:
            log.info("certified %d/%d", done, total)

    results = certify_dataset(model, data, sm, run_seed=seed, table=table, synonyms=syn,
                              n0=n0, N=N, alpha=alpha, workers=workers, progress=progress)
    with _open_out(args.out) as fh:
        write_results_csv(fh, results, [x.label for x in data])
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_run_config(args.config)
    table, syn, sm = _resources(cfg, args)
    if sm.mechanism is Mechanism.INSERTION:
        syn = _load_synonyms(None, table, min(INSERTION_ATTACK_S, len(table) - 2))
    model = _load_checked_model(args.model, cfg, table)
    data = _load_dataset(args.data, table, cfg.n)
    try:
        with open(args.results, encoding="utf-8", newline="") as fh:
            ids, _, results = results_from_rows(read_results_csv(fh))
    except OSError as exc:
        raise UsageError(f"cannot read results {args.results}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"{args.results}: {exc}") from None
    for r in results:
        if r.mechanism != sm.mechanism.value:
            raise UsageError(f"results were certified under {r.mechanism}, config says {sm.mechanism.value}")
    try:
        instances = [data[int(i)] for i in ids]
    except (ValueError, IndexError):
        raise UsageError("results refer to instance ids missing from --data") from None
    seed = args.seed if args.seed is not None else cfg.seed
    if args.suite == "unrestricted":
        results = [r.__class__(**{**r.__dict__, "outcome": "abstain"}) for r in results]
    report = soundness_harness(
        model, instances, results, sm, ids=ids, table=table, synonyms=syn,
        trials=args.trials, screen=args.screen, confirm=args.confirm, alpha=cfg.alpha,
        seed=seed, unrestricted=args.suite != "within",
    )
    with _open_out(args.out) as fh:
        write_attack_csv(fh, report.rows)
    summary = {
        "certified": report.certified,
        "violations": [v.to_dict() for v in report.violations],
        "unrestricted_attempts": report.unrestricted_attempts,
        "unrestricted_successes": report.unrestricted_successes,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    if report.violations:
        with _open_out(Path(args.out).with_suffix(".violations.json")) as fh:
            json.dump(summary["violations"], fh, indent=1, sort_keys=True)
            fh.write("\n")
        return EXIT_VIOLATION
    return EXIT_OK


def parse_grid(text: str | None, results, gold) -> list[float]:
    """``a:b:step``, ``a,b,c`` or ``K`` (K points from 0 to the largest radius)."""
    top = max([r.radius for r, g in zip(results, gold) if r.certified and r.label == g] or [0.0])
    if not text:
        text = "50"
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            count = int(math.floor((hi - lo) / step + 1e-9)) + 1
            grid = [lo + i * step for i in range(count)]
        elif "," in text:
            grid = sorted(float(x) for x in text.split(","))
        else:
            k = int(text)
            if k < 1:
                raise ValueError
            grid = [0.0] if k == 1 or top == 0 else list(np.linspace(0.0, top, k))
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; use a:b:step, a,b,c or a point count") from None
    if any(not math.isfinite(g) for g in grid):
        raise UsageError("grid radii must be finite")
    return [float(g) for g in grid]


def cmd_report(args) -> int:
    try:
        with open(args.results, encoding="utf-8", newline="") as fh:
            _, gold, results = results_from_rows(read_results_csv(fh))
    except OSError as exc:
        raise UsageError(f"cannot read results {args.results}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"{args.results}: {exc}") from None
    curve = []
    if results:
        curve = certified_accuracy_curve(results, gold, parse_grid(args.grid, results, gold))
    with _open_out(args.out) as fh:
        write_curve_csv(fh, curve)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wordcert", description="Certified robustness for word-level text perturbations.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus and its embeddings")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=2000, help="training texts")
    g.add_argument("--test-size", type=int, default=500)
    g.add_argument("--vocab", type=int, default=200)
    g.add_argument("--length", type=int, default=16)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--contamination", type=float, default=0.3,
                   help="chance a text also holds one keyword of the other class")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_corpus)

    b = sub.add_parser("build-synonyms", help="write the synonym table for a given s")
    b.add_argument("--embeddings", required=True)
    b.add_argument("--s", type=int, required=True, help="synonyms per word (50/100/250 = Low/Med/High)")
    b.add_argument("--dim", type=int, help="embedding dimension (read from the file if omitted)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_synonyms)

    t = sub.add_parser("train", help="train a base classifier under smoothing noise")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--embeddings")
    t.add_argument("--synonyms")
    t.add_argument("--epochs", type=int)
    t.add_argument("--log", help="training log CSV (default: next to the model)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="certify every instance of a dataset")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--embeddings")
    c.add_argument("--synonyms")
    c.add_argument("--n0", type=int, help="selection draws (default 100)")
    c.add_argument("--n", type=int, help="estimation draws (default 100000)")
    c.add_argument("--alpha", type=float, help="failure probability (default 0.001)")
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--limit", type=int, help="only the first K instances")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_certify)

    a = sub.add_parser("attack", help="attack certified instances inside their radius")
    a.add_argument("--model", required=True)
    a.add_argument("--results", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--embeddings")
    a.add_argument("--synonyms")
    a.add_argument("--suite", choices=("full", "within", "unrestricted"), default="full")
    a.add_argument("--trials", type=int, default=10_000)
    a.add_argument("--screen", type=int, default=200, help="smoothed draws per candidate")
    a.add_argument("--confirm", type=int, default=20_000, help="draws to confirm a suspected flip")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="certified accuracy against radius as CSV")
    r.add_argument("--results", required=True)
    r.add_argument("--grid", help="a:b:step, a,b,c or a number of points (default 50)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wordcert {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
