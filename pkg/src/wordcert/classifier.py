"""Position-gated pooled MLP and smoothed training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable, EncodedInstance, SynonymTable
from .noise import NoiseModel, SmoothingConfig, rng_for

log = logging.getLogger(__name__)

MODEL_FORMAT = "wordcert-model"
MODEL_VERSION = 1
_PARAMS = ("gains", "W1", "b1", "W2", "b2")


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PositionGatedClassifier:
    """softmax(W2^T relu(W1^T (sum_i g[pos_i] row_i / n) + b1) + b2).

    The gain of a slot multiplies whatever row is rendered there, so the
    model is order sensitive as soon as the gains differ.
    """

    def __init__(self, n: int, d: int, num_classes: int, hidden: int = 32, seed: int = 0):
        if min(n, d, hidden) < 1 or num_classes < 2:
            raise ValueError("need n, d, hidden >= 1 and at least two classes")
        rng = rng_for(seed, 0x6D6F64)
        self.n, self.d, self.C, self.H = n, d, num_classes, hidden
        self.gains = 1.0 + 0.5 * rng.standard_normal(n)
        self.W1 = rng.standard_normal((d, hidden)) * math.sqrt(2.0 / d)
        self.b1 = np.full(hidden, 0.01)
        self.W2 = rng.standard_normal((hidden, num_classes)) * math.sqrt(1.0 / hidden)
        self.b2 = np.zeros(num_classes)
        self.meta: dict = {}

    # -- forward ---------------------------------------------------------

    def _check(self, rows, positions):
        if rows.ndim != 3 or rows.shape[1:] != (self.n, self.d) or positions.shape != rows.shape[:2]:
            raise ValueError(
                f"model expects (B, {self.n}, {self.d}) rows, got {rows.shape} with positions {positions.shape}"
            )

    def _pool(self, rows, positions):
        return np.einsum("bi,bid->bd", self.gains[positions], rows) / self.n

    def scores_batch(self, rows, positions) -> np.ndarray:
        """Class probabilities for rows (B, n, d) rendered at positions (B, n)."""
        rows = np.asarray(rows, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.int64)
        self._check(rows, positions)
        hid = np.maximum(self._pool(rows, positions) @ self.W1 + self.b1, 0.0)
        return _softmax(hid @ self.W2 + self.b2)

    def predict_batch(self, rows, positions) -> np.ndarray:
        return np.argmax(self.scores_batch(rows, positions), axis=1)

    def predict(self, rendered) -> np.ndarray:
        """Scores for an already rendered n x d matrix."""
        rendered = np.asarray(rendered, dtype=np.float64)
        return self.scores_batch(rendered[None], np.arange(self.n)[None])[0]

    def forward(self, inst: EncodedInstance) -> np.ndarray:
        return self.scores_batch(inst.rows[None], inst.positions[None])[0]

    # -- training --------------------------------------------------------

    def loss_and_grads(self, rows, positions, labels):
        """Mean cross-entropy and its gradient for every parameter."""
        rows = np.asarray(rows, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        self._check(rows, positions)
        B = rows.shape[0]
        pooled = self._pool(rows, positions)
        pre = pooled @ self.W1 + self.b1
        hid = np.maximum(pre, 0.0)
        probs = _softmax(hid @ self.W2 + self.b2)
        loss = -float(np.mean(np.log(np.maximum(probs[np.arange(B), labels], 1e-300))))

        dz = probs.copy()
        dz[np.arange(B), labels] -= 1.0
        dz /= B
        dpre = (dz @ self.W2.T) * (pre > 0)
        dpooled = dpre @ self.W1.T
        per_slot = np.einsum("bd,bid->bi", dpooled, rows) / self.n
        grads = {
            "gains": np.bincount(positions.ravel(), weights=per_slot.ravel(), minlength=self.n),
            "W1": pooled.T @ dpre,
            "b1": dpre.sum(axis=0),
            "W2": hid.T @ dz,
            "b2": dz.sum(axis=0),
        }
        return loss, grads

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _PARAMS}

    def copy(self) -> "PositionGatedClassifier":
        out = PositionGatedClassifier.__new__(PositionGatedClassifier)
        out.n, out.d, out.C, out.H = self.n, self.d, self.C, self.H
        for k in _PARAMS:
            setattr(out, k, getattr(self, k).copy())
        out.meta = json.loads(json.dumps(self.meta))
        return out

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "dims": {"n": self.n, "d": self.d, "classes": self.C, "hidden": self.H},
            # float.hex keeps the round trip bit exact
            "params": {k: [float(x).hex() for x in getattr(self, k).ravel()] for k in _PARAMS},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PositionGatedClassifier":
        if raw.get("format") != MODEL_FORMAT:
            raise ModelFormatError("not a model file")
        if raw.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {raw.get('version')!r}")
        try:
            dims = raw["dims"]
            n, d, C, H = int(dims["n"]), int(dims["d"]), int(dims["classes"]), int(dims["hidden"])
            shapes = {"gains": (n,), "W1": (d, H), "b1": (H,), "W2": (H, C), "b2": (C,)}
            out = cls.__new__(cls)
            out.n, out.d, out.C, out.H = n, d, C, H
            out.meta = dict(raw.get("meta") or {})
            for k, shape in shapes.items():
                flat = np.array([float.fromhex(x) for x in raw["params"][k]], dtype=np.float64)
                if flat.size != math.prod(shape):
                    raise ModelFormatError(f"{k}: expected {math.prod(shape)} values, got {flat.size}")
                setattr(out, k, flat.reshape(shape))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"malformed model file: {exc}") from None
        return out


def forward(model: PositionGatedClassifier, inst: EncodedInstance) -> np.ndarray:
    return model.forward(inst)


def save_model(model: PositionGatedClassifier, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")


def load_model(path, *, n: int | None = None, d: int | None = None) -> PositionGatedClassifier:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from None
    model = PositionGatedClassifier.from_dict(raw)
    if (n is not None and model.n != n) or (d is not None and model.d != d):
        raise ModelFormatError(f"model has n={model.n}, d={model.d}; expected n={n}, d={d}")
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingResult:
    model: PositionGatedClassifier
    losses: list[float] = field(default_factory=list)


def stack_instances(dataset: Sequence[EncodedInstance]):
    ids = np.stack([x.token_ids for x in dataset])
    rows = np.stack([x.rows for x in dataset])
    pos = np.stack([x.positions for x in dataset])
    labels = np.array([x.label for x in dataset], dtype=np.int64)
    return ids, rows, pos, labels


def train_smoothed(
    dataset: Sequence[EncodedInstance],
    config: SmoothingConfig,
    *,
    num_classes: int | None = None,
    table: EmbeddingTable | None = None,
    synonyms: SynonymTable | None = None,
    epochs: int = 50,
    lr: float = 0.05,
    batch: int = 32,
    hidden: int = 32,
    momentum: float = 0.9,
    seed: int = 0,
    model: PositionGatedClassifier | None = None,
) -> TrainingResult:
    """Mini-batch SGD on cross-entropy under fresh smoothing noise each epoch."""
    if not dataset:
        raise ValueError("dataset is empty")
    if epochs < 0 or batch < 1 or lr < 0:
        raise ValueError("need epochs >= 0, batch >= 1, lr >= 0")
    ids, rows, pos, labels = stack_instances(dataset)
    n, d = rows.shape[1:]
    config.validate(n)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1)
    if model is None:
        model = PositionGatedClassifier(n, d, num_classes, hidden=hidden, seed=seed)
    noise = NoiseModel(config, table, synonyms)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    losses = []
    for epoch in range(epochs):
        rng = rng_for(seed, 1, epoch)
        n_ids, n_rows, n_pos = noise.apply(ids, rows, pos, rng)
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = model.loss_and_grads(n_rows[idx], n_pos[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"lr={lr} may be too large for this data"
                )
            total += loss * len(idx)
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] - lr * g
                getattr(model, k)[...] += velocity[k]
        losses.append(total / len(order))
        log.debug("epoch %d loss %.4f", epoch, losses[-1])
    return TrainingResult(model, losses)


def accuracy(model: PositionGatedClassifier, dataset: Sequence[EncodedInstance]) -> float:
    _, rows, pos, labels = stack_instances(dataset)
    return float(np.mean(model.predict_batch(rows, pos) == labels))
