"""Trainable feature extractor with a prototypical classification head.

A small fully-connected network (ReLU between layers, linear output) is
trained by explicit backpropagation and plain SGD, optionally with a
cosine-annealed learning rate. Classification happens against per-class
prototype vectors (class means in feature space), which are held constant
within each training step and refreshed between epochs by the caller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill
from .numkernel import softmax

CHECKPOINT_FORMAT = "dkd-lab-checkpoint/1"


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    frozen: bool = False

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


class Extractor:
    """Multilayer perceptron mapping input vectors to d-dimensional features."""

    def __init__(self, layers: list[LinearLayer]):
        if not layers:
            raise ValueError("extractor needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.fan_in != a.fan_out:
                raise ValueError(f"layer shapes do not chain: {a.fan_out} -> {b.fan_in}")
        self.layers = layers

    @classmethod
    def create(cls, dims: list[int], rng: np.random.Generator) -> "Extractor":
        """Build layers for the dimension chain, U[-1/sqrt(fan_in), 1/sqrt(fan_in)] init."""
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        layers = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(
                LinearLayer(
                    weight=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                    bias=rng.uniform(-bound, bound, size=fan_out),
                )
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def trunk_dim(self) -> int:
        """Output width of everything before the final layer (input width if single-layer)."""
        return self.layers[-1].fan_in

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of dimension {self.input_dim}, got shape {X.shape}")
        h = X
        for layer in self.layers[:-1]:
            h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
        last = self.layers[-1]
        return h @ last.weight.T + last.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("forward expects a single input vector")
        return self.forward_batch(x[None, :])[0]

    def trunk_forward_batch(self, X: np.ndarray) -> np.ndarray:
        """Activations entering the final layer; identity for a single-layer net."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of dimension {self.input_dim}, got shape {X.shape}")
        h = X
        for layer in self.layers[:-1]:
            h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
        return h

    def _forward_cached(self, X: np.ndarray):
        """Forward pass keeping per-layer inputs and pre-activations for backprop."""
        inputs, preacts = [], []
        h = X
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            p = h @ layer.weight.T + layer.bias
            preacts.append(p)
            h = p if i == len(self.layers) - 1 else np.maximum(p, 0.0)
        return h, inputs, preacts

    def _backprop(self, dF: np.ndarray, inputs, preacts):
        """Gradients (dW, db) per layer from the feature-space gradient dF."""
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        dh = dF
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                dh = dh * (preacts[i] > 0.0)
            grads[i] = (dh.T @ inputs[i], dh.sum(axis=0))
            if i > 0:
                dh = dh @ self.layers[i].weight
        return grads

    def sgd_step(self, grads, lr: float, clip_norm: float | None = None) -> None:
        """Apply one SGD update; frozen layers are left untouched bit-for-bit.

        With `clip_norm`, the joint gradient of the trainable layers is
        rescaled to that global L2 norm when it exceeds it.
        """
        scale = 1.0
        if clip_norm is not None:
            total = 0.0
            for layer, (dW, db) in zip(self.layers, grads):
                if layer.frozen:
                    continue
                total += float(np.sum(dW * dW) + np.sum(db * db))
            norm = np.sqrt(total)
            if norm > clip_norm:
                scale = clip_norm / norm
        for layer, (dW, db) in zip(self.layers, grads):
            if layer.frozen:
                continue
            layer.weight -= lr * scale * dW
            layer.bias -= lr * scale * db

    def freeze_all_but_last(self) -> None:
        for layer in self.layers[:-1]:
            layer.frozen = True
        self.layers[-1].frozen = False

    def has_trainable_layers(self) -> bool:
        return any(not layer.frozen for layer in self.layers)

    def copy(self) -> "Extractor":
        return Extractor(
            [LinearLayer(l.weight.copy(), l.bias.copy(), l.frozen) for l in self.layers]
        )


@dataclass(frozen=True)
class PrototypeBank:
    """Per-class prototype vectors, ordered by ascending class id."""

    class_ids: tuple[int, ...]
    vectors: np.ndarray  # (n_classes, d)

    def __post_init__(self):
        if len(self.class_ids) != self.vectors.shape[0]:
            raise ValueError("one prototype per class required")
        if list(self.class_ids) != sorted(set(self.class_ids)):
            raise ValueError("class ids must be unique and ascending")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} has no prototype") from None

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Raw prototype inner products for a batch of features."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.dim:
            raise ValueError(f"feature dimension {features.shape[-1]} != prototype dimension {self.dim}")
        return features @ self.vectors.T


def compute_prototypes(
    features: np.ndarray, labels: np.ndarray, class_ids=None
) -> PrototypeBank:
    """Per-class mean feature vectors.

    When `class_ids` is given, each listed class must have at least one
    sample; otherwise the classes present in `labels` are used.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, d) with one label per row")
    if class_ids is None:
        class_ids = sorted(int(c) for c in np.unique(labels))
    else:
        class_ids = sorted(int(c) for c in class_ids)
    vectors = np.empty((len(class_ids), features.shape[1]))
    for k, c in enumerate(class_ids):
        mask = labels == c
        if not np.any(mask):
            raise ValueError(f"class {c} has no samples to average")
        vectors[k] = features[mask].mean(axis=0)
    return PrototypeBank(class_ids=tuple(class_ids), vectors=vectors)


def logits(feature: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Softmax-normalised prototype scores for one feature vector."""
    if len(bank.class_ids) == 0:
        raise ValueError("prototype bank is empty")
    return softmax(bank.scores(np.asarray(feature, dtype=np.float64)))


def cross_entropy(z: np.ndarray, y: int) -> float:
    """Negative log-probability of the target entry of a probability vector."""
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= y < z.shape[-1]:
        raise ValueError(f"target index {y} out of range for {z.shape[-1]} classes")
    with np.errstate(divide="ignore"):
        return float(-np.log(z[y]))


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine-annealed learning rate: base at step 0, zero at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 64
    cosine_schedule: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (pair losses need pairs)")


@dataclass
class TeacherSignals:
    """Frozen teacher outputs for one batch, aligned to the student class order.

    `base_mask` marks batch members replayed from the data-rich first session
    (distilled per sample against `base_scores`); `preorder_mask` marks
    members replayed from earlier few-shot sessions (distilled structurally
    against `preorder_scores`). `*_cols` give the student-score columns the
    teacher classes map to.
    """

    base_mask: np.ndarray
    base_scores: np.ndarray | None = None
    base_cols: np.ndarray | None = None
    preorder_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    preorder_scores: np.ndarray | None = None
    preorder_cols: np.ndarray | None = None
    # rows eligible as structural pair partners; defaults to the anchors
    preorder_partners: np.ndarray | None = None


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    ikd: float
    preorder: float
    preorder_kind: str
    total: float


def loss_and_grads(
    extractor: Extractor,
    bank: PrototypeBank,
    X: np.ndarray,
    y_idx: np.ndarray,
    teachers: TeacherSignals | None = None,
    w1: float = 0.0,
    w2: float = 0.0,
    preorder: str = "dkd",
) -> tuple[LossBreakdown, list]:
    """Composite training loss and parameter gradients for one batch.

    The loss is cross-entropy plus w1 times the per-sample distillation term
    over base-session replay members plus w2 times the structural term
    (`preorder` one of dkd/rkd/ikd) over earlier-session replay members.
    Prototypes and teacher scores are constants here; gradients flow only
    through the extractor.
    """
    X = np.asarray(X, dtype=np.float64)
    y_idx = np.asarray(y_idx, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")

    F, inputs, preacts = extractor._forward_cached(X)
    scores = F @ bank.vectors.T
    probs = softmax(scores, axis=-1)

    with np.errstate(divide="ignore"):
        l_cls = float(np.mean(-np.log(probs[np.arange(n), y_idx])))
    dscores = probs.copy()
    dscores[np.arange(n), y_idx] -= 1.0
    dscores /= n

    l_ikd = 0.0
    if teachers is not None and w1 != 0.0 and np.any(teachers.base_mask):
        rows = np.flatnonzero(teachers.base_mask)
        sub = scores[np.ix_(rows, teachers.base_cols)]
        l_ikd = distill.ikd_loss(sub, teachers.base_scores[rows])
        g = distill.ikd_grad(sub, teachers.base_scores[rows])
        dscores[np.ix_(rows, teachers.base_cols)] += w1 * g

    l_pre = 0.0
    kind = preorder
    if teachers is not None and w2 != 0.0:
        anchors = np.asarray(teachers.preorder_mask, dtype=bool)
        if preorder == "ikd":
            # per-sample anchoring touches only the replayed rows themselves
            rows = np.flatnonzero(anchors)
            if len(rows) >= 1:
                sub = scores[np.ix_(rows, teachers.preorder_cols)]
                tsub = teachers.preorder_scores[rows]
                l_pre = distill.ikd_loss(sub, tsub)
                dscores[np.ix_(rows, teachers.preorder_cols)] += w2 * distill.ikd_grad(sub, tsub)
        elif preorder in ("dkd", "rkd"):
            # structural terms anchor on replayed pre-order rows but pair
            # them against every eligible partner row, so partners shape
            # (and receive gradient from) the preserved structure
            partners = teachers.preorder_partners
            partners = anchors if partners is None else np.asarray(partners, dtype=bool)
            rows = np.flatnonzero(partners)
            anchor_sub = anchors[rows]
            if np.any(anchor_sub) and len(rows) >= 2:
                sub = scores[np.ix_(rows, teachers.preorder_cols)]
                tsub = teachers.preorder_scores[rows]
                if preorder == "dkd":
                    l_pre = distill.dkd_loss_anchored(sub, tsub, anchor_sub)
                    g = distill.dkd_grad_anchored(sub, tsub, anchor_sub)
                else:
                    l_pre = distill.rkd_loss_anchored(sub, tsub, anchor_sub)
                    g = distill.rkd_grad_anchored(sub, tsub, anchor_sub)
                dscores[np.ix_(rows, teachers.preorder_cols)] += w2 * g
        else:
            raise ValueError(f"unknown pre-order distillation {preorder!r}")

    dF = dscores @ bank.vectors
    grads = extractor._backprop(dF, inputs, preacts)
    total = l_cls + w1 * l_ikd + w2 * l_pre
    return LossBreakdown(cls=l_cls, ikd=l_ikd, preorder=l_pre, preorder_kind=kind, total=total), grads


def train_step(
    extractor: Extractor,
    bank: PrototypeBank,
    X: np.ndarray,
    y_idx: np.ndarray,
    teachers: TeacherSignals | None,
    w1: float,
    w2: float,
    lr: float,
    preorder: str = "dkd",
    clip_norm: float | None = None,
) -> LossBreakdown:
    """One SGD update of the trainable extractor layers; returns the loss split."""
    if not extractor.has_trainable_layers():
        raise RuntimeError("extractor has no trainable layers")
    breakdown, grads = loss_and_grads(extractor, bank, X, y_idx, teachers, w1, w2, preorder)
    extractor.sgd_step(grads, lr, clip_norm=clip_norm)
    return breakdown


def _layer_to_json(layer: LinearLayer) -> dict:
    return {
        "weight": layer.weight.tolist(),
        "bias": layer.bias.tolist(),
        "frozen": layer.frozen,
    }


def _layer_from_json(doc: dict) -> LinearLayer:
    return LinearLayer(
        weight=np.asarray(doc["weight"], dtype=np.float64),
        bias=np.asarray(doc["bias"], dtype=np.float64),
        frozen=bool(doc["frozen"]),
    )


def _bank_to_json(bank: PrototypeBank | None):
    if bank is None:
        return None
    return {"class_ids": list(bank.class_ids), "vectors": bank.vectors.tolist()}


def _bank_from_json(doc):
    if doc is None:
        return None
    return PrototypeBank(
        class_ids=tuple(int(c) for c in doc["class_ids"]),
        vectors=np.asarray(doc["vectors"], dtype=np.float64),
    )


def save_checkpoint(
    path,
    extractor: Extractor,
    bank: PrototypeBank | None = None,
    selector=None,
    rng_state: dict | None = None,
) -> None:
    """Write a versioned JSON checkpoint (layers, prototypes, selector, RNG state)."""
    from .selector import selector_to_json  # local import to avoid a cycle

    doc = {
        "format": CHECKPOINT_FORMAT,
        "layers": [_layer_to_json(l) for l in extractor.layers],
        "prototypes": _bank_to_json(bank),
        "selector": selector_to_json(selector) if selector is not None else None,
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint.

    Returns (extractor, bank, selector, rng_state); missing parts are None.
    """
    from .selector import selector_from_json

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    extractor = Extractor([_layer_from_json(l) for l in doc["layers"]])
    bank = _bank_from_json(doc.get("prototypes"))
    selector = selector_from_json(doc["selector"]) if doc.get("selector") else None
    return extractor, bank, selector, doc.get("rng_state")
