"""Instance-aware base/novel sample selector.

A linear head on top of the extractor's shared trunk embeds each sample,
scores it against two momentum-updated cluster prototypes (novel first,
base second), and emits a two-way softmax. Training combines a margin
triplet loss that pulls the two clusters apart with a binary cross-entropy
term; only the head weights are updated, the trunk stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import softmax


@dataclass
class SelectorState:
    head_weight: np.ndarray  # (d, trunk_dim)
    head_bias: np.ndarray  # (d,)
    momentum: float  # weight of the fresh batch mean in prototype updates
    margin: float  # triplet margin
    novel_prototype: np.ndarray | None = None
    base_prototype: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.margin <= 0.0:
            raise ValueError("margin must be positive")

    @property
    def initialized(self) -> bool:
        return self.novel_prototype is not None and self.base_prototype is not None

    def copy(self) -> "SelectorState":
        return SelectorState(
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
            momentum=self.momentum,
            margin=self.margin,
            novel_prototype=None if self.novel_prototype is None else self.novel_prototype.copy(),
            base_prototype=None if self.base_prototype is None else self.base_prototype.copy(),
        )


def create_selector(
    trunk_dim: int,
    feature_dim: int,
    rng: np.random.Generator,
    momentum: float = 0.9,
    margin: float = 1.0,
) -> SelectorState:
    bound = 1.0 / np.sqrt(trunk_dim)
    return SelectorState(
        head_weight=rng.uniform(-bound, bound, size=(feature_dim, trunk_dim)),
        head_bias=rng.uniform(-bound, bound, size=feature_dim),
        momentum=momentum,
        margin=margin,
    )


def selector_head(state: SelectorState, trunk_x: np.ndarray) -> np.ndarray:
    """Head embedding of trunk activations (single vector or batch)."""
    trunk_x = np.asarray(trunk_x, dtype=np.float64)
    return trunk_x @ state.head_weight.T + state.head_bias


def selector_logits(state: SelectorState, trunk_x: np.ndarray) -> np.ndarray:
    """Two-way routing probabilities: index 0 = novel cluster, 1 = base cluster."""
    if not state.initialized:
        raise RuntimeError("selector prototypes are not initialized")
    w = selector_head(state, trunk_x)
    scores = np.stack(
        [w @ state.novel_prototype, w @ state.base_prototype], axis=-1
    )
    return softmax(scores, axis=-1)


def momentum_update(prev: np.ndarray, batch_mean: np.ndarray, alpha: float) -> np.ndarray:
    """Convex blend alpha * batch_mean + (1 - alpha) * prev."""
    prev = np.asarray(prev, dtype=np.float64)
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    if prev.shape != batch_mean.shape:
        raise ValueError(f"dimension mismatch: {prev.shape} vs {batch_mean.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * batch_mean + (1.0 - alpha) * prev


def triplet_loss(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> float:
    """Sum of hinged margins over every (positive, negative) pair.

    Each term is max(0, ||a - p|| - ||a - n|| + margin); zero once every
    negative sits at least `margin` farther from the anchor than every
    positive.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ValueError("triplet loss needs nonempty positive and negative sets")
    dp = np.linalg.norm(anchor - positives, axis=1)
    dn = np.linalg.norm(anchor - negatives, axis=1)
    hinge = np.maximum(dp[:, None] - dn[None, :] + margin, 0.0)
    return float(hinge.sum())


def triplet_grad_anchor(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    margin: float,
) -> np.ndarray:
    """Gradient of triplet_loss w.r.t. the anchor (zero subgradient at kinks)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ValueError("triplet loss needs nonempty positive and negative sets")
    dp_vec = anchor - positives
    dn_vec = anchor - negatives
    dp = np.linalg.norm(dp_vec, axis=1)
    dn = np.linalg.norm(dn_vec, axis=1)
    up = np.divide(dp_vec, dp[:, None], out=np.zeros_like(dp_vec), where=dp[:, None] > 0)
    un = np.divide(dn_vec, dn[:, None], out=np.zeros_like(dn_vec), where=dn[:, None] > 0)
    active = (dp[:, None] - dn[None, :] + margin) > 0.0
    grad = np.zeros_like(anchor)
    for j in range(positives.shape[0]):
        for k in range(negatives.shape[0]):
            if active[j, k]:
                grad += up[j] - un[k]
    return grad


def binary_ce(z_g: np.ndarray, y_is_base: bool) -> float:
    """Cross-entropy of the two-way routing output against the true cluster."""
    z_g = np.asarray(z_g, dtype=np.float64)
    target = 1 if y_is_base else 0
    with np.errstate(divide="ignore"):
        return float(-np.log(z_g[target]))


@dataclass(frozen=True)
class SelectorLossBreakdown:
    triplet: float
    bce: float
    total: float
    triplet_skipped: bool


def selector_train_step(
    state: SelectorState,
    trunk_x: np.ndarray,
    is_base: np.ndarray,
    beta1: float,
    beta2: float,
    lr: float,
    clip_norm: float | None = None,
) -> SelectorLossBreakdown:
    """One SGD update of the selector head, then a momentum prototype refresh.

    The triplet term treats each sample as an anchor with its own cluster as
    positives (itself excluded) and the other cluster as negatives; it is
    skipped (and flagged) when the batch contains a single cluster. Cluster
    prototypes are refreshed from the updated head afterwards; on the first
    refresh the batch mean is taken as-is since no history exists.
    """
    trunk_x = np.asarray(trunk_x, dtype=np.float64)
    is_base = np.asarray(is_base, dtype=bool)
    n = trunk_x.shape[0]
    if n == 0:
        raise ValueError("selector batch must be nonempty")

    w = selector_head(state, trunk_x)
    base_rows = np.flatnonzero(is_base)
    novel_rows = np.flatnonzero(~is_base)
    triplet_skipped = len(base_rows) == 0 or len(novel_rows) == 0

    dw = np.zeros_like(w)

    l_trip = 0.0
    if not triplet_skipped and beta1 != 0.0:
        diff = w[:, None, :] - w[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        safe = np.where(dist == 0.0, 1.0, dist)
        unit = diff / safe[:, :, None]
        unit[dist == 0.0] = 0.0
        for i in range(n):
            pos = base_rows if is_base[i] else novel_rows
            neg = novel_rows if is_base[i] else base_rows
            pos = pos[pos != i]
            if len(pos) == 0:
                continue
            arg = dist[i, pos][:, None] - dist[i, neg][None, :] + state.margin
            active = arg > 0.0
            l_trip += float(np.sum(np.maximum(arg, 0.0)))
            pos_hits = active.sum(axis=1)  # how many negatives keep each positive active
            neg_hits = active.sum(axis=0)
            for a, j in enumerate(pos):
                if pos_hits[a]:
                    dw[i] += pos_hits[a] * unit[i, j]
                    dw[j] -= pos_hits[a] * unit[i, j]
            for b, k in enumerate(neg):
                if neg_hits[b]:
                    dw[i] -= neg_hits[b] * unit[i, k]
                    dw[k] += neg_hits[b] * unit[i, k]
        l_trip /= n
        dw *= beta1 / n

    l_bce = 0.0
    if beta2 != 0.0 and state.initialized:
        M = np.stack([state.novel_prototype, state.base_prototype])  # (2, d)
        scores = w @ M.T
        probs = softmax(scores, axis=-1)
        targets = is_base.astype(np.int64)  # 0 = novel, 1 = base
        with np.errstate(divide="ignore"):
            l_bce = float(np.mean(-np.log(probs[np.arange(n), targets])))
        dprobs = probs.copy()
        dprobs[np.arange(n), targets] -= 1.0
        dw += (beta2 / n) * (dprobs @ M)

    dW = dw.T @ trunk_x
    db = dw.sum(axis=0)
    scale = 1.0
    if clip_norm is not None:
        norm = float(np.sqrt(np.sum(dW * dW) + np.sum(db * db)))
        if norm > clip_norm:
            scale = clip_norm / norm
    state.head_weight -= lr * scale * dW
    state.head_bias -= lr * scale * db

    # refresh cluster prototypes from the updated head
    w_new = selector_head(state, trunk_x)
    if len(novel_rows) > 0:
        mean = w_new[novel_rows].mean(axis=0)
        alpha = 1.0 if state.novel_prototype is None else state.momentum
        prev = mean if state.novel_prototype is None else state.novel_prototype
        state.novel_prototype = momentum_update(prev, mean, alpha)
    if len(base_rows) > 0:
        mean = w_new[base_rows].mean(axis=0)
        alpha = 1.0 if state.base_prototype is None else state.momentum
        prev = mean if state.base_prototype is None else state.base_prototype
        state.base_prototype = momentum_update(prev, mean, alpha)

    total = beta1 * l_trip + beta2 * l_bce
    return SelectorLossBreakdown(triplet=l_trip, bce=l_bce, total=total, triplet_skipped=triplet_skipped)


def fuse(z_g: np.ndarray, z_f_current: np.ndarray, z_f_base: np.ndarray) -> np.ndarray:
    """Selector-weighted blend of the two branch outputs.

    Both branch vectors must already be aligned to one global class order
    (the base branch padded with zeros for classes it has never seen).
    """
    z_g = np.asarray(z_g, dtype=np.float64)
    z_f_current = np.asarray(z_f_current, dtype=np.float64)
    z_f_base = np.asarray(z_f_base, dtype=np.float64)
    if z_f_current.shape != z_f_base.shape:
        raise ValueError(
            f"branch outputs are not class-aligned: {z_f_current.shape} vs {z_f_base.shape}"
        )
    return z_g[..., 0, None] * z_f_current + z_g[..., 1, None] * z_f_base


def selector_to_json(state: SelectorState) -> dict:
    return {
        "head_weight": state.head_weight.tolist(),
        "head_bias": state.head_bias.tolist(),
        "momentum": state.momentum,
        "margin": state.margin,
        "novel_prototype": None if state.novel_prototype is None else state.novel_prototype.tolist(),
        "base_prototype": None if state.base_prototype is None else state.base_prototype.tolist(),
    }


def selector_from_json(doc: dict) -> SelectorState:
    return SelectorState(
        head_weight=np.asarray(doc["head_weight"], dtype=np.float64),
        head_bias=np.asarray(doc["head_bias"], dtype=np.float64),
        momentum=float(doc["momentum"]),
        margin=float(doc["margin"]),
        novel_prototype=None
        if doc["novel_prototype"] is None
        else np.asarray(doc["novel_prototype"], dtype=np.float64),
        base_prototype=None
        if doc["base_prototype"] is None
        else np.asarray(doc["base_prototype"], dtype=np.float64),
    )
