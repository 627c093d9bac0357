"""Batch-level distillation losses and their analytic gradients.

Three families operate on a pair of N x C logit batches (student, teacher):

* individual: per-sample divergence between matching rows,
* relational: divergence between per-sample similarity distributions
  (inner-product, negated-Euclidean-distance, or cosine scores),
* displacement: divergence between the N(N-1) directed row differences.

All losses are nonnegative, zero when student equals teacher, and every
gradient here matches central finite differences of its loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import log_softmax, softmax

RKD_VARIANTS = ("inner", "euclid", "cosine")


def _as_batch(Z: np.ndarray, name: str) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise ValueError(f"{name} must be a nonempty N x C matrix, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError(f"{name} contains non-finite entries")
    return Z


def _check_pair(Z_s: np.ndarray, Z_t: np.ndarray, min_n: int = 1):
    Z_s = _as_batch(Z_s, "student batch")
    Z_t = _as_batch(Z_t, "teacher batch")
    if Z_s.shape != Z_t.shape:
        raise ValueError(f"batch shape mismatch: {Z_s.shape} vs {Z_t.shape}")
    if Z_s.shape[0] < min_n:
        raise ValueError(f"batch needs at least {min_n} rows, got {Z_s.shape[0]}")
    return Z_s, Z_t


def _rowwise_kd(S_s: np.ndarray, S_t: np.ndarray) -> np.ndarray:
    """Per-row KL(softmax(S_t) || softmax(S_s)), clamped at 0."""
    log_s = log_softmax(S_s, axis=-1)
    log_t = log_softmax(S_t, axis=-1)
    terms = np.sum(np.exp(log_t) * (log_t - log_s), axis=-1)
    return np.maximum(terms, 0.0)


def ikd_loss(Z_s: np.ndarray, Z_t: np.ndarray) -> float:
    """Mean per-sample divergence between matching student/teacher rows."""
    Z_s, Z_t = _check_pair(Z_s, Z_t)
    return float(np.mean(_rowwise_kd(Z_s, Z_t)))


def ikd_grad(Z_s: np.ndarray, Z_t: np.ndarray) -> np.ndarray:
    """Gradient of ikd_loss w.r.t. the student batch: (softmax_s - softmax_t)/N."""
    Z_s, Z_t = _check_pair(Z_s, Z_t)
    n = Z_s.shape[0]
    return (softmax(Z_s, axis=-1) - softmax(Z_t, axis=-1)) / n


def _relation_scores(Z: np.ndarray, variant: str) -> np.ndarray:
    """Raw N x N relation scores; row i scores every sample j against sample i."""
    if variant == "inner":
        return Z @ Z.T
    if variant == "euclid":
        diff = Z[:, None, :] - Z[None, :, :]
        return -np.sqrt(np.sum(diff * diff, axis=-1))
    if variant == "cosine":
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("cosine relations undefined for zero-norm rows")
        scores = (Z @ Z.T) / np.outer(norms, norms)
        np.fill_diagonal(scores, 1.0)  # self-similarity is exactly 1
        return scores
    raise ValueError(f"unknown relation variant {variant!r}; expected one of {RKD_VARIANTS}")


def rkd_relation(Z: np.ndarray) -> np.ndarray:
    """Inner-product relation matrix: row i = softmax over <z_j, z_i> for all j."""
    Z = _as_batch(Z, "logit batch")
    if Z.shape[0] < 2:
        raise ValueError("relations need at least 2 samples")
    return softmax(_relation_scores(Z, "inner"), axis=-1)


def rkd_loss(Z_s: np.ndarray, Z_t: np.ndarray, variant: str = "inner") -> float:
    """Mean divergence between student and teacher relation rows."""
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    S_s = _relation_scores(Z_s, variant)
    S_t = _relation_scores(Z_t, variant)
    return float(np.mean(_rowwise_kd(S_s, S_t)))


def rkd_row_losses(Z_s: np.ndarray, Z_t: np.ndarray, variant: str = "inner") -> np.ndarray:
    """Per-relation-row divergences; rkd_loss is their mean."""
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    return _rowwise_kd(_relation_scores(Z_s, variant), _relation_scores(Z_t, variant))


def rkd_grad(Z_s: np.ndarray, Z_t: np.ndarray, variant: str = "inner") -> np.ndarray:
    """Analytic gradient of rkd_loss w.r.t. the student batch.

    The Euclidean variant has a kink where two student rows coincide; the
    zero subgradient is used for such pairs.
    """
    Z_s = _as_batch(Z_s, "student batch")
    return rkd_grad_anchored(Z_s, Z_t, np.ones(Z_s.shape[0], dtype=bool), variant)


@dataclass(frozen=True)
class DisplacementSet:
    """All N(N-1) directed row differences of a batch, in (i-major, j) order."""

    pairs: tuple[tuple[int, int], ...]
    vectors: np.ndarray  # N(N-1) x C, row order matches `pairs`

    def vector(self, i: int, j: int) -> np.ndarray:
        return self.vectors[self.pairs.index((i, j))]


def dkd_pairs(Z: np.ndarray) -> DisplacementSet:
    """Directed displacement vectors z_i - z_j for every ordered pair i != j."""
    Z = _as_batch(Z, "logit batch")
    n = Z.shape[0]
    if n < 2:
        raise ValueError("displacements need at least 2 samples")
    pairs = tuple((i, j) for i in range(n) for j in range(n) if j != i)
    vectors = np.stack([Z[i] - Z[j] for i, j in pairs])
    return DisplacementSet(pairs=pairs, vectors=vectors)


def _pair_kd_terms(Z_s: np.ndarray, Z_t: np.ndarray) -> np.ndarray:
    """N x N matrix of per-displacement-pair divergences (zero diagonal)."""
    D_s = Z_s[:, None, :] - Z_s[None, :, :]
    D_t = Z_t[:, None, :] - Z_t[None, :, :]
    return _rowwise_kd(D_s, D_t)


def dkd_loss(Z_s: np.ndarray, Z_t: np.ndarray) -> float:
    """Mean divergence over all N(N-1) directed displacement pairs.

    Invariant under adding one common constant vector to every row of either
    batch, since row shifts cancel inside the displacements.
    """
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    n = Z_s.shape[0]
    terms = _pair_kd_terms(Z_s, Z_t)
    return float(np.sum(terms) / (n * (n - 1)))


def dkd_grad(Z_s: np.ndarray, Z_t: np.ndarray) -> np.ndarray:
    """Analytic gradient of dkd_loss w.r.t. the student batch.

    Row k collects one term per pair where sample k leads the displacement
    (positive sign) and one per pair where it trails (negative sign).
    """
    Z_s = _as_batch(Z_s, "student batch")
    return dkd_grad_anchored(Z_s, Z_t, np.ones(Z_s.shape[0], dtype=bool))


def _anchor_mask(Z_s: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=bool)
    if anchors.shape != (Z_s.shape[0],):
        raise ValueError("anchor mask must flag one row per sample")
    if not np.any(anchors):
        raise ValueError("at least one anchor row required")
    return anchors


def dkd_loss_anchored(Z_s: np.ndarray, Z_t: np.ndarray, anchors: np.ndarray) -> float:
    """Displacement loss with the outer average restricted to anchor rows.

    Pair partners still span the whole batch, so non-anchor samples shape
    the displacements (and receive gradient) without being averaged over.
    """
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    anchors = _anchor_mask(Z_s, anchors)
    n = Z_s.shape[0]
    terms = _pair_kd_terms(Z_s, Z_t)
    return float(np.sum(terms[anchors]) / (int(anchors.sum()) * (n - 1)))


def dkd_grad_anchored(Z_s: np.ndarray, Z_t: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Gradient of dkd_loss_anchored w.r.t. the student batch (all rows)."""
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    anchors = _anchor_mask(Z_s, anchors)
    n = Z_s.shape[0]
    D_s = Z_s[:, None, :] - Z_s[None, :, :]
    D_t = Z_t[:, None, :] - Z_t[None, :, :]
    G = softmax(D_s, axis=-1) - softmax(D_t, axis=-1)
    G[~anchors] = 0.0
    lead = np.sum(G, axis=1)
    trail = np.sum(G, axis=0)
    return (lead - trail) / (int(anchors.sum()) * (n - 1))


def rkd_loss_anchored(
    Z_s: np.ndarray, Z_t: np.ndarray, anchors: np.ndarray, variant: str = "inner"
) -> float:
    """Relational loss averaged over anchor rows; relations span the batch."""
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    anchors = _anchor_mask(Z_s, anchors)
    rows = _rowwise_kd(_relation_scores(Z_s, variant), _relation_scores(Z_t, variant))
    return float(np.mean(rows[anchors]))


def rkd_grad_anchored(
    Z_s: np.ndarray, Z_t: np.ndarray, anchors: np.ndarray, variant: str = "inner"
) -> np.ndarray:
    """Gradient of rkd_loss_anchored w.r.t. the student batch (all rows)."""
    Z_s, Z_t = _check_pair(Z_s, Z_t, min_n=2)
    anchors = _anchor_mask(Z_s, anchors)
    n_a = int(anchors.sum())
    S_s = _relation_scores(Z_s, variant)
    S_t = _relation_scores(Z_t, variant)
    G = softmax(S_s, axis=-1) - softmax(S_t, axis=-1)
    G[~anchors] = 0.0
    W = G + G.T
    n = Z_s.shape[0]

    if variant == "inner":
        return (W @ Z_s) / n_a

    if variant == "euclid":
        diff = Z_s[:, None, :] - Z_s[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        safe = np.where(dist == 0.0, 1.0, dist)
        unit = diff / safe[:, :, None]
        unit[dist == 0.0] = 0.0
        return -np.einsum("kj,kjc->kc", W, unit) / n_a

    norms = np.linalg.norm(Z_s, axis=1)
    off = 1.0 - np.eye(n)
    W = W * off
    inv = 1.0 / norms
    cos = S_s
    term1 = (W * np.outer(inv, inv)) @ Z_s
    b = np.sum(W * cos * off, axis=1) * inv * inv
    return (term1 - b[:, None] * Z_s) / n_a


@dataclass(frozen=True)
class PollutionReport:
    """How many per-term losses a single corrupted sample touches."""

    n: int
    outlier_index: int
    dkd_affected: int
    dkd_total: int
    rkd_affected_rows: int
    rkd_total_rows: int
    dynamic_dkd_affected: int
    dynamic_rkd_affected_rows: int

    @property
    def consistent(self) -> bool:
        return (
            self.dynamic_dkd_affected == self.dkd_affected
            and self.dynamic_rkd_affected_rows == self.rkd_affected_rows
        )


def pollution_report(n: int, outlier_index: int, dim: int = 6, seed: int = 0) -> PollutionReport:
    """Count distillation terms an outlier sample pollutes, two ways.

    Static counts enumerate directed displacement pairs containing the
    outlier (2(N-1) of N(N-1)) and relation rows depending on it (all N).
    The dynamic check perturbs the outlier row of a random student batch and
    counts which per-term losses actually changed; the two must agree.
    """
    if n < 2:
        raise ValueError("pollution analysis needs at least 2 samples")
    if not 0 <= outlier_index < n:
        raise ValueError(f"outlier index {outlier_index} out of range for batch of {n}")

    dkd_total = n * (n - 1)
    dkd_affected = 2 * (n - 1)

    rng = np.random.default_rng(seed)
    Z_s = rng.standard_normal((n, dim))
    Z_t = rng.standard_normal((n, dim))
    base_pairs = _pair_kd_terms(Z_s, Z_t)
    base_rows = rkd_row_losses(Z_s, Z_t)

    Z_p = Z_s.copy()
    Z_p[outlier_index] += rng.standard_normal(dim)
    new_pairs = _pair_kd_terms(Z_p, Z_t)
    new_rows = rkd_row_losses(Z_p, Z_t)

    off_diag = ~np.eye(n, dtype=bool)
    dynamic_pairs = int(np.count_nonzero((new_pairs != base_pairs) & off_diag))
    dynamic_rows = int(np.count_nonzero(new_rows != base_rows))

    return PollutionReport(
        n=n,
        outlier_index=outlier_index,
        dkd_affected=dkd_affected,
        dkd_total=dkd_total,
        rkd_affected_rows=n,
        rkd_total_rows=n,
        dynamic_dkd_affected=dynamic_pairs,
        dynamic_rkd_affected_rows=dynamic_rows,
    )
