"""Synthetic feature generation, feature-file I/O, and outlier injection.

Datasets are flat record sets: a feature vector, an integer class label, an
origin-session tag, and a train/test split marker. Generation draws class
centers uniformly from a ball, optionally pushes the non-base class centers
away along the first axis to model a semantic gap, and samples isotropic
Gaussians around each center. All randomness flows through numpy's seeded
PCG64 generator, so identical specs reproduce identical sets on any
platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SPLITS = ("train", "test")


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64, nonnegative
    sessions: np.ndarray  # (n,) int64 origin-session tags
    splits: np.ndarray  # (n,) unicode, each "train" or "test"

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        for name, arr in (("labels", self.labels), ("sessions", self.sessions), ("splits", self.splits)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per record")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        if not np.all(np.isin(self.splits, SPLITS)):
            raise ValueError("splits must be 'train' or 'test'")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask: np.ndarray) -> "FeatureSet":
        return FeatureSet(
            features=self.features[mask],
            labels=self.labels[mask],
            sessions=self.sessions[mask],
            splits=self.splits[mask],
        )

    def train(self) -> "FeatureSet":
        return self.subset(self.splits == "train")

    def test(self) -> "FeatureSet":
        return self.subset(self.splits == "test")

    def with_sessions(self, tag: int) -> "FeatureSet":
        return replace(self, sessions=np.full(len(self), tag, dtype=np.int64))

    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


def concat(sets: list[FeatureSet]) -> FeatureSet:
    if not sets:
        raise ValueError("nothing to concatenate")
    return FeatureSet(
        features=np.concatenate([s.features for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        sessions=np.concatenate([s.sessions for s in sets]),
        splits=np.concatenate([s.splits for s in sets]),
    )


def empty_set(dim: int) -> FeatureSet:
    return FeatureSet(
        features=np.empty((0, dim)),
        labels=np.empty(0, dtype=np.int64),
        sessions=np.empty(0, dtype=np.int64),
        splits=np.empty(0, dtype="<U5"),
    )


@dataclass(frozen=True)
class GenSpec:
    """Parameters of the Gaussian-mixture generator.

    Classes with id >= base_classes count as novel and have their centers
    shifted by `gap` along the first axis, creating a controllable
    base/novel semantic gap. base_classes=None disables the shift.
    """

    classes: int
    dim: int
    train_per_class: int
    test_per_class: int
    spread: float = 5.0
    within_std: float = 1.0
    base_classes: int | None = None
    gap: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.dim < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("counts must be at least 1")
        if self.within_std <= 0 or self.spread <= 0:
            raise ValueError("spread and within-class std must be positive")
        if self.base_classes is not None and not 0 <= self.base_classes <= self.classes:
            raise ValueError("base_classes must lie in [0, classes]")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "dim": self.dim,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "spread": self.spread,
            "within_std": self.within_std,
            "base_classes": self.base_classes,
            "gap": self.gap,
            "seed": self.seed,
        }


def gen_gaussian_mixture(spec: GenSpec) -> FeatureSet:
    """Sample the mixture described by `spec`; bit-reproducible per seed."""
    rng = np.random.default_rng(spec.seed)

    # centers uniform in a ball of radius `spread`
    directions = rng.standard_normal((spec.classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = spec.spread * rng.uniform(0.0, 1.0, size=spec.classes) ** (1.0 / spec.dim)
    centers = directions * radii[:, None]

    if spec.base_classes is not None and spec.gap != 0.0:
        offset = np.zeros(spec.dim)
        offset[0] = spec.gap
        centers[spec.base_classes :] += offset

    feats, labels, splits = [], [], []
    for c in range(spec.classes):
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            feats.append(centers[c] + spec.within_std * rng.standard_normal((count, spec.dim)))
            labels.extend([c] * count)
            splits.extend([split] * count)

    return FeatureSet(
        features=np.concatenate(feats),
        labels=np.asarray(labels, dtype=np.int64),
        sessions=np.zeros(len(labels), dtype=np.int64),
        splits=np.asarray(splits, dtype="<U5"),
    )


def make_outliers(fset: FeatureSet, pct: float, seed: int, scale: float | None = None) -> FeatureSet:
    """Replace a fraction of train features per session with far-off samples.

    floor(pct/100 * train count) records of each origin session get their
    feature replaced by a draw from N(10*sigma*u, sigma^2 I) with u a fresh
    random unit direction; labels, sessions and splits are untouched.
    `scale` overrides sigma (default: std of all train feature entries).
    """
    if not 0.0 <= pct <= 100.0:
        raise ValueError("pct must lie in [0, 100]")
    rng = np.random.default_rng(seed)
    features = fset.features.copy()
    train_mask = fset.splits == "train"
    if scale is None:
        scale = float(np.std(features[train_mask])) if np.any(train_mask) else 1.0
    if scale == 0.0:
        scale = 1.0

    for tag in np.unique(fset.sessions[train_mask]):
        rows = np.flatnonzero(train_mask & (fset.sessions == tag))
        count = int(np.floor(pct / 100.0 * len(rows)))
        if count == 0:
            continue
        chosen = rng.choice(rows, size=count, replace=False)
        for r in chosen:
            u = rng.standard_normal(fset.dim)
            u /= np.linalg.norm(u)
            features[r] = 10.0 * scale * u + scale * rng.standard_normal(fset.dim)

    return replace(fset, features=features)


def _csv_header(dim: int) -> str:
    return ",".join(["label", "split", "session"] + [f"f{i}" for i in range(dim)])


def save_features(fset: FeatureSet, path, format: str = "csv") -> None:
    """Write a feature file (UTF-8, LF line endings)."""
    path = Path(path)
    if format == "csv":
        lines = [_csv_header(fset.dim)]
        for i in range(len(fset)):
            cells = [str(int(fset.labels[i])), str(fset.splits[i]), str(int(fset.sessions[i]))]
            cells += [repr(float(v)) for v in fset.features[i]]
            lines.append(",".join(cells))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    elif format == "jsonl":
        lines = []
        for i in range(len(fset)):
            lines.append(
                json.dumps(
                    {
                        "label": int(fset.labels[i]),
                        "split": str(fset.splits[i]),
                        "session": int(fset.sessions[i]),
                        "feature": [float(v) for v in fset.features[i]],
                    }
                )
            )
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8", newline="\n")
    else:
        raise ValueError(f"unknown format {format!r}; expected 'csv' or 'jsonl'")


class FeatureParseError(ValueError):
    """Raised when a feature file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _parse_record(cells_or_doc, dim: int, line: int):
    if isinstance(cells_or_doc, dict):
        doc = cells_or_doc
        try:
            label = int(doc["label"])
            split = str(doc["split"])
            session = int(doc["session"])
            feature = [float(v) for v in doc["feature"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FeatureParseError(f"bad record: {exc}", line) from None
    else:
        cells = cells_or_doc
        if len(cells) != dim + 3:
            raise FeatureParseError(f"expected {dim + 3} fields, got {len(cells)}", line)
        try:
            label = int(cells[0])
            split = cells[1]
            session = int(cells[2])
            feature = [float(v) for v in cells[3:]]
        except ValueError as exc:
            raise FeatureParseError(str(exc), line)
    if label < 0:
        raise FeatureParseError("label must be nonnegative", line)
    if split not in SPLITS:
        raise FeatureParseError(f"split must be one of {SPLITS}, got {split!r}", line)
    if len(feature) != dim:
        raise FeatureParseError(f"feature dimension {len(feature)} != {dim}", line)
    return label, split, session, feature


def load_features(path, format: str | None = None) -> FeatureSet:
    """Parse a feature file written by save_features.

    Raises FeatureParseError (with line number) for malformed rows and for
    dimension mismatches; a set is returned only if every record is valid.
    """
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix == ".jsonl" else "csv"
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()

    labels, splits, sessions, feats = [], [], [], []
    if format == "csv":
        if not lines:
            raise FeatureParseError("missing header", 1)
        header = lines[0].split(",")
        if header[:3] != ["label", "split", "session"] or any(
            h != f"f{i}" for i, h in enumerate(header[3:])
        ):
            raise FeatureParseError("unrecognised header", 1)
        dim = len(header) - 3
        for lineno, raw in enumerate(lines[1:], start=2):
            if not raw.strip():
                continue
            label, split, session, feature = _parse_record(raw.split(","), dim, lineno)
            labels.append(label)
            splits.append(split)
            sessions.append(session)
            feats.append(feature)
    elif format == "jsonl":
        dim = None
        for lineno, raw in enumerate(lines, start=1):
            if not raw.strip():
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise FeatureParseError(f"invalid JSON: {exc}", lineno) from None
            if dim is None:
                dim = len(doc.get("feature", []))
                if dim == 0:
                    raise FeatureParseError("empty feature vector", lineno)
            label, split, session, feature = _parse_record(doc, dim, lineno)
            labels.append(label)
            splits.append(split)
            sessions.append(session)
            feats.append(feature)
        if dim is None:
            raise FeatureParseError("no records in jsonl file", 1)
    else:
        raise ValueError(f"unknown format {format!r}; expected 'csv' or 'jsonl'")

    if not labels:
        return empty_set(dim)
    return FeatureSet(
        features=np.asarray(feats, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        sessions=np.asarray(sessions, dtype=np.int64),
        splits=np.asarray(splits, dtype="<U5"),
    )
