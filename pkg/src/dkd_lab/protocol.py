"""Few-shot class-incremental orchestration.

Builds session schedules, manages the replay memory and pre-order
bookkeeping, runs the two-phase training loop (supervised base session,
then alternating extractor/selector updates on each few-shot session),
evaluates the fused dual-branch predictions, computes the retention
metrics, and drives the outlier-robustness attack.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from . import datagen, model
from .datagen import FeatureSet
from .model import Extractor, PrototypeBank, TeacherSignals
from .numkernel import softmax
from .selector import SelectorState, create_selector, fuse, selector_logits, selector_train_step

ARMS = ("ikd", "ikd+rkd", "ikd+dkd")
_PREORDER_OF_ARM = {"ikd": "ikd", "ikd+rkd": "rkd", "ikd+dkd": "dkd"}
MEMORY_POLICIES = ("closest", "random")

# rng stream codes; every generator in a run derives from (config.seed, code, ...)
_INIT, _SELECTOR, _BATCHING, _SHOTS, _MEMORY, _OUTLIERS = range(6)

_EVAL_CHUNK = 256


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _stream_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    """Full experiment configuration; every field has a default."""

    # optimisation
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 64
    cosine_schedule: bool = True
    seed: int = 0
    # loss weights: w1/w2 scale the base and pre-order distillation terms,
    # beta1/beta2 the selector triplet and binary cross-entropy terms
    w1: float = 50.0
    w2: float = 50.0
    beta1: float = 0.2
    beta2: float = 0.8
    alpha: float = 0.9  # prototype momentum
    gamma: float = 1.0  # triplet margin
    # replay memory
    memory_per_class: int = 1
    memory_policy: str = "closest"
    # extractor architecture
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    freeze_trunk: bool = True
    grad_clip: float | None = None  # global-norm step clip; None disables
    # class schedule
    total_classes: int = 10
    base_count: int = 6
    way: int = 2
    shot: int = 5
    # distillation arm and selector ablation toggles
    arm: str = "ikd+dkd"
    selector_momentum: bool = True
    selector_triplet: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.memory_per_class < 0:
            raise ValueError("memory_per_class must be nonnegative")
        if self.memory_policy not in MEMORY_POLICIES:
            raise ValueError(f"memory_policy must be one of {MEMORY_POLICIES}")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}")
        if min(self.total_classes, self.base_count, self.way, self.shot) < 1:
            raise ValueError("schedule counts must be at least 1")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def effective_alpha(self) -> float:
        """Momentum toggle off means prototypes track the latest batch mean."""
        return self.alpha if self.selector_momentum else 1.0

    @property
    def effective_beta1(self) -> float:
        return self.beta1 if self.selector_triplet else 0.0

    @property
    def preorder_kind(self) -> str:
        return _PREORDER_OF_ARM[self.arm]

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["hidden_dims"] = list(self.hidden_dims)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class SessionSchedule:
    """Ordered class partition: one data-rich base session, then few-shot ones."""

    base_classes: tuple[int, ...]
    incremental: tuple[tuple[int, ...], ...]
    way: int
    shot: int

    def __post_init__(self):
        all_ids: list[int] = list(self.base_classes)
        for group in self.incremental:
            all_ids.extend(group)
            if len(group) != self.way:
                raise ValueError("every incremental session must introduce exactly `way` classes")
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("class sets of different sessions must be disjoint")

    @property
    def num_sessions(self) -> int:
        return 1 + len(self.incremental)

    def classes_for(self, tau: int) -> tuple[int, ...]:
        if tau == 0:
            return self.base_classes
        return self.incremental[tau - 1]

    def seen_classes(self, tau: int) -> tuple[int, ...]:
        seen: list[int] = list(self.base_classes)
        for group in self.incremental[:tau]:
            seen.extend(group)
        return tuple(sorted(seen))


def build_schedule(
    total_classes: int, base_count: int, way: int, shot: int, seed: int
) -> SessionSchedule:
    """Partition class ids into a base set and seeded `way`-sized sessions.

    Ids 0..base_count-1 form the base session (the generator applies its
    base/novel gap to the same split); the remaining ids are shuffled by the
    seed and chunked in order.
    """
    if shot < 1:
        raise ValueError("shot must be at least 1")
    if not 1 <= base_count <= total_classes:
        raise ValueError("base_count must lie in [1, total_classes]")
    remaining = total_classes - base_count
    if remaining % way != 0:
        raise ValueError(
            f"{remaining} non-base classes cannot be split into sessions of {way}"
        )
    novel = np.arange(base_count, total_classes)
    novel = np.random.default_rng(seed).permutation(novel)
    groups = tuple(
        tuple(int(c) for c in novel[i : i + way]) for i in range(0, remaining, way)
    )
    return SessionSchedule(
        base_classes=tuple(range(base_count)), incremental=groups, way=way, shot=shot
    )


@dataclass(frozen=True)
class MemorySet:
    """Replay exemplars retained from completed sessions."""

    records: FeatureSet

    def classes(self) -> list[int]:
        return self.records.class_ids()

    def count_for(self, class_id: int) -> int:
        return int(np.count_nonzero(self.records.labels == class_id))

    def copy(self) -> "MemorySet":
        return MemorySet(records=self.records.subset(np.ones(len(self.records), dtype=bool)))


def empty_memory(dim: int) -> MemorySet:
    return MemorySet(records=datagen.empty_set(dim))


def update_memory(
    memory: MemorySet,
    session_data: FeatureSet,
    m: int,
    policy: str = "closest",
    embed: Callable[[np.ndarray], np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> MemorySet:
    """Retain up to `m` exemplars per new class; existing entries untouched.

    The "closest" policy keeps the samples nearest (in `embed` space,
    identity by default) to their class mean; "random" draws without
    replacement from `rng`.
    """
    if m < 0:
        raise ValueError("memory size must be nonnegative")
    if policy not in MEMORY_POLICIES:
        raise ValueError(f"policy must be one of {MEMORY_POLICIES}")
    if m == 0 or len(session_data) == 0:
        return memory

    existing = set(memory.classes())
    keep_rows: list[int] = []
    for c in session_data.class_ids():
        if c in existing:
            continue
        rows = np.flatnonzero(session_data.labels == c)
        k = min(m, len(rows))
        if policy == "closest":
            feats = session_data.features[rows]
            emb = embed(feats) if embed is not None else feats
            dists = np.linalg.norm(emb - emb.mean(axis=0), axis=1)
            order = np.argsort(dists, kind="stable")
            chosen = rows[order[:k]]
        else:
            if rng is None:
                raise ValueError("random policy needs an rng")
            chosen = rng.choice(rows, size=k, replace=False)
        keep_rows.extend(sorted(int(r) for r in chosen))

    if not keep_rows:
        return memory
    picked = session_data.subset(np.asarray(keep_rows, dtype=np.int64))
    if len(memory.records) == 0:
        return MemorySet(records=picked)
    return MemorySet(records=datagen.concat([memory.records, picked]))


@dataclass(frozen=True)
class MetricReport:
    """Per-session evaluation row; accuracies and rates are percentages."""

    session: int
    acc: float
    acc_b: float
    acc_n: float
    sa: float
    kr: float
    ad: float
    acc_current: float
    kr_current: float
    ad_current: float
    per_task: tuple[float, ...]


def kr_ad(acc0: float, acc_tau: float) -> tuple[float, float]:
    """Knowledge retention (percent of initial accuracy) and accuracy drop."""
    if acc0 <= 0:
        raise ValueError("knowledge retention is undefined for acc0 <= 0")
    return acc_tau / acc0 * 100.0, acc0 - acc_tau


@dataclass(frozen=True)
class AaAf:
    aa: float
    af: float
    af_defined: bool


def aa_af(acc_matrix, task_weights=None) -> AaAf:
    """Average accuracy and average forgetting from a lower-triangular matrix.

    Row l holds accuracies on tasks 0..l measured after session l. AA is the
    mean over sessions of the (optionally weighted) row mean; AF averages,
    over every non-final task, the gap between its best historical accuracy
    and its final accuracy. With a single session AF is reported as 0 and
    flagged undefined.
    """
    if not acc_matrix:
        raise ValueError("accuracy matrix must be nonempty")
    rows = [np.asarray(row, dtype=np.float64) for row in acc_matrix]
    for l, row in enumerate(rows):
        if row.shape != (l + 1,):
            raise ValueError(f"row {l} must hold exactly {l + 1} task accuracies")
    if task_weights is not None:
        task_weights = np.asarray(task_weights, dtype=np.float64)
        if task_weights.shape[0] < len(rows):
            raise ValueError("need one weight per task")

    overall = []
    for l, row in enumerate(rows):
        if task_weights is None:
            overall.append(row.mean())
        else:
            w = task_weights[: l + 1]
            overall.append(float(np.sum(row * w) / np.sum(w)))
    aa = float(np.mean(overall))

    final = len(rows) - 1
    if final == 0:
        return AaAf(aa=aa, af=0.0, af_defined=False)
    gaps = []
    for j in range(final):
        best = max(rows[l][j] for l in range(j, final))
        gaps.append(best - rows[final][j])
    return AaAf(aa=aa, af=float(np.mean(gaps)), af_defined=True)


@dataclass
class RunState:
    """Mutable state of one experiment run."""

    config: RunConfig
    schedule: SessionSchedule
    extractor: Extractor
    bank: PrototypeBank | None = None
    base_extractor: Extractor | None = None
    base_bank: PrototypeBank | None = None
    prev_extractor: Extractor | None = None
    prev_bank: PrototypeBank | None = None
    selector: SelectorState | None = None
    memory: MemorySet | None = None
    next_session: int = 0
    acc0: float | None = None
    acc0_current: float | None = None

    def copy(self) -> "RunState":
        def bank_copy(b):
            return None if b is None else PrototypeBank(b.class_ids, b.vectors.copy())

        return RunState(
            config=self.config,
            schedule=self.schedule,
            extractor=self.extractor.copy(),
            bank=bank_copy(self.bank),
            base_extractor=None if self.base_extractor is None else self.base_extractor.copy(),
            base_bank=bank_copy(self.base_bank),
            prev_extractor=None if self.prev_extractor is None else self.prev_extractor.copy(),
            prev_bank=bank_copy(self.prev_bank),
            selector=None if self.selector is None else self.selector.copy(),
            memory=None if self.memory is None else self.memory.copy(),
            next_session=self.next_session,
            acc0=self.acc0,
            acc0_current=self.acc0_current,
        )


def init_state(data: FeatureSet, config: RunConfig) -> RunState:
    schedule = build_schedule(
        config.total_classes, config.base_count, config.way, config.shot, config.seed
    )
    dims = [data.dim, *config.hidden_dims, config.feature_dim]
    extractor = Extractor.create(dims, _rng(config.seed, _INIT))
    return RunState(
        config=config,
        schedule=schedule,
        extractor=extractor,
        memory=empty_memory(data.dim),
    )


def _session_train_data(data: FeatureSet, state: RunState, tau: int) -> FeatureSet:
    """Training records for session tau, shot-subsampled for few-shot sessions."""
    cfg = state.config
    classes = state.schedule.classes_for(tau)
    train = data.train()
    recs = train.subset(np.isin(train.labels, classes))
    if tau == 0:
        return recs.with_sessions(0)
    rng = _rng(cfg.seed, _SHOTS, tau)
    keep: list[int] = []
    for c in classes:
        rows = np.flatnonzero(recs.labels == c)
        if len(rows) < cfg.shot:
            raise ValueError(f"class {c} has {len(rows)} train samples, fewer than shot={cfg.shot}")
        chosen = rng.choice(rows, size=cfg.shot, replace=False)
        keep.extend(sorted(int(r) for r in chosen))
    return recs.subset(np.asarray(keep, dtype=np.int64)).with_sessions(tau)


def _refresh_bank(
    state: RunState, features: np.ndarray, labels: np.ndarray, seen: tuple[int, ...]
) -> PrototypeBank:
    """Class-mean prototypes from current features; absent classes keep old ones."""
    present = set(int(c) for c in np.unique(labels))
    vectors = np.empty((len(seen), state.config.feature_dim))
    for k, c in enumerate(seen):
        if c in present:
            vectors[k] = features[labels == c].mean(axis=0)
        elif state.bank is not None and c in state.bank.class_ids:
            vectors[k] = state.bank.vectors[state.bank.index_of(c)]
        else:
            raise RuntimeError(f"no data and no retained prototype for class {c}")
    return PrototypeBank(class_ids=tuple(seen), vectors=vectors)


def _lr_at(cfg: RunConfig, step: int, total_steps: int) -> float:
    if cfg.cosine_schedule:
        return model.cosine_lr(step, total_steps, cfg.learning_rate)
    return cfg.learning_rate


def _train_base(state: RunState, d0: FeatureSet) -> None:
    cfg = state.config
    seen = state.schedule.seen_classes(0)
    X, labels = d0.features, d0.labels
    y_idx = np.searchsorted(np.asarray(seen), labels)
    n = len(d0)
    rng = _rng(cfg.seed, _BATCHING, 0)
    batches = max(1, int(np.ceil(n / cfg.batch_size)))
    total_steps = cfg.epochs * batches
    step = 0
    for _ in range(cfg.epochs):
        state.bank = _refresh_bank(state, state.extractor.forward_batch(X), labels, seen)
        perm = rng.permutation(n)
        for b in range(batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            model.train_step(
                state.extractor,
                state.bank,
                X[idx],
                y_idx[idx],
                teachers=None,
                w1=0.0,
                w2=0.0,
                lr=_lr_at(cfg, step, total_steps),
                clip_norm=cfg.grad_clip,
            )
            step += 1
    state.bank = _refresh_bank(state, state.extractor.forward_batch(X), labels, seen)

    state.base_extractor = state.extractor.copy()
    state.base_bank = PrototypeBank(state.bank.class_ids, state.bank.vectors.copy())
    state.prev_extractor = state.base_extractor
    state.prev_bank = state.base_bank
    if cfg.freeze_trunk:
        state.extractor.freeze_all_but_last()
    state.selector = create_selector(
        state.extractor.trunk_dim,
        cfg.feature_dim,
        _rng(cfg.seed, _SELECTOR),
        momentum=cfg.effective_alpha,
        margin=cfg.gamma,
    )


def _train_incremental(state: RunState, d_tau: FeatureSet, tau: int) -> None:
    cfg = state.config
    schedule = state.schedule
    seen = schedule.seen_classes(tau)
    seen_arr = np.asarray(seen)
    pool = datagen.concat([d_tau, state.memory.records])
    X, labels, origins = pool.features, pool.labels, pool.sessions
    y_idx = np.searchsorted(seen_arr, labels)
    n = len(pool)

    base_ids = np.asarray(schedule.base_classes)
    prev_seen = np.asarray(schedule.seen_classes(tau - 1))
    base_cols = np.searchsorted(seen_arr, np.sort(base_ids))
    prev_cols = np.searchsorted(seen_arr, prev_seen)

    base_scores = state.base_bank.scores(state.base_extractor.forward_batch(X))
    prev_scores = state.prev_bank.scores(state.prev_extractor.forward_batch(X))
    base_mask = origins == 0
    preorder_mask = (origins >= 1) & (origins <= tau - 1)
    is_base_label = np.isin(labels, base_ids)

    rng = _rng(cfg.seed, _BATCHING, tau)
    batches = max(1, int(np.ceil(n / cfg.batch_size)))
    total_steps = cfg.epochs * batches
    step = 0
    for _ in range(cfg.epochs):
        state.bank = _refresh_bank(state, state.extractor.forward_batch(X), labels, seen)
        perm = rng.permutation(n)
        for b in range(batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            teachers = TeacherSignals(
                base_mask=base_mask[idx],
                base_scores=base_scores[idx],
                base_cols=base_cols,
                preorder_mask=preorder_mask[idx],
                preorder_scores=prev_scores[idx],
                preorder_cols=prev_cols,
                # memory exemplars (base and pre-order) carry the preserved
                # structure; the current session's samples stay out of it
                preorder_partners=(base_mask | preorder_mask)[idx],
            )
            lr = _lr_at(cfg, step, total_steps)
            model.train_step(
                state.extractor,
                state.bank,
                X[idx],
                y_idx[idx],
                teachers=teachers,
                w1=cfg.w1,
                w2=cfg.w2,
                lr=lr,
                preorder=cfg.preorder_kind,
                clip_norm=cfg.grad_clip,
            )
            trunk = state.extractor.trunk_forward_batch(X[idx])
            selector_train_step(
                state.selector,
                trunk,
                is_base_label[idx],
                beta1=cfg.effective_beta1,
                beta2=cfg.beta2,
                lr=lr,
                clip_norm=cfg.grad_clip,
            )
            step += 1
    state.bank = _refresh_bank(state, state.extractor.forward_batch(X), labels, seen)

    state.prev_extractor = state.extractor.copy()
    state.prev_bank = PrototypeBank(state.bank.class_ids, state.bank.vectors.copy())


def run_session(
    state: RunState,
    data: FeatureSet,
    tau: int,
    tamper: Callable[[FeatureSet, int], FeatureSet] | None = None,
) -> None:
    """Train session `tau` in order; `tamper` may rewrite its training set."""
    if tau != state.next_session:
        raise RuntimeError(
            f"sessions must run in order; expected {state.next_session}, got {tau}"
        )
    if tau >= state.schedule.num_sessions:
        raise RuntimeError("schedule exhausted")
    d_tau = _session_train_data(data, state, tau)
    if tamper is not None:
        d_tau = tamper(d_tau, tau)
    if tau == 0:
        _train_base(state, d_tau)
    else:
        _train_incremental(state, d_tau, tau)
    state.memory = update_memory(
        state.memory,
        d_tau,
        state.config.memory_per_class,
        state.config.memory_policy,
        embed=state.extractor.forward_batch,
        rng=_rng(state.config.seed, _MEMORY, tau),
    )
    state.next_session = tau + 1


def _eval_threads() -> int:
    raw = os.environ.get("DKD_LAB_THREADS")
    if raw is None or not raw.strip():
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"DKD_LAB_THREADS must be an integer, got {raw!r}") from None


def predict(state: RunState, X: np.ndarray, tau: int):
    """Fused, selector, current-branch and padded base-branch outputs for X.

    Evaluation may fan chunks out to DKD_LAB_THREADS worker threads; results
    are concatenated in chunk order, so the output is thread-count
    independent.
    """
    seen = np.asarray(state.schedule.seen_classes(tau))
    base_cols = np.searchsorted(seen, np.sort(np.asarray(state.schedule.base_classes)))

    def one_chunk(chunk: np.ndarray):
        cur = softmax(state.bank.scores(state.extractor.forward_batch(chunk)), axis=-1)
        z0 = softmax(state.base_bank.scores(state.base_extractor.forward_batch(chunk)), axis=-1)
        base_padded = np.zeros((chunk.shape[0], len(seen)))
        base_padded[:, base_cols] = z0
        if state.selector is not None and state.selector.initialized:
            z_g = selector_logits(state.selector, state.extractor.trunk_forward_batch(chunk))
        else:
            z_g = np.tile([0.0, 1.0], (chunk.shape[0], 1))
        fused = fuse(z_g, cur, base_padded)
        return fused, z_g, cur, base_padded

    chunks = [X[i : i + _EVAL_CHUNK] for i in range(0, len(X), _EVAL_CHUNK)] or [X]
    workers = _eval_threads()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one_chunk, chunks))
    else:
        parts = [one_chunk(c) for c in chunks]
    fused, z_g, cur, base_padded = (np.concatenate(p) for p in zip(*parts))
    return fused, z_g, cur, base_padded


def _pct(correct: np.ndarray, mask: np.ndarray) -> float:
    """Percent of correct entries under mask; 0.0 for an empty group."""
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0
    return float(np.count_nonzero(correct & mask) / count * 100.0)


def evaluate(state: RunState, data: FeatureSet, tau: int | None = None) -> MetricReport:
    """Metrics on all test classes seen through session `tau`."""
    if tau is None:
        tau = state.next_session - 1
    if not 0 <= tau < state.next_session:
        raise RuntimeError(f"session {tau} has not been trained yet")

    schedule = state.schedule
    seen = schedule.seen_classes(tau)
    seen_arr = np.asarray(seen)
    test = data.test()
    test = test.subset(np.isin(test.labels, seen_arr))
    covered = set(test.class_ids())
    missing = [c for c in seen if c not in covered]
    if missing:
        raise ValueError(f"test set lacks coverage for classes {missing}")

    fused, z_g, cur, _ = predict(state, test.features, tau)
    pred = seen_arr[np.argmax(fused, axis=1)]
    pred_current = seen_arr[np.argmax(cur, axis=1)]
    correct = pred == test.labels
    correct_current = pred_current == test.labels

    is_base = np.isin(test.labels, np.asarray(schedule.base_classes))
    all_mask = np.ones(len(test), dtype=bool)
    acc = _pct(correct, all_mask)
    acc_b = _pct(correct, is_base)
    acc_n = _pct(correct, ~is_base)
    acc_current = _pct(correct_current, all_mask)

    routed_novel = np.argmax(z_g, axis=1) == 0
    sa = float(np.count_nonzero(routed_novel == ~is_base) / len(test) * 100.0)

    acc0 = state.acc0 if state.acc0 is not None else acc
    acc0_current = state.acc0_current if state.acc0_current is not None else acc_current
    kr, ad = kr_ad(acc0, acc)
    kr_current, ad_current = kr_ad(acc0_current, acc_current)

    per_task = []
    for j in range(tau + 1):
        task_mask = np.isin(test.labels, np.asarray(schedule.classes_for(j)))
        per_task.append(_pct(correct, task_mask))

    return MetricReport(
        session=tau,
        acc=acc,
        acc_b=acc_b,
        acc_n=acc_n,
        sa=sa,
        kr=kr,
        ad=ad,
        acc_current=acc_current,
        kr_current=kr_current,
        ad_current=ad_current,
        per_task=tuple(per_task),
    )


@dataclass(frozen=True)
class ExperimentResult:
    config: RunConfig
    reports: tuple[MetricReport, ...]
    acc_matrix: tuple[tuple[float, ...], ...]
    aa: float
    af: float
    af_defined: bool


def run_base_phase(data: FeatureSet, config: RunConfig) -> tuple[RunState, MetricReport]:
    """Train and evaluate the base session only."""
    state = init_state(data, config)
    run_session(state, data, 0)
    report = evaluate(state, data, 0)
    state.acc0 = report.acc
    state.acc0_current = report.acc_current
    return state, report


def run_incremental_phase(
    state: RunState,
    data: FeatureSet,
    tamper: Callable[[FeatureSet, int], FeatureSet] | None = None,
) -> list[MetricReport]:
    """Run every remaining few-shot session, evaluating after each."""
    reports = []
    for tau in range(state.next_session, state.schedule.num_sessions):
        run_session(state, data, tau, tamper=tamper)
        reports.append(evaluate(state, data, tau))
    return reports


def _result_from_reports(config: RunConfig, reports: list[MetricReport]) -> ExperimentResult:
    matrix = tuple(r.per_task for r in reports)
    summary = aa_af([list(row) for row in matrix])
    aa = float(np.mean([r.acc for r in reports]))
    return ExperimentResult(
        config=config,
        reports=tuple(reports),
        acc_matrix=matrix,
        aa=aa,
        af=summary.af,
        af_defined=summary.af_defined,
    )


def run_experiment(data: FeatureSet, config: RunConfig) -> ExperimentResult:
    """Full run: base phase plus every incremental session."""
    state, report0 = run_base_phase(data, config)
    reports = [report0] + run_incremental_phase(state, data)
    return _result_from_reports(config, reports)


@dataclass(frozen=True)
class AttackOutcome:
    pct: float
    results: dict  # arm -> ExperimentResult
    ad_current: dict  # arm -> final-session current-branch accuracy drop


def outlier_tamper(config: RunConfig, pct: float, scale: float):
    """Session tamper callback replacing pct% of each few-shot training set."""

    def tamper(d_tau: FeatureSet, tau: int) -> FeatureSet:
        seed = _stream_seed(config.seed, _OUTLIERS, tau)
        return datagen.make_outliers(d_tau, pct, seed=seed, scale=scale)

    return tamper


def inject_outlier_attack(
    data: FeatureSet,
    config: RunConfig,
    pct: float,
    arms: tuple[str, ...] = ("ikd+rkd", "ikd+dkd"),
) -> AttackOutcome:
    """Rerun the incremental phase with polluted training sets, per arm.

    The base session is trained once, clean, and shared by every arm so the
    comparison starts from identical parameters. Accuracy drops are taken on
    the current branch alone.
    """
    if not 0.0 <= pct <= 100.0:
        raise ValueError("pct must lie in [0, 100]")
    base_state, report0 = run_base_phase(data, config)
    scale = float(np.std(data.train().features))
    results, drops = {}, {}
    for arm in arms:
        st = base_state.copy()
        st.config = replace(config, arm=arm)
        reports = [report0] + run_incremental_phase(
            st, data, tamper=outlier_tamper(config, pct, scale)
        )
        res = _result_from_reports(st.config, reports)
        results[arm] = res
        drops[arm] = res.reports[-1].ad_current
    return AttackOutcome(pct=pct, results=results, ad_current=drops)
