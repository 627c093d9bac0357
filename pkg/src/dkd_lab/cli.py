"""Command-line interface.

Subcommands: `gen` (synthetic datasets), `run` (one experiment), `ablate`
(distillation x selector grid), `attack` (outlier robustness sweep),
`losscheck` (gradient and oracle self-checks), and `compare` (diff two run
manifests). Exit codes: 0 success, 1 runtime or check failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import datagen, distill, numkernel, protocol, selector as selector_mod
from .datagen import FeatureSet, GenSpec
from .protocol import ARMS, RunConfig

MANIFEST_FORMAT = "dkd-lab-run/1"
SESSIONS_HEADER = "session,acc,acc_b,acc_n,sa,kr,ad"
ABLATION_HEADER = "arm,selector,seeds,acc_b,acc_n,sa,kr"
ATTACK_HEADER = "pct,arm,seeds,mean_ad,mean_acc_current"
SELECTOR_SETTINGS = (
    ("none", False, False),
    ("momentum", True, False),
    ("triplet", False, True),
    ("momentum+triplet", True, True),
)


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "arm", None) is not None:
        doc["arm"] = args.arm
    try:
        return RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _load_dataset(path: str) -> FeatureSet:
    root = Path(path)
    parts = []
    for stem in ("train", "test"):
        for suffix in (".csv", ".jsonl"):
            f = root / f"{stem}{suffix}"
            if f.exists():
                parts.append(datagen.load_features(f))
                break
        else:
            raise UsageError(f"dataset {path} lacks {stem}.csv or {stem}.jsonl")
    return datagen.concat(parts)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_sessions_csv(path: Path, reports) -> None:
    lines = [SESSIONS_HEADER]
    for r in reports:
        lines.append(
            ",".join(
                [str(r.session)]
                + [_fmt(v) for v in (r.acc, r.acc_b, r.acc_n, r.sa, r.kr, r.ad)]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _manifest_doc(result: protocol.ExperimentResult) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "config": result.config.to_dict(),
        "sessions": [
            {
                "session": r.session,
                "acc": r.acc,
                "acc_b": r.acc_b,
                "acc_n": r.acc_n,
                "sa": r.sa,
                "kr": r.kr,
                "ad": r.ad,
                "acc_current": r.acc_current,
                "kr_current": r.kr_current,
                "ad_current": r.ad_current,
                "per_task": list(r.per_task),
            }
            for r in result.reports
        ],
        "acc_matrix": [list(row) for row in result.acc_matrix],
        "aa": result.aa,
        "af": result.af,
        "af_defined": result.af_defined,
    }


def cmd_gen(args) -> int:
    spec = GenSpec(
        classes=args.classes,
        dim=args.dim,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        spread=args.spread,
        within_std=args.std,
        base_classes=args.base_classes,
        gap=args.gap,
        seed=args.seed if args.seed is not None else 0,
    )
    fset = datagen.gen_gaussian_mixture(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    datagen.save_features(fset.train(), out / f"train.{ext}", format=ext)
    datagen.save_features(fset.test(), out / f"test.{ext}", format=ext)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    print(f"wrote {len(fset.train())} train / {len(fset.test())} test records to {out}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    data = _load_dataset(args.data)
    result = protocol.run_experiment(data, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_sessions_csv(out / "sessions.csv", result.reports)
    (out / "manifest.json").write_text(
        json.dumps(_manifest_doc(result), indent=2), encoding="utf-8"
    )

    print(f"{'session':>7} {'acc':>8} {'kr':>8} {'ad':>8}")
    for r in result.reports:
        print(f"{r.session:>7} {r.acc:8.2f} {r.kr:8.2f} {r.ad:8.2f}")
    final = result.reports[-1]
    print(f"final KR {final.kr:.2f}%  AD {final.ad:.2f}  AA {result.aa:.2f}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    data = _load_dataset(args.data)
    seeds = list(range(config.seed, config.seed + args.seeds))

    rows = []
    for arm in ARMS:
        for name, momentum, triplet in SELECTOR_SETTINGS:
            finals = []
            for seed in seeds:
                cfg = replace(
                    config,
                    arm=arm,
                    selector_momentum=momentum,
                    selector_triplet=triplet,
                    seed=seed,
                )
                result = protocol.run_experiment(data, cfg)
                finals.append(result.reports[-1])
            rows.append(
                (
                    arm,
                    name,
                    len(seeds),
                    float(np.mean([r.acc_b for r in finals])),
                    float(np.mean([r.acc_n for r in finals])),
                    float(np.mean([r.sa for r in finals])),
                    float(np.mean([r.kr for r in finals])),
                )
            )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [ABLATION_HEADER]
    for arm, name, n, acc_b, acc_n, sa, kr in rows:
        lines.append(f"{arm},{name},{n},{_fmt(acc_b)},{_fmt(acc_n)},{_fmt(sa)},{_fmt(kr)}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    print(f"{'arm':>8} {'selector':>18} {'acc_b':>7} {'acc_n':>7} {'sa':>7} {'kr':>7}")
    for arm, name, _, acc_b, acc_n, sa, kr in rows:
        print(f"{arm:>8} {name:>18} {acc_b:7.2f} {acc_n:7.2f} {sa:7.2f} {kr:7.2f}")
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    data = _load_dataset(args.data)
    try:
        pcts = [float(p) for p in args.pct.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad --pct list {args.pct!r}") from None
    if not pcts:
        raise UsageError("--pct list is empty")
    arms = tuple(args.arms.split(",")) if args.arms else ("ikd+rkd", "ikd+dkd")
    for arm in arms:
        if arm not in ARMS:
            raise UsageError(f"unknown arm {arm!r}; expected one of {ARMS}")
    seeds = list(range(config.seed, config.seed + args.seeds))

    per_cell: dict[tuple[float, str], list] = {(p, a): [] for p in pcts for a in arms}
    for seed in seeds:
        cfg = replace(config, seed=seed)
        for pct in pcts:
            outcome = protocol.inject_outlier_attack(data, cfg, pct, arms=arms)
            for arm in arms:
                final = outcome.results[arm].reports[-1]
                per_cell[(pct, arm)].append((final.ad_current, final.acc_current))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [ATTACK_HEADER]
    print(f"{'pct':>5} {'arm':>8} {'mean_ad':>9} {'mean_acc':>9}")
    for pct in pcts:
        for arm in arms:
            cells = per_cell[(pct, arm)]
            mean_ad = float(np.mean([c[0] for c in cells]))
            mean_acc = float(np.mean([c[1] for c in cells]))
            lines.append(f"{pct:g},{arm},{len(seeds)},{_fmt(mean_ad)},{_fmt(mean_acc)}")
            print(f"{pct:>5g} {arm:>8} {mean_ad:9.3f} {mean_acc:9.2f}")
    (out / "attack.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return 0


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(fd)), 1e-8)
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(fd)) / denom)


def cmd_losscheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    n_max, c_max, trials = args.n, args.c, args.trials
    print(f"losscheck: n<={n_max} c<={c_max} trials={trials} seed={args.seed or 0}")
    checks: list[tuple[str, bool, str]] = []

    def record(name: str, ok: bool, detail: str) -> None:
        checks.append((name, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    def grad_family(name, sample, loss_fn, grad_fn, tol):
        worst = 0.0
        for _ in range(trials):
            x, fixed = sample()
            analytic = grad_fn(x, fixed)
            fd = numkernel.finite_diff_grad(lambda z: loss_fn(z, fixed), x, 1e-6)
            worst = max(worst, _rel_err(analytic, fd))
        record(name, worst < tol, f"max rel err {worst:.3e} (tol {tol:g})")

    def batch_pair():
        n = int(rng.integers(2, n_max + 1))
        c = int(rng.integers(2, c_max + 1))
        return rng.standard_normal((n, c)), rng.standard_normal((n, c))

    def vec_pair():
        c = int(rng.integers(2, c_max + 1))
        return rng.standard_normal(c), rng.standard_normal(c)

    grad_family(
        "kd_divergence gradient",
        vec_pair,
        numkernel.kd_divergence,
        numkernel.kd_gradient,
        1e-5,
    )
    grad_family("ikd gradient", batch_pair, distill.ikd_loss, distill.ikd_grad, 1e-5)
    for variant in distill.RKD_VARIANTS:
        grad_family(
            f"rkd[{variant}] gradient",
            batch_pair,
            lambda z, t, v=variant: distill.rkd_loss(z, t, v),
            lambda z, t, v=variant: distill.rkd_grad(z, t, v),
            1e-5,
        )
    grad_family("dkd gradient", batch_pair, distill.dkd_loss, distill.dkd_grad, 1e-5)

    def triplet_sample():
        while True:
            a = rng.standard_normal(4)
            pos = rng.standard_normal((3, 4))
            neg = rng.standard_normal((3, 4)) * 2.0
            dp = np.linalg.norm(a - pos, axis=1)
            dn = np.linalg.norm(a - neg, axis=1)
            args_ = dp[:, None] - dn[None, :] + 1.0
            if np.all(np.abs(args_) > 1e-3):  # stay clear of the hinge kink
                return a, (pos, neg)

    grad_family(
        "triplet gradient (anchor)",
        triplet_sample,
        lambda a, pn: selector_mod.triplet_loss(a, pn[0], pn[1], 1.0),
        lambda a, pn: selector_mod.triplet_grad_anchor(a, pn[0], pn[1], 1.0),
        1e-5,
    )

    def bce_sample():
        return rng.standard_normal(2), bool(rng.integers(0, 2))

    grad_family(
        "binary cross-entropy gradient",
        bce_sample,
        lambda s, base: selector_mod.binary_ce(numkernel.softmax(s), base),
        lambda s, base: numkernel.softmax(s) - (np.array([0.0, 1.0]) if base else np.array([1.0, 0.0])),
        1e-5,
    )

    # vectorised losses vs naive loops
    worst = 0.0
    for _ in range(trials):
        z_s, z_t = batch_pair()
        n = z_s.shape[0]
        naive_ikd = float(np.mean([numkernel.kd_divergence(z_s[i], z_t[i]) for i in range(n)]))
        naive_dkd = float(
            np.mean(
                [
                    np.mean(
                        [
                            numkernel.kd_divergence(z_s[i] - z_s[j], z_t[i] - z_t[j])
                            for j in range(n)
                            if j != i
                        ]
                    )
                    for i in range(n)
                ]
            )
        )
        naive_rkd = float(
            np.mean(
                [numkernel.kd_divergence(z_s @ z_s[i], z_t @ z_t[i]) for i in range(n)]
            )
        )
        worst = max(
            worst,
            abs(distill.ikd_loss(z_s, z_t) - naive_ikd),
            abs(distill.dkd_loss(z_s, z_t) - naive_dkd),
            abs(distill.rkd_loss(z_s, z_t) - naive_rkd),
        )
    record("vectorised losses vs naive loops", worst < 1e-12, f"max abs gap {worst:.3e}")

    # pollution counting, static vs dynamic
    ok = True
    for n in range(2, 11):
        rep = distill.pollution_report(n, n - 1, seed=int(rng.integers(0, 2**31)))
        ok = ok and rep.consistent and rep.dkd_affected == 2 * (n - 1) and rep.rkd_affected_rows == n
    record("pollution static == dynamic", ok, "n in 2..10")

    # translation invariance
    worst_shift, worst_ikd = 0.0, np.inf
    for _ in range(trials):
        z_s, z_t = batch_pair()
        c = rng.standard_normal(z_s.shape[1])
        worst_shift = max(worst_shift, abs(distill.dkd_loss(z_s + c, z_t) - distill.dkd_loss(z_s, z_t)))
        worst_ikd = min(worst_ikd, abs(distill.ikd_loss(z_s + c, z_t) - distill.ikd_loss(z_s, z_t)))
    record(
        "displacement loss shift-invariant (per-sample loss is not)",
        worst_shift < 1e-12 and worst_ikd > 1e-3,
        f"max dkd shift {worst_shift:.3e}, min ikd shift {worst_ikd:.3e}",
    )

    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


def _strip_volatile(doc: dict) -> dict:
    doc = dict(doc)
    doc.pop("created_at", None)
    return doc


def cmd_compare(args) -> int:
    docs = []
    for p in (args.manifest_a, args.manifest_b):
        try:
            docs.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read manifest {p}: {exc}") from None
    a, b = (_strip_volatile(d) for d in docs)
    if a == b:
        print("manifests are equivalent (timestamps ignored)")
        return 0
    keys = sorted(set(a) | set(b))
    for k in keys:
        if a.get(k) != b.get(k):
            print(f"differs: {k}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkd-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--train-per-class", type=int, default=30)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--spread", type=float, default=5.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--base-classes", type=int, default=None)
    p.add_argument("--gap", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--arm", choices=ARMS, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="distillation x selector ablation grid")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds averaged per cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attack", help="outlier robustness sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--pct", required=True, help="comma-separated outlier percentages")
    p.add_argument("--arms", default=None, help="comma-separated arms (default ikd+rkd,ikd+dkd)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("losscheck", help="gradient and oracle self-checks")
    p.add_argument("--n", type=int, default=8, help="max batch size")
    p.add_argument("--c", type=int, default=16, help="max logit dimension")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_losscheck)

    p = sub.add_parser("compare", help="diff two run manifests")
    p.add_argument("manifest_a")
    p.add_argument("manifest_b")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
