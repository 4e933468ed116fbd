"""K-fold cross-validation over users with episode-split evaluation.

One *cell* is (method entry, fold, seed): train on the fold's training users,
evaluate every held-out user, and store the result as a small JSON file.
Finished cells are reused when a run is restarted with the same settings,
so long experiments can be resumed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import MetaDataset, NormalizationStats, load_meta_dataset, normalize_meta
from .learners import KINDS, HyperParams, TrainingDiverged
from .training import evaluate_user, model_config_for, train

log = logging.getLogger(__name__)


def kfold_split(user_ids, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Shuffle users by ``seed`` and cut them into ``k`` test groups.

    Group sizes differ by at most one; the first ``n % k`` groups get the
    extra user.
    """
    users = sorted(int(u) for u in user_ids)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(users):
        raise ValueError(f"{k} folds for {len(users)} users")
    order = np.random.default_rng(seed).permutation(users).tolist()
    sizes = [len(users) // k + (i < len(users) % k) for i in range(k)]
    folds, start = [], 0
    for size in sizes:
        test = sorted(order[start:start + size])
        start += size
        train = [u for u in users if u not in test]
        folds.append((train, test))
    return folds


@dataclass
class MethodEntry:
    kind: str
    name: str = ""
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        self.name = self.name or self.kind


@dataclass
class ExperimentConfig:
    data: str
    out: str
    methods: list[MethodEntry]
    folds: int = 5
    fold_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_batch: int = 1000
    eval_draws: int = 10
    defaults: dict = field(default_factory=dict)
    cell_time_limit: float = 0.0     # seconds; 0 disables the warning
    checkpoints: bool = True

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.methods:
            raise ValueError("no methods configured")
        if self.eval_batch < 1 or self.eval_draws < 1:
            raise ValueError("eval_batch and eval_draws must be >= 1")
        for m in self.methods:
            self.hyper_for(m, self.seeds[0])  # validate early

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        d["methods"] = [MethodEntry(**m) if isinstance(m, dict) else MethodEntry(kind=m) for m in d["methods"]]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if base_dir is not None:
            for key in ("data", "out"):
                p = Path(d[key])
                d[key] = str(p if p.is_absolute() else base_dir / p)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(yaml.safe_load(path.read_text()), base_dir=path.parent)

    def hyper_for(self, method: MethodEntry, seed: int) -> HyperParams:
        return HyperParams.from_dict({**self.defaults, **method.hyper, "seed": seed})


@dataclass
class CellResult:
    method: str
    kind: str
    fold: int
    seed: int
    test_users: list[int]
    mse: float
    std: float
    status: str
    runtime: float
    per_user: dict = field(default_factory=dict)


def _fingerprint(method: MethodEntry, hyper: HyperParams, fold: tuple, cfg: ExperimentConfig) -> str:
    blob = json.dumps({"kind": method.kind, "hyper": asdict(hyper), "fold": fold,
                       "eval": [cfg.eval_batch, cfg.eval_draws]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(method: MethodEntry, hyper: HyperParams, raw: MetaDataset, train_users, test_users,
             fold: int, cfg: ExperimentConfig, out: Path) -> CellResult:
    overlap = set(train_users) & set(test_users)
    assert not overlap, f"fold {fold}: users {sorted(overlap)} in both train and test"
    stats = NormalizationStats.fit(raw[u] for u in train_users)
    meta = normalize_meta(raw, stats)
    train_meta = {u: meta[u] for u in train_users}
    tag = f"{method.name}_f{fold}_s{hyper.seed}"
    t0 = time.perf_counter()
    ckpt = out / "checkpoints" / f"{tag}.ckpt" if cfg.checkpoints else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        stats.save(out / "checkpoints" / f"{tag}.stats.txt")
    try:
        learner = train(method.kind, train_meta, hyper, log_path=out / "logs" / f"{tag}.log",
                        checkpoint_path=ckpt, checkpoint_every=max(hyper.iterations // 10, 1),
                        cfg=model_config_for(train_meta, hyper))
    except TrainingDiverged as exc:
        log.error("%s: %s", tag, exc)
        return CellResult(method.name, method.kind, fold, hyper.seed, list(test_users), math.nan, math.nan,
                          "diverged", time.perf_counter() - t0)
    per_user = {}
    for u in test_users:
        per_user[int(u)] = evaluate_user(learner, meta[u], cfg.eval_batch, cfg.eval_draws, seed=(hyper.seed, fold))
    draws = np.concatenate(list(per_user.values()))
    runtime = time.perf_counter() - t0
    if cfg.cell_time_limit and runtime > cfg.cell_time_limit:
        log.warning("%s took %.0f s, above the %.0f s limit", tag, runtime, cfg.cell_time_limit)
    return CellResult(method.name, method.kind, fold, hyper.seed, list(test_users), float(draws.mean()),
                      float(draws.std()), "ok", runtime, {str(k): v for k, v in per_user.items()})


def run_experiment(cfg: ExperimentConfig) -> list[CellResult]:
    out = Path(cfg.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    raw = load_meta_dataset(cfg.data)
    folds = kfold_split(raw, cfg.folds, cfg.fold_seed)
    covered = sorted(u for _, test in folds for u in test)
    assert covered == sorted(raw), "folds do not partition the users"
    results = []
    for seed in cfg.seeds:
        for fi, (train_users, test_users) in enumerate(folds):
            for method in cfg.methods:
                hyper = cfg.hyper_for(method, seed)
                fp = _fingerprint(method, hyper, (train_users, test_users), cfg)
                cell_file = out / "cells" / f"{method.name}_f{fi}_s{seed}.json"
                if cell_file.exists():
                    saved = json.loads(cell_file.read_text())
                    if saved.pop("fingerprint", None) == fp:
                        results.append(CellResult(**saved))
                        continue
                log.info("cell %s fold %d seed %d", method.name, fi, seed)
                res = run_cell(method, hyper, raw, train_users, test_users, fi, cfg, out)
                cell_file.write_text(json.dumps({**asdict(res), "fingerprint": fp}))
                results.append(res)
    write_results(results, out)
    return results


def summarize(results: list[CellResult]) -> dict[str, dict]:
    """Per-method mean over folds and seeds (diverged cells are reported, not averaged)."""
    out: dict[str, dict] = {}
    for r in results:
        d = out.setdefault(r.method, {"kind": r.kind, "mse": [], "diverged": 0, "runtime": 0.0})
        d["runtime"] += r.runtime
        if r.status == "ok":
            d["mse"].append(r.mse)
        else:
            d["diverged"] += 1
    for d in out.values():
        d["mean"] = float(np.mean(d["mse"])) if d["mse"] else math.nan
        d["spread"] = float(np.std(d["mse"])) if d["mse"] else math.nan
    return out


def results_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "kind", "fold", "seed", "mse", "std", "status"])
    for r in results:
        w.writerow([r.method, r.kind, r.fold, r.seed, f"{r.mse:.10e}", f"{r.std:.10e}", r.status])
    for name, d in summarize(results).items():
        w.writerow([name, d["kind"], "mean", "all", f"{d['mean']:.10e}", f"{d['spread']:.10e}",
                    "ok" if not d["diverged"] else f"diverged:{d['diverged']}"])
    return buf.getvalue()


def results_table(results: list[CellResult]) -> str:
    summary = summarize(results)
    lines = [f"{'method':<30}{'mean MSE':>14}{'spread':>12}{'cells':>7}{'runtime [s]':>13}"]
    for name, d in sorted(summary.items(), key=lambda kv: (math.isnan(kv[1]["mean"]), kv[1]["mean"])):
        note = f"  ({d['diverged']} diverged)" if d["diverged"] else ""
        lines.append(f"{name:<30}{d['mean']:>14.4e}{d['spread']:>12.2e}{len(d['mse']):>7}"
                     f"{d['runtime']:>13.0f}{note}")
    return "\n".join(lines) + "\n"


def write_results(results: list[CellResult], out: Path) -> None:
    (out / "results.csv").write_text(results_csv(results))
    (out / "results.txt").write_text(results_table(results))
