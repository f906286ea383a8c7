"""Command line entry point: ``bsarec prepare|train|eval|analyze|sweep``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    InteractionCorpus,
    SplitSet,
    Splits,
    compute_stats,
    leave_last_out_split,
    load_category_map,
    parse_corpus,
)
from .evaluation import (
    DEFAULT_KS,
    MetricReport,
    aggregate_seeds,
    group_by_scaled_dc,
    group_by_target_occurrence,
    lfc_hfc_norm_profile,
    metric_dict,
    rank_all_items,
    significance_table,
    write_csv,
)
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .signal import PaddingMode, dense_category_encoding, scaled_dc_component
from .training import TrainConfig, TrainingDivergence, train

logger = logging.getLogger("bsarec")

CACHE_ENV = "BSAREC_CACHE_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
OCCURRENCE_CAP = 25
SWEEP_AXES = {"max_len", "alpha", "cutoff", "padding", "backend", "num_heads", "learning_rate"}


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str
    category_map: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/default"
    sweep: dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' path")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # num_items is unknown before parsing; a placeholder checks everything else
        self.model_config(num_items=1)
        self.train_config(self.seeds[0] if self.seeds else 0)
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.sweep is not None:
            axis = self.sweep.get("axis")
            if axis not in SWEEP_AXES or not self.sweep.get("values"):
                raise ConfigError(f"sweep needs axis in {sorted(SWEEP_AXES)} and non-empty values")

    def model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "num_items": num_items})

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": seed})

    @property
    def max_len(self) -> int:
        return self.model_config(1).max_len

    @property
    def padding(self) -> PaddingMode:
        return self.model_config(1).padding

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# helpers


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def content_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(b"\0" if p is None else Path(p).read_bytes())
        h.update(b"\x1f")
    return h.hexdigest()


def load_corpus(dataset, category_map=None) -> InteractionCorpus:
    corpus = parse_corpus(dataset)
    if category_map:
        corpus = load_category_map(category_map, corpus)
    return corpus


def cache_root(out: Path) -> Path:
    return Path(os.environ.get(CACHE_ENV) or out / "cache")


def _save_splits(splits: Splits, path: Path) -> None:
    arrays = {}
    for name in ("train", "valid", "test"):
        s: SplitSet = getattr(splits, name)
        for field_name in ("user_index", "inputs", "targets", "mask"):
            arrays[f"{name}.{field_name}"] = getattr(s, field_name)
    arrays["meta"] = np.array([splits.max_len, splits.num_items], dtype=np.int64)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_splits(path: Path, padding: PaddingMode) -> Splits:
    with np.load(path, allow_pickle=False) as data:
        max_len, num_items = (int(v) for v in data["meta"])
        sets = {}
        for name in ("train", "valid", "test"):
            sets[name] = SplitSet(
                **{f: data[f"{name}.{f}"] for f in ("user_index", "inputs", "targets", "mask")},
                max_len=max_len,
                padding=padding,
            )
    return Splits(**sets, max_len=max_len, padding=padding, num_items=num_items)


def prepare(dataset, category_map, max_len: int, padding, out: Path) -> tuple[InteractionCorpus, Splits, Path]:
    """Parse, split and cache; cached splits are reused while the input bytes are unchanged."""
    padding = PaddingMode.parse(padding)
    corpus = load_corpus(dataset, category_map)
    key = f"{content_hash(dataset, category_map)[:16]}-l{max_len}-{padding.value}"
    cache_dir = cache_root(out) / key
    split_path = cache_dir / "splits.npz"
    if split_path.exists():
        splits = _load_splits(split_path, padding)
        logger.info("reusing cached splits %s", split_path)
    else:
        splits = leave_last_out_split(corpus, max_len, padding)
        _save_splits(splits, split_path)
    stats = asdict(compute_stats(corpus))
    stats["dropped_users"] = corpus.dropped_users
    _write_json(cache_dir / "stats.json", stats)
    _write_json(out / "stats.json", stats)
    return corpus, splits, cache_dir


# ---------------------------------------------------------------------------
# commands


def run_training(cfg: ExperimentConfig, out: Path) -> list[Path]:
    corpus, splits, _ = prepare(cfg.dataset, cfg.category_map, cfg.max_len, cfg.padding, out)
    model_config = cfg.model_config(corpus.num_items)
    checkpoints = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        ckpt = seed_dir / "checkpoint.npz"
        done = seed_dir / "record.json"
        if done.exists() and ckpt.exists():
            logger.info("seed %s already trained, skipping", seed)
            checkpoints.append(ckpt)
            continue
        try:
            result = train(splits, model_config, cfg.train_config(seed))
        except TrainingDivergence as exc:
            if exc.record is not None:
                _atomic_write_text(seed_dir / "run.jsonl", exc.record.to_jsonl())
            raise
        save_checkpoint(result.model, ckpt, extra={"seed": seed, "best_epoch": result.record.best_epoch})
        _atomic_write_text(seed_dir / "run.jsonl", result.record.to_jsonl())
        _write_json(done, {
            "seed": seed,
            "best_epoch": result.record.best_epoch,
            "best_valid_ndcg10": result.record.best_valid_ndcg10,
            "stopped": result.record.stopped,
            "epochs": len(result.record.epochs),
        })
        checkpoints.append(ckpt)
    _write_json(out / "config.json", cfg.to_dict())
    return checkpoints


def _seed_checkpoints(out: Path) -> list[Path]:
    return sorted(out.glob("seed_*/checkpoint.npz"), key=lambda p: int(p.parent.name.split("_")[1]))


def _group_rows(report: MetricReport, key: str) -> list[list]:
    rows = []
    for q, vals in report.groups.get(key, {}).items():
        rows.append([q, vals.get("users", 0)] + [vals.get(f"{m}@{k}", "") for m in ("HR", "NDCG") for k in DEFAULT_KS])
    return rows


def run_eval(cfg: ExperimentConfig, out: Path, split: str = "test", checkpoints=None,
             baseline: Path | None = None, profile_user: str | None = None) -> dict:
    corpus, splits, _ = prepare(cfg.dataset, cfg.category_map, cfg.max_len, cfg.padding, out)
    checkpoints = [Path(c) for c in checkpoints] if checkpoints else _seed_checkpoints(out)
    if not checkpoints:
        raise UsageError(f"no checkpoints found under {out}")
    split_set = getattr(splits, split)
    reports = []
    for ckpt in checkpoints:
        model, extra = load_checkpoint(ckpt)
        if model.config.num_items != corpus.num_items or model.config.max_len != splits.max_len:
            raise ConfigError(f"{ckpt} does not match the corpus/window of this config")
        records = rank_all_items(model, split_set, corpus, split)
        seed = extra.get("seed")
        reports.append(MetricReport.from_records(records, seed=seed))
        write_csv(out / f"ranks_seed{seed}_{split}.csv",
                  ["user_id", "rank", "scaled_dc", "target_category_occurrence"],
                  [[r.user_id, r.rank, f"{r.scaled_dc:.8f}", r.target_category_occurrence] for r in records])
        if profile_user is not None:
            _write_profile(model, corpus, splits, profile_user, out / f"norm_profile_seed{seed}.csv")
    aggregate = aggregate_seeds(reports)
    header = ["quartile", "users"] + [f"{m}@{k}" for m in ("HR", "NDCG") for k in DEFAULT_KS]
    write_csv(out / f"groups_scaled_dc_{split}.csv", header, _group_rows(aggregate, "scaled_dc"))
    write_csv(out / f"groups_target_occurrence_{split}.csv", header, _group_rows(aggregate, "target_occurrence"))
    payload = {"split": split, "aggregate": aggregate.to_dict(), "per_seed": [r.to_dict() for r in reports],
               "significance_available": False}
    if baseline is not None:
        base_path = baseline / f"report_{split}.json"
        if not base_path.exists():
            raise UsageError(f"baseline report {base_path} not found; run eval there first")
        base = [MetricReport.from_dict(r) for r in json.loads(base_path.read_text())["per_seed"]]
        if len(base) >= 2 and len(reports) >= 2:
            rows = significance_table(reports, base)
            keys = ["metric", "mean_a", "mean_b", "diff_pct", "t", "dof", "p", "significant"]
            write_csv(out / f"significance_{split}.csv", keys, [[r[k] for k in keys] for r in rows])
            payload["significance_available"] = True
            payload["significance"] = rows
        else:
            logger.warning("significance test needs at least two seeds on each side")
    _write_json(out / f"report_{split}.json", payload)
    return payload


def _write_profile(model, corpus, splits, user_id: str, path: Path) -> None:
    ids = [u.user_id for u in corpus.users]
    if user_id not in ids:
        raise UsageError(f"unknown user {user_id!r} for norm profile")
    row = int(np.nonzero(splits.test.user_index == ids.index(user_id))[0][0])
    window = splits.test.inputs[row]
    prof = lfc_hfc_norm_profile(model, window)
    mask = splits.test.mask[row]
    write_csv(path, ["position", "item_id", "is_pad", "lfc_norm", "hfc_norm"],
              [[t, int(window[t]), int(not mask[t]), f"{prof[t, 0]:.8f}", f"{prof[t, 1]:.8f}"] for t in range(len(window))])


def occurrence_profile(corpus: InteractionCorpus, cap: int = OCCURRENCE_CAP) -> np.ndarray:
    """Mean category-occurrence proportion by within-user rank (0 = most frequent)."""
    if not corpus.has_categories:
        raise DataError("occurrence analysis needs a category map")
    acc = np.zeros(cap)
    for user in corpus.users:
        counts = sorted((user.categories.count(c) for c in set(user.categories)), reverse=True)
        props = np.asarray(counts[:cap], dtype=np.float64) / len(user.categories)
        acc[: props.size] += props
    return acc / len(corpus.users)


def run_analyze(dataset, category_map, out: Path) -> dict:
    corpus = load_corpus(dataset, category_map)
    flagged = category_map is None
    values = []
    rows = []
    for user in corpus.users:
        cats = user.categories if user.categories is not None else [str(i) for i in user.items]
        dc = scaled_dc_component(dense_category_encoding(cats))
        values.append(dc)
        rows.append([user.user_id, len(cats), len(set(cats)), f"{dc:.8f}"])
    arr = np.asarray(values)
    summary = {
        "users": len(values),
        "mean_scaled_dc": float(arr.mean()),
        "std_scaled_dc": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "median_scaled_dc": float(np.median(arr)),
        "categories_from_items": flagged,
    }
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "user_scaled_dc.csv", ["user_id", "length", "unique_categories", "scaled_dc"], rows)
    if not flagged:
        prof = occurrence_profile(corpus)
        write_csv(out / "category_occurrence.csv", ["rank", "mean_proportion"],
                  [[i, f"{v:.8f}"] for i, v in enumerate(prof)])
    _write_json(out / "analysis.json", summary)
    return summary


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    new = copy.deepcopy(cfg)
    new.sweep = None
    if axis == "learning_rate":
        new.train[axis] = value
    else:
        new.model[axis] = value
    new.validate()
    return new


def run_sweep(cfg: ExperimentConfig, out: Path, split: str = "test") -> Path:
    if cfg.sweep is None:
        raise UsageError("config has no 'sweep' section")
    axis = cfg.sweep["axis"]
    metric_keys = list(metric_dict([1], DEFAULT_KS))
    rows = []
    for value in cfg.sweep["values"]:
        sub = _apply_axis(cfg, axis, value)
        sub_out = out / f"{axis}={value}"
        run_training(sub, sub_out)
        payload = run_eval(sub, sub_out, split)
        for seed_report in payload["per_seed"]:
            seed = seed_report["seeds"][0] if seed_report["seeds"] else ""
            rows.append([axis, value, seed] + [seed_report["metrics"][k] for k in metric_keys])
    path = out / f"sweep_{axis}.csv"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(path, ["axis", "value", "seed"] + metric_keys, rows)
    return path


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON document")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--padding", choices=[m.value for m in PaddingMode])
    common.add_argument("--backend", choices=["fourier", "wavelet", "residual"])
    common.add_argument("--alpha", type=float)
    common.add_argument("--c", type=int, dest="cutoff", help="frequency cutoff")
    common.add_argument("--max-len", type=int, dest="max_len")
    common.add_argument("--dataset", help="corpus file (overrides config)")
    common.add_argument("--category-map", dest="category_map")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bsarec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="parse, split and cache a corpus")
    sub.add_parser("train", parents=[common], help="train one checkpoint per seed")
    ev = sub.add_parser("eval", parents=[common], help="full-ranking evaluation of trained seeds")
    ev.add_argument("--split", choices=["test", "valid"], default="test")
    ev.add_argument("--checkpoint", action="append", dest="checkpoints", type=Path)
    ev.add_argument("--baseline", type=Path, help="output directory of a run to t-test against")
    ev.add_argument("--profile-user", help="write the LFC/HFC norm profile of this user's test window")
    sub.add_parser("analyze", parents=[common], help="scaled-DC and category-occurrence statistics")
    sw = sub.add_parser("sweep", parents=[common], help="train and evaluate across one config axis")
    sw.add_argument("--split", choices=["test", "valid"], default="test")
    return parser


def resolve_config(args) -> ExperimentConfig:
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    raw = copy.deepcopy(raw)
    raw.setdefault("model", {})
    for key in ("padding", "backend", "alpha", "cutoff", "max_len"):
        value = getattr(args, key)
        if value is not None:
            raw["model"][key] = value
    if args.dataset is not None:
        raw["dataset"] = args.dataset
    if args.category_map is not None:
        raw["category_map"] = args.category_map
    if args.out is not None:
        raw["out"] = str(args.out)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        if args.command == "prepare":
            _, _, cache_dir = prepare(cfg.dataset, cfg.category_map, cfg.max_len, cfg.padding, out)
            print(cache_dir)
        elif args.command == "train":
            for ckpt in run_training(cfg, out):
                print(ckpt)
        elif args.command == "eval":
            payload = run_eval(cfg, out, args.split, args.checkpoints, args.baseline, args.profile_user)
            print(json.dumps(payload["aggregate"]["metrics"], indent=2))
        elif args.command == "analyze":
            print(json.dumps(run_analyze(cfg.dataset, cfg.category_map, out), indent=2))
        elif args.command == "sweep":
            print(run_sweep(cfg, out, args.split))
    except (UsageError, ConfigError) as exc:
        print(f"bsarec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"bsarec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"bsarec: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
