"""``signrec`` command line: prepare, train, evaluate, recommend.

Layout of a prepared dataset directory::

    users.vocab, items.vocab     one token per line, line number = index
    fold{k}/train.tsv, test.tsv  ``user_idx item_idx rating``
    stats.txt                    users, items, interactions, density, pos:neg
    dataset.json                 input checksum, preparation config, counts

A run directory holds ``manifest.json``, ``config.txt`` and per fold
``fold{k}/train.log`` and ``fold{k}/best.ckpt``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence


from . import __version__
from .config import TrainConfig, parse_config_text
from .errors import ConfigError, ContractError, EmptyDatasetError, InvariantError, NonFiniteError
from .evaluation import EvalReport, aggregate_folds, evaluate, format_table, write_report_csv
from .graph import DatasetSplit, RatingRecord, SEPARATORS, kcore_filter, make_split, parse_ratings, split_folds
from .recommend import recommend_all, write_recommendations
from .trainer import LOG_HEADER, embed, fit_fold, load_checkpoint, save_checkpoint

logger = logging.getLogger("signrec")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERIC = 5

RQ3_VARIANTS = {
    "w/o L-BPR": {"enable_bpr_neg": False},
    "w/o MSE": {"enable_mse": False},
    "w/o ortho": {"enable_ortho": False},
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- helpers ------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dataset_checksum(dataset: Path) -> str:
    """Digest over the vocabularies and every split manifest, in path order."""
    h = hashlib.sha256()
    files = [dataset / "users.vocab", dataset / "items.vocab", *sorted(dataset.glob("fold*/*.tsv"))]
    for f in files:
        h.update(f.relative_to(dataset).as_posix().encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    """defaults < ``base`` < ``--config`` file < ``--set`` pairs < ``--seed``."""
    config = base or TrainConfig()
    if args.config:
        config = TrainConfig.load(args.config, config)
    if args.set:
        pairs = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        config = TrainConfig.from_mapping(pairs, config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def thread_limit(args: argparse.Namespace):
    threads = 1 if args.deterministic else args.threads
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def workers(args: argparse.Namespace) -> int:
    return 1 if args.deterministic or not args.threads else args.threads


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_vocab(path: Path) -> list[str]:
    return path.read_text().splitlines()


def write_manifest(path: Path, records: Sequence[RatingRecord], users: dict[str, int], items: dict[str, int]) -> None:
    rows = sorted((users[r.user_id], items[r.item_id], r.rating) for r in records)
    with open(path, "w") as fh:
        for u, i, r in rows:
            fh.write(f"{u}\t{i}\t{r!r}\n")


def read_manifest(path: Path, users: list[str], items: list[str]) -> list[RatingRecord]:
    out = []
    for line in path.read_text().splitlines():
        u, i, r = line.split("\t")
        out.append(RatingRecord(users[int(u)], items[int(i)], float(r)))
    return out


def dataset_stats(records: Sequence[RatingRecord], delta: float) -> dict:
    users = {r.user_id for r in records}
    items = {r.item_id for r in records}
    pos = sum(r.rating > delta for r in records)
    neg = sum(r.rating < delta for r in records)
    return {
        "users": len(users),
        "items": len(items),
        "interactions": len(records),
        "density": len(records) / (len(users) * len(items)),
        "positive": pos,
        "negative": neg,
        "neg_per_pos": neg / pos if pos else float("nan"),
    }


def format_stats(stats: dict) -> str:
    return (
        f"users\t{stats['users']}\n"
        f"items\t{stats['items']}\n"
        f"interactions\t{stats['interactions']}\n"
        f"density\t{stats['density'] * 100:.4f}%\n"
        f"pos:neg\t1:{stats['neg_per_pos']:.2f}\n"
    )


def load_dataset(dataset: Path, delta: float) -> list[DatasetSplit]:
    if not (dataset / "dataset.json").is_file():
        raise CliError(f"{dataset} is not a prepared dataset directory", EXIT_IO)
    users = read_vocab(dataset / "users.vocab")
    items = read_vocab(dataset / "items.vocab")
    user_map = {t: n for n, t in enumerate(users)}
    item_map = {t: n for n, t in enumerate(items)}
    splits = []
    for fold_dir in sorted(dataset.glob("fold*"), key=lambda p: int(p.name[4:])):
        train = read_manifest(fold_dir / "train.tsv", users, items)
        test = read_manifest(fold_dir / "test.tsv", users, items)
        splits.append(make_split(train, test, delta, user_map, item_map, int(fold_dir.name[4:])))
    if not splits:
        raise CliError(f"{dataset} has no fold directories", EXIT_IO)
    return splits


def load_run(run: Path) -> tuple[dict, TrainConfig]:
    path = run / "manifest.json"
    if not path.is_file():
        raise CliError(f"{run} has no manifest.json", EXIT_IO)
    manifest = json.loads(path.read_text())
    config = TrainConfig.from_mapping(parse_config_text((run / "config.txt").read_text()))
    return manifest, config


def fold_state(run: Path, manifest: dict, fold: int, split: DatasetSplit, config: TrainConfig):
    entry = manifest["folds"].get(str(fold))
    if entry is None:
        raise CliError(f"run has no fold {fold}", EXIT_IO)
    ckpt = run / entry["checkpoint"]
    if not ckpt.is_file():
        raise CliError(f"missing checkpoint {ckpt}", EXIT_IO)
    params, layers = load_checkpoint(ckpt, config.dtype)
    return embed(split.train, params, layers)


# --- commands -------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    src = Path(args.input)
    out = Path(args.output)
    parsed = parse_ratings(src, SEPARATORS[config.separator])
    if parsed.malformed:
        logger.warning("skipped %d malformed lines", parsed.malformed)
    records = kcore_filter(parsed.records, config.min_user, config.min_item)
    if not records:
        raise EmptyDatasetError("nothing left after k-core filtering")
    splits = split_folds(records, config.split_ratio, config.num_folds, config.seed, config.delta)
    user_map, item_map = splits[0].user_map, splits[0].item_map

    out.mkdir(parents=True, exist_ok=True)
    (out / "users.vocab").write_text("".join(t + "\n" for t in sorted(user_map, key=user_map.get)))
    (out / "items.vocab").write_text("".join(t + "\n" for t in sorted(item_map, key=item_map.get)))
    for split in splits:
        fold_dir = out / f"fold{split.fold_index}"
        fold_dir.mkdir(exist_ok=True)
        write_manifest(fold_dir / "train.tsv", split.train_records, user_map, item_map)
        write_manifest(fold_dir / "test.tsv", split.test_records, user_map, item_map)
    stats = dataset_stats(records, config.delta)
    (out / "stats.txt").write_text(format_stats(stats))
    (out / "config.txt").write_text(config.dumps())
    write_json(
        out / "dataset.json",
        {
            "input": str(src),
            "input_sha256": sha256_file(src),
            "manifest_sha256": dataset_checksum(out),
            "malformed_lines": parsed.malformed,
            "records_after_kcore": len(records),
            "stats": stats,
            "version": version_string(),
        },
    )
    print(format_stats(stats), end="")
    return EXIT_OK


def _train_fold(split: DatasetSplit, config: TrainConfig, fold_dir: Path) -> dict:
    fold_dir.mkdir(parents=True, exist_ok=True)
    with open(fold_dir / "train.log", "w") as log:
        log.write(LOG_HEADER + "\n")

        def on_epoch(_fold, entry):
            log.write(entry.line() + "\n")
            log.flush()

        result = fit_fold(split, config, on_epoch)
    save_checkpoint(fold_dir / "best.ckpt", result.best_params, config.layers)
    return {
        "checkpoint": f"{fold_dir.name}/best.ckpt",
        "log": f"{fold_dir.name}/train.log",
        "best_epoch": result.best_epoch,
        "best_recall@10": result.best_recall,
        "secs_per_epoch": result.secs_per_epoch,
    }


def cmd_train(args: argparse.Namespace) -> int:
    dataset = Path(args.dataset)
    base = TrainConfig()
    if (dataset / "config.txt").is_file():
        base = TrainConfig.load(dataset / "config.txt")
    config = resolve_config(args, base)
    if args.epochs is not None:
        config = config.replace(epochs=args.epochs)
    splits = load_dataset(dataset, config.delta)
    if args.folds:
        wanted = set(args.folds)
        splits = [s for s in splits if s.fold_index in wanted]
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(config.dumps())

    folds = {}
    jobs = 1 if args.deterministic else max(1, args.jobs)
    if jobs > 1 and len(splits) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {s.fold_index: pool.submit(_train_fold, s, config, run / f"fold{s.fold_index}") for s in splits}
            folds = {str(k): f.result() for k, f in futures.items()}
    else:
        for s in splits:
            folds[str(s.fold_index)] = _train_fold(s, config, run / f"fold{s.fold_index}")
            logger.info("fold %d done: %s", s.fold_index, folds[str(s.fold_index)])
    write_json(
        run / "manifest.json",
        {
            "config": config.to_dict(),
            "dataset": str(dataset.resolve()),
            "dataset_checksum": dataset_checksum(dataset),
            "seed": config.seed,
            "version": version_string(),
            "deterministic": bool(args.deterministic),
            "folds": folds,
        },
    )
    for k, entry in folds.items():
        print(f"fold {k}: best Recall@10 {entry['best_recall@10']:.5f} at epoch {entry['best_epoch'] + 1}")
    return EXIT_OK


def _evaluate_run(run: Path, ks, filter_enabled: bool, nworkers: int) -> EvalReport:
    manifest, config = load_run(run)
    splits = load_dataset(Path(manifest["dataset"]), config.delta)
    reports = []
    for split in splits:
        if str(split.fold_index) not in manifest["folds"]:
            continue
        state = fold_state(run, manifest, split.fold_index, split, config)
        rep = evaluate(state, split, ks, filter_enabled, config.filter_k or None, nworkers)
        rep.secs_per_epoch = manifest["folds"][str(split.fold_index)].get("secs_per_epoch")
        reports.append(rep)
    if not reports:
        raise CliError(f"{run} has no trained folds", EXIT_IO)
    return aggregate_folds(reports)


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = Path(args.run)
    ks = tuple(args.k)
    n = workers(args)
    _, config = load_run(run)
    reports = {"full": _evaluate_run(run, ks, config.enable_filter, n)}
    for spec in args.variant or ():
        if "=" not in spec:
            raise ConfigError(f"--variant expects NAME=RUN_DIR, got {spec!r}")
        name, path = spec.split("=", 1)
        reports[name] = _evaluate_run(Path(path), ks, True, n)
    if args.suite or args.without_filter:
        # same checkpoints, filter switched off
        reports["w/o filter"] = _evaluate_run(run, ks, False, n)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    (out / "report.txt").write_text(table)
    with open(out / "report.csv", "w") as fh:
        write_report_csv(fh, reports)
    print(table, end="")
    return EXIT_OK


def cmd_recommend(args: argparse.Namespace) -> int:
    run = Path(args.run)
    manifest, config = load_run(run)
    dataset = Path(manifest["dataset"])
    splits = {s.fold_index: s for s in load_dataset(dataset, config.delta)}
    if args.fold not in splits:
        raise CliError(f"dataset has no fold {args.fold}", EXIT_IO)
    split = splits[args.fold]
    state = fold_state(run, manifest, args.fold, split, config)

    tokens: list[str] | None = None
    if args.users_file:
        tokens = [t.strip() for t in Path(args.users_file).read_text().splitlines() if t.strip()]
    elif args.users:
        tokens = list(args.users)
    rejects = []
    if tokens is None:
        users = list(range(split.train.num_users))
    else:
        users = []
        for t in tokens:
            if t in split.user_map:
                users.append(split.user_map[t])
            else:
                rejects.append(t)
    filter_on = config.enable_filter and not args.no_filter
    recs = recommend_all(split.train, state, args.k, filter_on, config.filter_k or None, users, workers(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        write_recommendations(fh, recs)
    rejects_path = out.with_name(out.name + ".rejects")
    rejects_path.write_text("".join(t + "\n" for t in rejects))
    if rejects:
        logger.warning("%d unknown users listed in %s", len(rejects), rejects_path)
    print(f"wrote {len(recs)} lists to {out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signrec", description=__doc__.splitlines()[0])
    p.add_argument("--config", metavar="PATH", help="key = value config file; overrides stored values")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="BLAS threads and scoring workers")
    p.add_argument("--deterministic", action="store_true", help="single thread, single process")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="parse, k-core filter and split a rating file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train every fold of a prepared dataset")
    sp.add_argument("dataset")
    sp.add_argument("run")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--folds", type=int, nargs="+", help="train only these fold indices")
    sp.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score the best checkpoints of a run")
    sp.add_argument("run")
    sp.add_argument("--k", type=int, nargs="+", default=[10, 20])
    sp.add_argument("--variant", action="append", metavar="NAME=RUN_DIR", help="extra method column")
    sp.add_argument("--without-filter", action="store_true", help="add a w/o filter column")
    sp.add_argument("--suite", action="store_true", help="ablation table; pass the retrained runs via --variant")
    sp.add_argument("--out", help="report directory (default: the run directory)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("recommend", help="dump top-K lists")
    sp.add_argument("run")
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--users", nargs="+", help="user tokens (default: all)")
    sp.add_argument("--users-file", help="file with one user token per line")
    sp.add_argument("--no-filter", action="store_true")
    sp.set_defaults(func=cmd_recommend)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with thread_limit(args):
            return args.func(args)
    except CliError as exc:
        print(f"signrec: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, EmptyDatasetError) as exc:
        print(f"signrec: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"signrec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, InvariantError, ValueError, KeyError) as exc:
        print(f"signrec: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
