"""Command line entry point: ``mdistmult {prepare,train,evaluate,predict,sweep}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluation import EvalConfig, csv_header, csv_row, evaluate
from .kg import (
    SPLITS,
    DataError,
    TripleSet,
    Vocab,
    augment_with_inverses,
    build_filter_index,
    build_vocab,
    load_triples,
    read_vocab,
    write_triples,
    write_vocab,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint, score_tails_batch
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger("mdistmult")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; keys are flag names with or without leading dashes."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


# -- argument definitions ---------------------------------------------------


def _add_data_args(p, train_required=False):
    p.add_argument("--train", required=train_required, help="train split TSV")
    p.add_argument("--valid", help="valid split TSV")
    p.add_argument("--test", help="test split TSV")
    p.add_argument("--vocab", help="directory with entities.tsv/relations.tsv (default: directory of the split files)")


def _add_model_args(p, multi=False):
    if multi:
        p.add_argument("--n-modules", type=_int_list, default=[3], help="comma-separated module counts")
    else:
        p.add_argument("--n-modules", type=int, default=3, help="number of DistMult modules; 1 = plain DistMult")
    p.add_argument("--init-scale", type=float, default=None, help="uniform init bound (default 6/sqrt(dim))")
    p.add_argument("--seed", type=int, default=0)


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=None, help="number of epochs (required)")
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--loss", choices=("joint_softmax", "margin"), default="joint_softmax")


def _add_eval_args(p):
    p.add_argument("--mode", choices=("raw", "filtered"), default="filtered")
    p.add_argument("--filter-splits", default="train,valid,test", help="splits whose facts are filtered")
    p.add_argument("--tie-policy", choices=("average", "pessimistic"), default="average")
    p.add_argument("--hits", type=_int_list, default=[1, 3, 10])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdistmult", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build vocab and write inverse-augmented splits")
    _add_data_args(p, train_required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_args(p, train_required=True)
    p.add_argument("--dim", type=int, default=2000)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    p.add_argument("--out", default=".", help="directory for the training log")
    p.add_argument("--valid-every", type=int, default=0, help="log filtered valid MRR every k epochs")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("evaluate", help="rank test triples with a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    _add_eval_args(p)
    p.add_argument("--out", help="CSV file to append the metrics row to")

    p = sub.add_parser("predict", help="top-k tails for a (head, relation) query")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--filter", action="store_true", help="drop known true tails from the given splits")

    p = sub.add_parser("sweep", help="train and evaluate every (dim, N) combination")
    _add_data_args(p, train_required=True)
    p.add_argument("--dims", type=_int_list, required=False, default=None)
    _add_model_args(p, multi=True)
    _add_train_args(p)
    _add_eval_args(p)
    p.add_argument("--out", required=True, help="output directory for sweep.csv and checkpoints")
    p.add_argument("--jobs", type=int, default=1, help="cells trained concurrently")
    parser.subcommands = sub.choices
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse with precedence flag > config file > built-in default."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config_file(known.config)
        command = next((a for a in argv if a in parser.subcommands), None)
        if command is None:
            return parser.parse_args(argv)
        sub = parser.subcommands[command]
        dests = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in dests:
                raise UsageError(f"unknown config key {key!r} for command {command}")
            action = dests[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                try:
                    defaults[key] = action.type(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}")
            else:
                defaults[key] = raw
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults and action.required:
                action.required = False
    return parser.parse_args(argv)


# -- shared loading ---------------------------------------------------------


def _vocab_for(args) -> Vocab:
    paths = [getattr(args, s) for s in SPLITS if getattr(args, s, None)]
    vocab_dir = args.vocab or (str(Path(paths[0]).parent) if paths else None)
    if vocab_dir and (Path(vocab_dir) / "entities.tsv").exists():
        vocab = read_vocab(vocab_dir)
    elif args.vocab:
        raise DataError(f"no entities.tsv in vocab directory {args.vocab}")
    elif paths:
        vocab = build_vocab(paths)
    else:
        raise UsageError("need --vocab or at least one split file")
    return vocab if vocab.is_augmented else vocab.with_reverse_relations()


def _load_split(path, vocab: Vocab, split: str) -> TripleSet:
    ts = load_triples(path, vocab, split)
    if not ts.augmented:
        ts = augment_with_inverses(ts, vocab)
    return ts


def _load_splits(args, vocab: Vocab, names=SPLITS) -> dict[str, TripleSet]:
    return {s: _load_split(getattr(args, s), vocab, s) for s in names if getattr(args, s, None)}


def _filter_for(args, vocab: Vocab, splits: dict[str, TripleSet]):
    wanted = [s.strip() for s in args.filter_splits.split(",") if s.strip()]
    unknown = set(wanted) - set(SPLITS)
    if unknown:
        raise UsageError(f"unknown filter split(s): {', '.join(sorted(unknown))}")
    missing = [s for s in wanted if s not in splits]
    if missing:
        raise UsageError(f"--filter-splits names {', '.join(missing)} but no file was given for it")
    return build_filter_index([splits[s] for s in wanted])


def _require_epochs(args) -> int:
    if args.epochs is None:
        raise UsageError("--epochs is required")
    return args.epochs


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=_require_epochs(args),
        learning_rate=args.lr,
        batch_size=args.batch_size,
        dropout_p=args.dropout,
        l2_lambda=args.l2,
        seed=args.seed,
        loss_kind=args.loss,
    )


def _eval_config(args) -> EvalConfig:
    return EvalConfig(mode=args.mode, hits_levels=tuple(args.hits), tie_policy=args.tie_policy)


def _load_checkpoint(path):
    try:
        params, _ = load_checkpoint(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return params


def _check_compatible(params, vocab: Vocab) -> None:
    if params.entity_count != vocab.entity_count or params.relation_count != vocab.relation_count:
        raise DataError(
            f"checkpoint has {params.entity_count} entities / {params.relation_count} relations, "
            f"vocab has {vocab.entity_count} / {vocab.relation_count}"
        )


# -- commands ---------------------------------------------------------------


def cmd_prepare(args) -> int:
    paths = [getattr(args, s) for s in SPLITS if getattr(args, s)]
    for path in paths:
        if not Path(path).is_file():
            raise DataError(f"missing input file: {path}")
    out = Path(args.out)
    if (out / "relations.tsv").exists():
        raise DataError(f"{out} already holds prepared data; refusing to augment again")
    vocab = build_vocab(paths)
    if _has_reverse_relations(vocab):
        raise DataError("input relations already include reverse relations; refusing to augment again")
    full = vocab.with_reverse_relations()
    out.mkdir(parents=True, exist_ok=True)
    print(f"entities\t{full.entity_count}")
    print(f"relations\t{full.relation_count}")
    for split in SPLITS:
        path = getattr(args, split)
        if not path:
            continue
        ts = augment_with_inverses(load_triples(path, vocab, split), vocab)
        write_triples(out / f"{split}.tsv", ts, full)
        print(f"{split}_triples\t{len(ts)}")
    write_vocab(out, full)
    return EXIT_OK


def _has_reverse_relations(vocab: Vocab) -> bool:
    names = set(vocab.id_to_relation)
    return any(n.endswith("_reverse") and n[: -len("_reverse")] in names for n in names)


def cmd_train(args) -> int:
    config = _train_config(args)
    vocab = _vocab_for(args)
    splits = _load_splits(args, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    model_config = ModelConfig(
        dim=args.dim,
        module_count=args.n_modules,
        entity_count=vocab.entity_count,
        relation_count=vocab.relation_count,
        seed=args.seed,
        init_scale=args.init_scale,
    )
    filter_index = build_filter_index(splits.values()) if args.valid_every and "valid" in splits else None
    try:
        result = train(
            splits["train"],
            model_config,
            config,
            valid=splits.get("valid"),
            filter_index=filter_index,
            valid_every=args.valid_every,
            log_path=out / "train_log.csv",
            checkpoint_path=checkpoint,
            checkpoint_every=args.checkpoint_every,
        )
    except DivergenceError as exc:
        print(f"diverged: {exc}; last finite parameters saved to {checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    if result.log:
        print(f"final_loss\t{result.log[-1].mean_loss:.6f}")
    print(f"checkpoint\t{checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _eval_config(args)
    if not args.test:
        raise UsageError("--test is required")
    vocab = _vocab_for(args)
    params = _load_checkpoint(args.checkpoint)
    _check_compatible(params, vocab)
    splits = _load_splits(args, vocab)
    filter_index = _filter_for(args, vocab, splits) if config.mode == "filtered" else None
    report = evaluate(params, splits["test"], filter_index, config, vocab.base_relation_count)
    print(f"mode={config.mode}")
    print(report.to_text())
    if args.out:
        _append_csv(args.out, csv_header(config.hits_levels), csv_row(report, params.dim, params.module_count, config.mode))
    return EXIT_OK


def _append_csv(path, header, row) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        writer.writerow(row)


def _closest(name: str, names) -> list[str]:
    for cut in range(len(name), 0, -1):
        hits = sorted(n for n in names if n.startswith(name[:cut]))
        if hits:
            return hits[:5]
    return []


def _lookup(name: str, table: dict[str, int], kind: str) -> int:
    if name in table:
        return table[name]
    near = _closest(name, table)
    hint = f"; nearest: {', '.join(near)}" if near else ""
    raise DataError(f"unknown {kind} {name!r}{hint}")


def cmd_predict(args) -> int:
    vocab = _vocab_for(args)
    params = _load_checkpoint(args.checkpoint)
    _check_compatible(params, vocab)
    h = _lookup(args.head, vocab.entity_to_id, "entity")
    r = _lookup(args.relation, vocab.relation_to_id, "relation")
    scores = score_tails_batch(params, [h], [r])[0]
    candidates = np.arange(vocab.entity_count)
    if args.filter:
        splits = _load_splits(args, vocab)
        known = build_filter_index(splits.values()).tails(h, r)
        candidates = np.setdiff1d(candidates, known)
    k = args.topk
    if k < 1:
        raise UsageError("--topk must be >= 1")
    if k > len(candidates):
        log.warning("topk %d exceeds %d candidates; truncating", k, len(candidates))
        k = len(candidates)
    order = candidates[np.argsort(-scores[candidates], kind="stable")][:k]
    for e in order:
        print(f"{vocab.id_to_entity[e]}\t{scores[e]:.6f}")
    return EXIT_OK


def _sweep_cell(dim, n_modules, args_dict, vocab, splits, filter_index, out):
    args = argparse.Namespace(**args_dict)
    config = _train_config(args)
    eval_config = _eval_config(args)
    model_config = ModelConfig(
        dim=dim,
        module_count=n_modules,
        entity_count=vocab.entity_count,
        relation_count=vocab.relation_count,
        seed=args.seed,
        init_scale=args.init_scale,
    )
    checkpoint = Path(out) / f"ckpt_d{dim}_n{n_modules}.ckpt"
    result = train(splits["train"], model_config, config, checkpoint_path=checkpoint)
    report = evaluate(result.params, splits["test"], filter_index, eval_config, vocab.base_relation_count)
    return csv_row(report, dim, n_modules, eval_config.mode)


def _dedupe(values: list[int], what: str) -> list[int]:
    seen = list(dict.fromkeys(values))
    if len(seen) != len(values):
        log.warning("duplicate %s removed: %s", what, values)
    return seen


def cmd_sweep(args) -> int:
    _require_epochs(args)
    if not args.dims:
        raise UsageError("--dims is required")
    if not args.test:
        raise UsageError("--test is required")
    dims = _dedupe(args.dims, "dims")
    modules = _dedupe(args.n_modules, "module counts")
    eval_config = _eval_config(args)
    vocab = _vocab_for(args)
    splits = _load_splits(args, vocab)
    filter_index = _filter_for(args, vocab, splits) if eval_config.mode == "filtered" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    header = csv_header(eval_config.hits_levels) + ["error"]
    width = len(header) - 4
    cells = [(d, n) for n in modules for d in dims]
    args_dict = vars(args).copy()

    def failed(d, n, exc):
        log.error("cell dim=%d N=%d failed: %s", d, n, exc)
        return [str(d), str(n), eval_config.mode] + [""] * width + [f"{type(exc).__name__}: {exc}"]

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        fh.flush()
        if args.jobs <= 1:
            for d, n in cells:
                try:
                    row = _sweep_cell(d, n, args_dict, vocab, splits, filter_index, out) + [""]
                except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                    row = failed(d, n, exc)
                writer.writerow(row)
                fh.flush()
        else:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = {
                    pool.submit(_sweep_cell, d, n, args_dict, vocab, splits, filter_index, out): (d, n)
                    for d, n in cells
                }
                for fut in as_completed(futures):
                    d, n = futures[fut]
                    try:
                        row = fut.result() + [""]
                    except Exception as exc:  # noqa: BLE001
                        row = failed(d, n, exc)
                    writer.writerow(row)
                    fh.flush()
    print(f"sweep\t{csv_path}\t{len(cells)} cells")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("KGE_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IndexError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
