"""Command-line entry point: ``cogcl <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from cogcl import data as data_mod
from cogcl.compute import CheckpointError, load_checkpoint
from cogcl.encoder import base_representations
from cogcl.evaluation import sparsity_group_report
from cogcl.graph import build_augmented_pair, build_base_graph, dump_graph
from cogcl.quantizer import refresh_codes
from cogcl.trainer import TrainConfig, evaluate_store, init_parameters, train

log = logging.getLogger("cogcl")

VARIANTS = {
    "wo_A": ("no_alignment", "no_alignment"),
    "wo_U": ("no_uniformity", "no_uniformity"),
    "wo_AA": ("no_alignment", "none"),
    "wo_AU": ("no_uniformity", "none"),
    "wo_SA": ("none", "no_alignment"),
    "wo_SU": ("none", "no_uniformity"),
}


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


# ---- config -----------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _field_type(name: str):
    default = _FIELDS[name].default
    return type(default)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    out = {}
    for k, v in raw.items():
        t = _field_type(k)
        if t is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, t) or (t is int and isinstance(v, bool)):
            raise UsageError(f"{path}: {k} must be {t.__name__}, got {v!r}")
        out[k] = v
    return out


def build_config(args) -> TrainConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def write_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file of training options (flags override it)")
    g = p.add_argument_group("training options")
    for name, f in _FIELDS.items():
        flag = "--" + name.replace("_", "-")
        t = type(f.default)
        if t is bool:
            g.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=name, type=t, default=None, metavar=t.__name__.upper())


# ---- helpers ---------------------------------------------------------------

def _emit(records) -> None:
    for r in records:
        print(json.dumps(r, sort_keys=True))


def _load_ds(path):
    try:
        return data_mod.load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(checkpoint, ds):
    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    store, meta = load_checkpoint(path)
    cfg = TrainConfig(**meta["config"])
    if meta.get("num_users") != ds.num_users or meta.get("num_items") != ds.num_items:
        raise UsageError("checkpoint does not match the dataset's user/item counts")
    return store, cfg, meta


def _write_rows(path: Path, rows: np.ndarray, fmt) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for idx, row in enumerate(rows):
            fh.write(str(idx) + "\t" + "\t".join(fmt(x) for x in row) + "\n")


# ---- subcommands -----------------------------------------------------------

def cmd_prepare(args) -> int:
    if not Path(args.input).is_file():
        raise UsageError(f"input file not found: {args.input}")
    ratios = tuple(float(x) for x in args.ratios.split(","))
    raw = data_mod.load_interactions(args.input, args.format)
    k_user = args.k_user if args.k_user is not None else args.k_core
    k_item = args.k_item if args.k_item is not None else args.k_core
    raw = data_mod.k_core_filter(raw, k_user, k_item)
    ds = data_mod.split_dataset(raw, ratios, args.seed)
    data_mod.save_dataset(ds, args.out)
    s = ds.stats()
    print(f"{'Dataset':<16}{'#Users':>10}{'#Items':>10}{'#Interactions':>15}{'Sparsity':>11}")
    print(f"{Path(args.out).name:<16}{s['users']:>10,}{s['items']:>10,}{s['interactions']:>15,}"
          f"{s['sparsity']:>10.3%}")
    print(f"split train/valid/test: {len(ds.train)}/{len(ds.valid)}/{len(ds.test)}")
    return 0


def _train_and_report(ds, cfg, out: Path | None, label: str | None = None):
    result = train(ds, cfg, out)
    graph = build_base_graph(ds)
    test = evaluate_store(result.store, ds, graph, cfg, "test")
    recs = test.records("test", result.best_epoch)
    if label is not None:
        for r in recs:
            r["variant"] = label
    return result, recs


def cmd_train(args) -> int:
    ds = _load_ds(args.data)
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.toml")
    _, recs = _train_and_report(ds, cfg, out)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _emit(recs)
    return 0


def cmd_evaluate(args) -> int:
    ds = _load_ds(args.data)
    store, cfg, meta = _load_model(args.checkpoint, ds)
    graph = build_base_graph(ds)
    m = evaluate_store(store, ds, graph, cfg, args.split)
    _emit(m.records(args.split, meta.get("epoch")))
    if args.groups:
        for g in sparsity_group_report(m, ds, args.groups):
            _emit(dataclasses.replace(m, recall=g["recall"], ndcg=g["ndcg"]).records(
                args.split, meta.get("epoch"), group=g["group"]))
    return 0


def cmd_export_embeddings(args) -> int:
    ds = _load_ds(args.data)
    store, cfg, _ = _load_model(args.checkpoint, ds)
    z = base_representations(store, build_base_graph(ds), cfg.encoder())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "user_embeddings.tsv", z[:ds.num_users], lambda x: repr(float(x)))
    _write_rows(out / "item_embeddings.tsv", z[ds.num_users:], lambda x: repr(float(x)))
    return 0


def _codes_for(store, cfg, ds, epoch=0):
    if not cfg.cogcl:
        raise UsageError("checkpoint was trained without codebooks (mode lightgcn_baseline)")
    return refresh_codes(store, build_base_graph(ds), cfg.encoder(), cfg.quantizer(), epoch)


def cmd_export_codes(args) -> int:
    ds = _load_ds(args.data)
    store, cfg, _ = _load_model(args.checkpoint, ds)
    codes = _codes_for(store, cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "user_codes.tsv", codes.user_codes, str)
    _write_rows(out / "item_codes.tsv", codes.item_codes, str)
    return 0


def cmd_dump_graph(args) -> int:
    ds = _load_ds(args.data)
    if args.checkpoint:
        store, cfg, _ = _load_model(args.checkpoint, ds)
    else:
        cfg = build_config(args)
        store = init_parameters(ds, cfg)
    if args.which == "base":
        graph = build_base_graph(ds)
    else:
        pair = build_augmented_pair(ds, _codes_for(store, cfg, ds, args.epoch),
                                    cfg.augmentation(), args.epoch)
        graph = pair.graph1 if args.which == "aug1" else pair.graph2
    dump_graph(graph, args.out)
    return 0


def cmd_analyze(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    ds = _load_ds(args.data)
    cfg = build_config(args)
    if not cfg.cogcl:
        raise UsageError("analyze needs mode cogcl")
    aug, sim = VARIANTS[args.variant]
    variant_cfg = dataclasses.replace(cfg, grad_stop_aug=aug, grad_stop_sim=sim)
    out = Path(args.out) if args.out else None
    runs = [("cogcl", cfg), (args.variant, variant_cfg)]
    for label, c in runs:
        run_dir = out / label if out else None
        if run_dir:
            run_dir.mkdir(parents=True, exist_ok=True)
            write_config(c, run_dir / "config.toml")
        _, recs = _train_and_report(ds, c, run_dir, label)
        _emit(recs)
    return 0


# ---- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cogcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="filter, split and save a raw interaction file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("tsv", "csv"))
    s.add_argument("--k-core", type=int, default=5)
    s.add_argument("--k-user", type=int)
    s.add_argument("--k-item", type=int)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model and report test metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="full-ranking metrics of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--groups", type=int, default=0, help="also report N sparsity groups")
    s.set_defaults(func=cmd_evaluate)

    for name, func, what in (("export-embeddings", cmd_export_embeddings, "user/item representations"),
                             ("export-codes", cmd_export_codes, "user/item discrete codes")):
        s = sub.add_parser(name, help=f"write {what} as TSV")
        s.add_argument("--data", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("analyze", help="train unmodified and gradient-stopped variants")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", required=True)
    s.add_argument("--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("dump-graph", help="write a base or augmented graph as an edge list")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--which", choices=("base", "aug1", "aug2"), default="aug1")
    s.add_argument("--epoch", type=int, default=1)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_dump_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cogcl: error: {exc}", file=sys.stderr)
        return 2
    except (data_mod.DataError, CheckpointError, OSError, FloatingPointError, ValueError) as exc:
        print(f"cogcl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
