"""Command-line entry point: ``tsdg {generate-toy,train,lodo,bound-terms,hp-sample}``.

Every text artifact starts with a ``# config_hash: <hash>`` line (JSONL files
start with a ``{"config_hash": ...}`` record). Result tables are written in
(target, seed, method) order and exclude wall-clock time, so a rerun with the
same config reproduces them byte for byte; timings live in ``results.jsonl``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .config import ConfigError, RunConfig, parse_bool, parse_config, write_config
from .datasets import DatasetFormatError, DatasetIntegrityError, DomainDataset, generate_toy, read_dataset, write_dataset
from .models import load_checkpoint, save_checkpoint
from .trainer import (
    ERM,
    ExperimentData,
    RunOutcome,
    TrainingDivergedError,
    TrainResult,
    default_backbone,
    run_bound_terms,
    run_one,
    sample_hyperparameters,
    streams,
)

log = logging.getLogger("tsdg")

RESULT_COLUMNS = (
    "target", "seed", "method", "lambda", "xi", "similarity_mode",
    "accuracy", "ece", "auc", "source_val_accuracy", "iterations",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _header(cfg_hash: str) -> str:
    return f"# config_hash: {cfg_hash}\n"


def write_tsv(path: Path, cfg_hash: str, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write(_header(cfg_hash))
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            values = [row.get(c) for c in columns] if isinstance(row, dict) else row
            fh.write("\t".join(_fmt(v) for v in values) + "\n")


def write_jsonl(path: Path, cfg_hash: str, records) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"config_hash": cfg_hash}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# dataset / run plumbing -------------------------------------------------------

def load_dataset(cfg: RunConfig) -> DomainDataset:
    source = cfg.get("data", "source")
    if source == "toy":
        return generate_toy(seed=streams(int(cfg.get("data", "toy_seed")))["toy"])
    return read_dataset(source)


def resolve_targets(cfg: RunConfig, dataset: DomainDataset, lodo: bool) -> list[int]:
    target = cfg.target
    if lodo or target == "all":
        if not lodo:
            raise ConfigError("target 'all' runs every domain; use the lodo subcommand")
        return list(dataset.domain_ids)
    if target == "last":
        return [dataset.domain_ids[-1]]
    try:
        return [dataset.domain_id(target)]
    except KeyError as exc:
        raise ConfigError(f"run.target: {exc.args[0]}") from None


def _methods(cfg: RunConfig, dataset: DomainDataset) -> dict:
    def resolve_domain(name):
        try:
            return dataset.domain_id(name)
        except KeyError as exc:
            raise ConfigError(f"method.clusters: {exc.args[0]}") from None

    method = cfg.method(resolve_domain)
    methods = {}
    if parse_bool(cfg.get("run", "with_erm")):
        methods["erm"] = ERM
    methods[method.similarity if method.active else "erm"] = method
    return methods


def _backbone(cfg: RunConfig):
    kwargs = {}
    hidden = cfg.get("model", "hidden_dim")
    if hidden:
        kwargs["hidden_dim"] = int(hidden)
    return default_backbone(cfg.get("model", "backbone"), **kwargs)


def run_experiment(cfg: RunConfig, lodo: bool = False, bound_terms: bool | None = None) -> list[RunOutcome]:
    """Train every (target, seed, method), write all artifacts to ``cfg.out``."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    write_config(cfg, out / "config.ini")
    dataset = load_dataset(cfg)
    targets = resolve_targets(cfg, dataset, lodo)
    methods = _methods(cfg, dataset)
    schedule = cfg.schedule()
    augmentation = cfg.augmentation()
    backbone = _backbone(cfg)
    n_bins = int(cfg.get("report", "ece_bins"))
    val_fraction = float(cfg.get("run", "val_fraction"))

    outcomes = []
    for target in targets:
        for seed in cfg.seeds:
            for name, method in methods.items():
                log.info("training target=%s seed=%d method=%s", dataset.domain_names[target], seed, name)
                try:
                    outcomes.append(
                        run_one(dataset, target, seed, method, schedule, augmentation, backbone, name, val_fraction, n_bins)
                    )
                except TrainingDivergedError as exc:
                    raise TrainingDivergedError(f"target={dataset.domain_names[target]} seed={seed} method={name}: {exc}") from exc
    names = dataset.domain_names
    write_results(out, h, outcomes, names)
    write_logs(out, h, outcomes, names, n_bins, cfg.report_flag("reliability"))
    if cfg.report_flag("checkpoints"):
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        for o in outcomes:
            save_checkpoint(o.result.model, ckdir / checkpoint_name(names[o.target], o.seed, o.method), h)
    if bound_terms if bound_terms is not None else cfg.report_flag("bound_terms"):
        write_bound_terms(out, h, outcomes, names)
    return outcomes


def checkpoint_name(target: str, seed: int, method: str) -> str:
    return f"model_{target}_{seed}_{method}.npz"


def write_results(out: Path, h: str, outcomes: list[RunOutcome], names) -> None:
    rows = [o.row(names[o.target]) for o in outcomes]
    write_tsv(out / "results.tsv", h, RESULT_COLUMNS, rows + _average_rows(rows))
    write_jsonl(out / "results.jsonl", h, rows)


def _average_rows(rows: list[dict]) -> list[dict]:
    """Per-(target, method) and per-method means over seeds."""
    out = []
    keys = ("accuracy", "ece", "auc", "source_val_accuracy")

    def mean_row(group, target):
        first = group[0]
        row = {c: first[c] for c in ("method", "lambda", "xi", "similarity_mode")}
        row.update(target=target, seed="mean", iterations=float(np.mean([g["iterations"] for g in group])))
        for k in keys:
            vals = [g[k] for g in group]
            row[k] = None if any(v is None for v in vals) else float(np.mean(vals))
        return row

    targets = list(dict.fromkeys(r["target"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for t in targets:
        for m in methods:
            group = [r for r in rows if r["target"] == t and r["method"] == m]
            if group:
                out.append(mean_row(group, t))
    if len(targets) > 1:
        for m in methods:
            out.append(mean_row([r for r in rows if r["method"] == m], "all"))
    return out


def write_logs(out: Path, h: str, outcomes, names, n_bins: int, reliability: bool) -> None:
    losses, refreshes, rel = [], [], []
    for o in outcomes:
        t = names[o.target]
        for r in o.result.losses:
            losses.append((t, o.seed, o.method, r.iteration, r.lr, r.batch_per_domain, r.weight_decay, r.ce, r.omega, r.lam_omega, r.total))
        for r in o.result.refreshes:
            refreshes.append({
                "target": t, "seed": o.seed, "method": o.method, "iteration": r.iteration,
                "nn": {names[d]: (names[n] if n is not None else None) for d, n in r.nn.items()},
                "domains": [names[d] for d in o.data.sources],
                "weights": r.weights,
            })
        if reliability:
            tx, ty = o.data.target()
            for mid, count, acc, conf in metrics.reliability_rows(o.result.model.predict_proba(tx), ty, n_bins):
                rel.append((t, o.seed, o.method, mid, count, acc, conf))
    cols = ("target", "seed", "method", "iteration", "lr", "batch_per_domain", "weight_decay", "ce", "omega", "lambda_omega", "total")
    write_tsv(out / "losses.tsv", h, cols, losses)
    write_jsonl(out / "refreshes.jsonl", h, refreshes)
    if reliability:
        write_tsv(out / "reliability.tsv", h, ("target", "seed", "method", "bin_mid", "count", "accuracy", "confidence"), rel)


def write_bound_terms(out: Path, h: str, outcomes, names) -> None:
    rows = []
    for o in outcomes:
        bt = run_bound_terms(o)
        for source, risk, div in bt.rows():
            rows.append((names[o.target], o.seed, o.method, source, risk, div, bt.target_risk))
    cols = ("target", "seed", "method", "source", "source_risk", "h_divergence", "target_risk")
    write_tsv(out / "bound_terms.tsv", h, cols, rows)


def bound_terms_from_checkpoints(cfg: RunConfig, run_dir: Path) -> None:
    """Recreate each run's splits from its seed, load the saved model and report bound terms."""
    dataset = load_dataset(cfg)
    names = dataset.domain_names
    outcomes = []
    val_fraction = float(cfg.get("run", "val_fraction"))
    for path in sorted((run_dir / "checkpoints").glob("model_*.npz")):
        _, target, seed, method = path.stem.split("_", 3)
        tid, seed = dataset.domain_id(target), int(seed)
        data = ExperimentData(dataset, tid, streams(seed)["split"], val_fraction)
        model = load_checkpoint(path)
        outcomes.append(RunOutcome(tid, seed, method, None, TrainResult(model), 0.0, 0.0, None, 0.0, data))
    if not outcomes:
        raise FileNotFoundError(f"no checkpoints under {run_dir / 'checkpoints'}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_bound_terms(cfg.out, cfg.hash, outcomes, names)


# argument parsing ---------------------------------------------------------------

def _overrides(args) -> dict:
    o: dict[str, dict[str, str]] = {}

    def put(section, key, val):
        if val is not None:
            o.setdefault(section, {})[key] = str(val)

    put("run", "target", getattr(args, "target", None))
    put("run", "seeds", getattr(args, "seed", None))
    put("run", "out", getattr(args, "out", None))
    put("method", "lambda", getattr(args, "lam", None))
    put("method", "xi", getattr(args, "xi", None))
    put("method", "similarity", getattr(args, "similarity", None))
    put("method", "clusters", getattr(args, "clusters", None))
    put("augment", "enabled", getattr(args, "augment", None))
    put("data", "source", getattr(args, "data", None))
    put("schedule", "iterations", getattr(args, "iterations", None))
    return o


def _run_flags(p: argparse.ArgumentParser, default=None) -> None:
    # subcommands use SUPPRESS so they do not clobber flags given before the subcommand
    p.argument_default = default
    p.add_argument("--config", type=Path, help="sectioned INI config file")
    p.add_argument("--target", help="domain name or id, 'last', or 'all'")
    p.add_argument("--seed", help="seed or comma-separated seeds")
    p.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    p.add_argument("--xi", type=float, help="RBF width for learned similarity")
    p.add_argument("--similarity", choices=("none", "metadata", "learned", "uniform_all"))
    p.add_argument("--clusters", help="cluster map for metadata mode, e.g. 'A,B;C'")
    p.add_argument("--augment", choices=("on", "off"))
    p.add_argument("--data", help="'toy' or a dataset directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsdg", description="Selective consistency regularization for time-series domain generalization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--mode", choices=("train", "lodo", "bound-terms"), help="alternative to a subcommand")
    _run_flags(parser)
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("generate-toy", help="write the toy dataset in the portable file format")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    for name, text in (("train", "train on one held-out target"), ("lodo", "leave-one-domain-out sweep")):
        _run_flags(sub.add_parser(name, help=text), argparse.SUPPRESS)

    b = sub.add_parser("bound-terms", help="source risks, H-divergences and target risk")
    _run_flags(b, argparse.SUPPRESS)
    b.add_argument("--from", dest="from_dir", type=Path, help="reuse checkpoints from a finished train run")

    h = sub.add_parser("hp-sample", help="draw (lambda, xi) pairs")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("-n", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command or args.mode
    if command is None:
        parser.print_usage(sys.stderr)
        print("tsdg: error: give a subcommand or --mode", file=sys.stderr)
        return 2
    try:
        if command == "generate-toy":
            ds = generate_toy(seed=streams(args.seed)["toy"])
            write_dataset(ds, args.out)
            print(f"wrote {len(ds.y)} samples to {args.out}")
            return 0
        if command == "hp-sample":
            rng = streams(args.seed)["hp"]
            print("lambda\txi")
            for _ in range(args.n):
                lam, xi = sample_hyperparameters(rng)
                print(f"{lam!r}\t{xi!r}")
            return 0
        cfg = parse_config(args.config, _overrides(args))
        if command == "bound-terms" and getattr(args, "from_dir", None) is not None:
            bound_terms_from_checkpoints(cfg, args.from_dir)
        else:
            run_experiment(cfg, lodo=command == "lodo", bound_terms=True if command == "bound-terms" else None)
        print(f"results written to {cfg.out} (config_hash {cfg.hash})")
        return 0
    except (ConfigError, DatasetFormatError, DatasetIntegrityError) as exc:
        print(f"tsdg: configuration error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"tsdg: training diverged: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"tsdg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
