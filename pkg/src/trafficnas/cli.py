"""Command-line entry point.

Exit codes: 0 success; 1 config or I/O error; 2 unlabeled capture or no
inputs (argparse usage errors also exit 2); 3 capture parse error; 4 invalid
genome; 5 no feasible genome; 6 model/dataset class-count mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .cost import Thresholds, check_constraints, estimate_cost
from .nn import load_model, save_model
from .pcap import PcapError
from .report import ReportRow, comparison_report, confusion, load_baselines, metrics
from .search import NoFeasibleGenome, run_search
from .sessions import ClassTooSmall, Dataset, DatasetFormatError, LabelMap, UnlabeledFile, build_dataset, stratified_split
from .space import GenomeParseError, ShapeError, validate, Genome

logger = logging.getLogger("trafficnas")

EXIT_CONFIG = 1
EXIT_UNLABELED = 2
EXIT_PARSE = 3
EXIT_GENOME = 4
EXIT_INFEASIBLE = 5
EXIT_CLASSES = 6


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, args.set)
    if not args.inputs:
        return _fail(EXIT_UNLABELED, "no input captures given")
    labelmap_path = args.labelmap or cfg.labelmap
    label_map = LabelMap.load(labelmap_path) if labelmap_path else LabelMap.default()
    try:
        result = build_dataset(args.inputs, label_map, keep_ipv6=cfg.keep_ipv6)
    except UnlabeledFile as exc:
        return _fail(EXIT_UNLABELED, str(exc))
    except PcapError as exc:
        return _fail(EXIT_PARSE, str(exc))
    result.dataset.save(args.out, result.dropped_per_class())
    print(result.summary())
    print(f"wrote {len(result.dataset)} sessions to {args.out}")
    return 0


def _read_genome(path) -> Genome:
    g = Genome.from_text(Path(path).read_text())
    validate(g)
    return g


def cmd_cost(args) -> int:
    try:
        g = _read_genome(args.genome)
    except (GenomeParseError, ShapeError, ValueError) as exc:
        return _fail(EXIT_GENOME, f"invalid genome: {exc}")
    report = estimate_cost(g)
    print(report.render())
    print()
    print(report.key_values())
    if args.thresholds:
        try:
            d, r, f = (None if v.strip().lower() in ("", "none", "-") else int(v)
                       for v in args.thresholds.split(","))
            t = Thresholds(d, r, f)
        except ValueError:
            return _fail(EXIT_CONFIG, "--thresholds wants PARAMS,TENSOR,FLOPS (use 'none' to skip one)")
        violations = check_constraints(report, t)
        for name, value, limit in (("params", report.params, t.d_th),
                                   ("max_tensor", report.max_tensor, t.r_th),
                                   ("flops", report.flops, t.flops_th)):
            if limit is None:
                print(f"{name}: unconstrained")
            else:
                status = "violation" if any(v.quantity == name for v in violations) else "pass"
                print(f"{name}: {status} ({value} < {limit})")
        print("constraints: " + ("pass" if not violations else "violation"))
    return 0


def _splits(ds: Dataset, cfg):
    return stratified_split(ds, cfg.test_frac, cfg.val_frac, cfg.seed)


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = Dataset.load(args.dataset)
    train, val, _ = _splits(ds, cfg)
    scfg = cfg.search_config(num_classes=ds.num_classes)
    if args.jobs:
        scfg.jobs = args.jobs
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "search.log"
    try:
        best, log = run_search(scfg, ((train.scaled(), train.labels), (val.scaled(), val.labels)))
    except NoFeasibleGenome as exc:
        return _fail(EXIT_INFEASIBLE, str(exc))
    log_path.write_text(log.to_text())
    (out / "best.genome").write_text(best.genome.to_text())
    save_model(out / "best.model", best.network())
    print(best.genome.to_text(), end="")
    print(best.cost.render())
    print(f"val_acc={best.val_accuracy:.4f} trained={len(log.trained())} log={log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    net = load_model(args.model)
    ds = Dataset.load(args.dataset)
    if ds.num_classes != net.num_classes:
        return _fail(EXIT_CLASSES, f"model has {net.num_classes} classes, dataset {ds.num_classes}")
    if args.split == "all":
        part = ds
    else:
        part = dict(zip(("train", "val", "test"), _splits(ds, cfg)))[args.split]
    if args.split != "test":
        print(f"warning: evaluating on the '{args.split}' split, which is not held out from training")
    pred = net.predict(part.scaled())
    cm = confusion(part.labels, pred, ds.num_classes)
    report = metrics(cm, args.averaging)
    print(report.render(ds.class_names))
    print()
    print(cm.render(ds.class_names))
    if args.baselines:
        rows = [ReportRow.from_metrics("ours", estimate_cost(net.genome), report)]
        rows += load_baselines(args.baselines)
        _print_tables(comparison_report(rows, 0), args.csv)
    return 0


def _print_tables(tables, as_csv: bool) -> None:
    print()
    print(tables.to_csv() if as_csv else tables.render())


def cmd_report(args) -> int:
    rows = load_baselines(args.baselines)
    if args.model:
        net = load_model(args.model)
        rows.insert(0, ReportRow(args.name, estimate_cost(net.genome)))
    idx = next((i for i, r in enumerate(rows) if r.name == args.ours), None) if args.ours else 0
    if idx is None:
        return _fail(EXIT_CONFIG, f"no row named {args.ours!r}")
    _print_tables(comparison_report(rows, idx), args.csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficnas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    sp = with_config(sub.add_parser("preprocess", help="pcap files -> session dataset"))
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--out", required=True, help="dataset file to write")
    sp.add_argument("--labelmap", help="label map INI (default: packaged 11-class map)")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("cost", help="hardware cost report for a genome file")
    sp.add_argument("genome")
    sp.add_argument("--thresholds", metavar="PARAMS,TENSOR,FLOPS")
    sp.set_defaults(func=cmd_cost)

    sp = with_config(sub.add_parser("search", help="run the evolutionary search"))
    sp.add_argument("dataset")
    sp.add_argument("--out", help="output directory (default: [paths] out_dir)")
    sp.add_argument("--jobs", type=int, help="concurrent candidate evaluations")
    sp.set_defaults(func=cmd_search)

    sp = with_config(sub.add_parser("eval", help="metrics of a trained model on one split"))
    sp.add_argument("model")
    sp.add_argument("dataset")
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--averaging", choices=("weighted", "macro"), default="weighted")
    sp.add_argument("--baselines", help="baseline rows CSV for the comparison tables")
    sp.add_argument("--csv", action="store_true", help="emit tables as CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="raw and ratio comparison tables")
    sp.add_argument("--baselines", help="baseline rows CSV (default: packaged published rows)")
    sp.add_argument("--model", help="add a trained model as the reference row")
    sp.add_argument("--name", default="ours", help="row name for --model")
    sp.add_argument("--ours", help="name of the reference row (default: first row)")
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config: {exc}")
    except (DatasetFormatError, ClassTooSmall) as exc:
        return _fail(EXIT_CONFIG, f"dataset: {exc}")
    except OSError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
