"""Command-line interface: gen, train, eval, bench, hist, oracle.

Every command prints a run manifest (JSON) on stdout. Exit status is 0 on
success, 2 for usage errors and 3 for data errors.
"""
import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from backend import config as app_config
from backend import formats, workers
from backend.datagen import SyntheticSpec, gibbs_chain, sample_structure
from backend.evalx import cross_validate, evaluate, histogram, make_splits, summarize
from backend.induction import Thresholds, build_signal_error_table
from backend.mean_field import cd_sweep_batch, mf_converge_batch
from backend.model import Dataset, Feature, FeatureError, FeatureKind, SchemaError
from backend.oracle import EnumerationTooLarge, exact_conditional, exact_marginals
from backend.trainer import TrainConfig, TrainMode, train

logger = logging.getLogger(__name__)

DEBUG_MODE = os.environ.get("CRF_CFI_DEBUG", "0") == "1"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

BENCH_COLUMNS = ["method", "nodes", "threshold", "fold", "time", "cll", "auc", "error_rate",
                 "introduced", "active", "scored_pairs", "iterations"]


class UsageError(Exception):
    """Invalid flag combination detected after parsing."""
    pass


def setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose or DEBUG_MODE else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_list(kind: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e))
    return parse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--threads", type=int, default=None, help="worker cap, 0 = one per CPU")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def _add_training(p: argparse.ArgumentParser) -> None:
    # None means "take the config file value"
    p.add_argument("--l1", type=float, default=None, help="L1 strength (config default 2)")
    p.add_argument("--l2", type=float, default=None, help="L2 strength (config default 1)")
    p.add_argument("--batch", type=int, default=None, help="features added per iteration")
    p.add_argument("--t-err", dest="t_err", type=float, default=None, help="error threshold")
    p.add_argument("--t-sig", dest="t_sig", type=float, default=None, help="signal threshold")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    p.add_argument("--staging", choices=["merged", "two-stage"], default=None)


def _add_synthetic(p: argparse.ArgumentParser, nodes_required: bool) -> None:
    if nodes_required:
        p.add_argument("--nodes", type=int, required=True, help="number of variables N")
    p.add_argument("--degree", type=float, default=5.0, help="mean degree K (default: %(default)s)")
    p.add_argument("--samples", type=int, default=200, help="instances M (default: %(default)s)")
    p.add_argument("--burnin", type=int, default=10000, help="burn-in sweeps (default: %(default)s)")
    p.add_argument("--thinning", type=int, default=1000, help="sweeps between samples (default: %(default)s)")
    p.add_argument("--weight-lo", dest="weight_lo", type=float, default=-5.0)
    p.add_argument("--weight-hi", dest="weight_hi", type=float, default=5.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crf-cfi", description="Sparse CRF structure learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a synthetic network and a Gibbs dataset")
    _add_synthetic(p, nodes_required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=[m.value for m in TrainMode], default="cfi")
    p.add_argument("--truth", help="truth model file (truegraph mode)")
    _add_training(p)
    p.add_argument("--record-timings", dest="record_timings", action="store_true",
                   help="write wall times into the trace")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="cross-validated hidden-label evaluation of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="train and evaluate several methods per fold")
    p.add_argument("--data", help="dataset file; otherwise one is generated per --nodes-list entry")
    p.add_argument("--truth", help="truth model file for the truegraph method")
    p.add_argument("--nodes-list", dest="nodes_list", type=_csv_list(int), default=None)
    p.add_argument("--threshold-list", dest="threshold_list", type=_csv_list(float), default=None)
    p.add_argument("--methods", type=_csv_list(str), default=["full", "grafting", "cfi"])
    p.add_argument("--folds", type=int, default=None)
    _add_synthetic(p, nodes_required=False)
    _add_training(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("hist", help="signal and error histograms of one inference pass")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bin-width", dest="bin_width", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(handler=cmd_hist)

    p = sub.add_parser("oracle", help="exact marginals and ln Z for one instance")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", type=int, default=0)
    _add_common(p)
    p.set_defaults(handler=cmd_oracle)
    return parser


def _manifest(command: str, args: argparse.Namespace, **sections) -> Dict[str, Any]:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "command")}
    manifest = {"command": command, "flags": flags, "versions": versions()}
    manifest.update(sections)
    return manifest


def _train_config(args: argparse.Namespace, config: Dict[str, Any], mode: str) -> TrainConfig:
    try:
        return TrainConfig.from_config(
            config, mode=mode, l1=args.l1, l2=args.l2, batch_size=args.batch, t_err=args.t_err,
            t_sig=args.t_sig, max_iterations=args.max_iters, seed=args.seed, staging=args.staging)
    except ValueError as e:
        raise UsageError(str(e))


def _check_folds(data: Dataset, folds: int) -> None:
    if data.values.size < folds:
        raise UsageError(f"--folds {folds} exceeds the {data.values.size} label slots of the data")


def _truth_features(path: Optional[str]) -> Optional[List[Feature]]:
    if path is None:
        return None
    return [f for f in formats.read_model(path).features if f.kind is not FeatureKind.UNARY]


def _spec(args: argparse.Namespace, nodes: int) -> SyntheticSpec:
    try:
        return SyntheticSpec(nodes, args.degree, args.samples, args.burnin, args.thinning,
                             args.weight_lo, args.weight_hi, args.seed)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_gen(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    spec = _spec(args, args.nodes)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    network = sample_structure(spec)
    t1 = time.perf_counter()
    data = gibbs_chain(network.model, spec)
    t2 = time.perf_counter()
    artifacts = [
        str(formats.write_model(network.model, out / "truth.json")),
        str(formats.write_dataset(data, out / "data.jsonl")),
        str(formats.write_edges(network.edge_rows(), out / "edges.csv")),
    ]
    return _manifest("gen", args, artifacts=artifacts,
                     seeds={"seed": spec.seed, "phases": ["structure", "weights", "chain"]},
                     timings={"structure": t1 - t0, "chain": t2 - t1},
                     summary={"nodes": spec.n_nodes, "edges": len(network.edges),
                              "instances": len(data), "sweeps": spec.chain_length})


def cmd_train(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    if args.mode == TrainMode.FULL.value:
        ignored = [name for name in ("batch", "t_err", "t_sig") if getattr(args, name) is not None]
        if ignored:
            logger.warning("full mode ignores %s", ", ".join("--" + n.replace("_", "-") for n in ignored))
    if args.mode == TrainMode.TRUEGRAPH.value and args.truth is None:
        raise UsageError("--mode truegraph needs --truth")
    cfg = _train_config(args, config, args.mode)
    data = formats.read_dataset(args.data)
    features = _truth_features(args.truth)
    out = _out_dir(args.out)
    start = time.perf_counter()
    model, trace = train(data, cfg, features=features, threads=args.threads)
    elapsed = time.perf_counter() - start
    artifacts = [
        str(formats.write_model(model, out / "model.json")),
        str(formats.write_jsonl(trace.rows(args.record_timings), out / "trace.jsonl")),
    ]
    summary = trace.summary()
    summary["time_seconds"] = elapsed
    return _manifest("train", args, config=cfg.as_dict(), seeds={"seed": cfg.seed},
                     artifacts=artifacts, timings={"train": elapsed}, summary=summary)


def cmd_eval(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    folds = args.folds if args.folds is not None else int(config["folds"])
    fraction = args.fraction if args.fraction is not None else float(config["fraction"])
    if folds < 2:
        raise UsageError(f"--folds must be at least 2, got {folds}")
    model = formats.read_model(args.model)
    data = formats.read_dataset(args.data)
    formats.check_compatible(model, data)
    _check_folds(data, folds)
    start = time.perf_counter()
    reports = [evaluate(model, data.with_hidden(split.hidden), args.threads,
                        introduced=model.n_features, active=model.active_count)
               for split in make_splits(data, folds, fraction, args.seed)]
    elapsed = time.perf_counter() - start
    report = {"folds": [r.as_dict() for r in reports], "summary": summarize(reports)}
    artifacts = []
    if args.out:
        artifacts.append(str(formats.write_json(report, _out_dir(args.out) / "eval.json")))
    return _manifest("eval", args, seeds={"splits": args.seed}, artifacts=artifacts,
                     timings={"eval": elapsed}, report=report)


def _bench_datasets(args: argparse.Namespace, out: Path):
    """Yield (nodes, dataset, truth features) per benchmark setting."""
    if args.data:
        if args.nodes_list:
            raise UsageError("--data and --nodes-list are mutually exclusive")
        data = formats.read_dataset(args.data)
        yield data.schema.n_vars, data, _truth_features(args.truth)
        return
    if not args.nodes_list:
        raise UsageError("bench needs --data or --nodes-list")
    for nodes in args.nodes_list:
        spec = _spec(args, nodes)
        network = sample_structure(spec)
        data = gibbs_chain(network.model, spec)
        formats.write_dataset(data, out / f"data_n{nodes}.jsonl")
        formats.write_model(network.model, out / f"truth_n{nodes}.json")
        yield nodes, data, network.pair_features


def cmd_bench(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    methods = [m.strip() for m in args.methods]
    unknown = sorted(set(methods) - {m.value for m in TrainMode})
    if unknown:
        raise UsageError(f"unknown methods: {', '.join(unknown)}")
    if TrainMode.TRUEGRAPH.value in methods and args.data and not args.truth:
        raise UsageError("--methods truegraph needs --truth")
    folds = args.folds if args.folds is not None else int(config["folds"])
    if folds < 2:
        raise UsageError(f"--folds must be at least 2, got {folds}")
    out = _out_dir(args.out)
    base = _train_config(args, config, TrainMode.CFI.value)
    thresholds = args.threshold_list or [base.thresholds.t_err]
    bad = [t for t in thresholds if not app_config.validate_threshold(t)]
    if bad:
        raise UsageError(f"thresholds must lie in [0, 1]: {bad}")
    rows: List[List[Any]] = []
    start = time.perf_counter()
    for nodes, data, truth in _bench_datasets(args, out):
        _check_folds(data, folds)
        splits = make_splits(data, folds, 1.0 / folds, args.seed)
        run = list(methods)
        # a known structure always gets its reference row
        if truth is not None and TrainMode.TRUEGRAPH.value not in run:
            run.append(TrainMode.TRUEGRAPH.value)
        for method in run:
            # only contrastive scoring depends on the thresholds
            grid = thresholds if method == TrainMode.CFI.value else thresholds[:1]
            for t in grid:
                cfg = _train_config(args, config, method)
                if args.threshold_list:
                    cfg = replace(cfg, thresholds=Thresholds(t, t))
                results = cross_validate(
                    data, lambda masked: train(masked, cfg, features=truth, threads=args.threads),
                    splits, args.threads)
                for split, (_, trace, report) in zip(splits, results):
                    rows.append([method, nodes, t, split.fold, report.wall_time_seconds, report.cll,
                                 report.auc, report.error_rate, report.introduced, report.active,
                                 trace.scored_pairs, len(trace)])
                logger.info("bench %s N=%d t=%g done", method, nodes, t)
    elapsed = time.perf_counter() - start
    path = formats.write_csv(BENCH_COLUMNS, rows, out / "bench.csv")
    return _manifest("bench", args, config=base.as_dict(), seeds={"seed": args.seed},
                     artifacts=[str(path)], timings={"bench": elapsed},
                     summary={"rows": len(rows)})


def cmd_hist(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    bin_width = args.bin_width if args.bin_width is not None else float(config["bin_width"])
    if bin_width <= 0:
        raise UsageError(f"--bin-width must be positive, got {bin_width}")
    model = formats.read_model(args.model)
    data = formats.read_dataset(args.data)
    formats.check_compatible(model, data)
    q0 = mf_converge_batch(model, data, threads=args.threads)
    q1 = cd_sweep_batch(model, q0, threads=args.threads)
    table = build_signal_error_table(q0, q1, model.policy)
    out = _out_dir(args.out)
    header = ["bin_lo", "bin_hi", "count"]
    artifacts = [
        str(formats.write_csv(header, histogram(table.signal.ravel(), bin_width), out / "signal_hist.csv")),
        str(formats.write_csv(header, histogram(table.err.ravel(), bin_width), out / "error_hist.csv")),
    ]
    return _manifest("hist", args, artifacts=artifacts,
                     summary={"instances": len(data), "states": len(table.slots)})


def cmd_oracle(args: argparse.Namespace, config: Dict[str, Any]) -> Dict[str, Any]:
    model = formats.read_model(args.model)
    data = formats.read_dataset(args.data)
    formats.check_compatible(model, data)
    if not 0 <= args.instance < len(data):
        raise UsageError(f"--instance {args.instance} outside dataset of {len(data)}")
    table = exact_conditional(model, data.instances[args.instance])
    return _manifest("oracle", args, summary={
        "log_z": table.log_z,
        "joint_states": len(table),
        "marginals": [m.tolist() for m in exact_marginals(table)],
    })


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose)
    config = app_config.load_config()
    workers.configure_workers(config)
    if args.threads is not None:
        workers.THREADS = args.threads
    try:
        manifest = args.handler(args, config)
    except (UsageError, app_config.ConfigError) as e:
        logger.error("usage error: %s", e)
        return EXIT_USAGE
    except (formats.DataFormatError, SchemaError, FeatureError, EnumerationTooLarge, OSError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    print(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return EXIT_OK
