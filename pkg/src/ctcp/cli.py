"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline as bl
from .diffusion_data import (
    END_OF_DATA, ConfigError, DataError, ParseConfig, generate_synthetic, load_processed,
    parse_cascade_file, preprocess, split, write_cascade_file, write_processed,
)
from .metrics import compute_metrics
from .training import (
    ABLATIONS, CONFIG_ENV, ModelConfig, TrainingDivergence, evaluate, load_checkpoint,
    read_config_file, save_checkpoint, train,
)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3
TRAIN_LOG = "train_log.jsonl"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default, allow_nan=False)
        fh.write("\n")


def _horizon(text: str):
    return text if text == END_OF_DATA else float(text)


def cmd_preprocess(args) -> list[Path]:
    records = parse_cascade_file(args.input, ParseConfig(column_sep=args.delimiter))
    publish_filter = None
    if args.publish_start is not None or args.publish_end is not None:
        publish_filter = (args.publish_start if args.publish_start is not None else -np.inf,
                          args.publish_end if args.publish_end is not None else np.inf)
    graph = preprocess(records, args.t_o, args.t_p, publish_filter)
    parts = split(graph, args.seed)
    paths = write_processed(graph, parts, args.out, seed=args.seed)
    s = graph.stats
    print(f"retained: {s.retained}")
    print(f"discarded: {s.discarded}")
    print(f"truncated: {s.truncated}")
    print(f"split: train {len(parts.train)}, val {len(parts.val)}, test {len(parts.test)}")
    return paths


def cmd_synth(args) -> list[Path]:
    records = generate_synthetic(args.n_cascades, args.n_users, args.seed, args.mode,
                                 observation_window=args.t_o)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cascade_file(records, out)
    print(f"wrote {len(records)} cascades to {out}")
    return [out]


def resolve_config(args) -> ModelConfig:
    """Defaults, then the config file (flag or environment), then explicit flags."""
    values: dict = {}
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(read_config_file(path))
    for f in dataclasses.fields(ModelConfig):
        if f.name in ABLATIONS:
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            values["lambda" if f.name == "lam" else f.name] = v
    ablations = set(args.ablation or [])
    config = ModelConfig.from_mapping(values)
    if ablations:
        config = dataclasses.replace(config, **{a: True for a in ablations})
    return config


def cmd_train(args) -> list[Path]:
    config = resolve_config(args)
    graph, parts = load_processed(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print("config: " + json.dumps(config.as_dict(), sort_keys=True))
    log_path = out / TRAIN_LOG
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if not args.quiet:
                print(f"epoch {rec['epoch']:4d}  train {rec['train_loss']:.4f}  val {rec['val_msle']:.4f}",
                      file=sys.stderr)
        result = train(config, graph, parts, on_epoch=on_epoch)
    extra = {"best_epoch": result.best_epoch, "best_val_msle": result.best_val_msle,
             "epochs_run": result.epochs_run, "data": str(Path(args.data).resolve())}
    paths = save_checkpoint(out, result.model, extra)
    print(f"best val MSLE: {result.best_val_msle:.6f} (epoch {result.best_epoch})")
    return paths + [log_path]


def _load(args):
    model, manifest = load_checkpoint(args.checkpoint)
    graph, parts = load_processed(args.data)
    if abs(manifest["observation_window"] - graph.observation_window) > 1e-9:
        raise DataError(f"checkpoint observation window {manifest['observation_window']} does not match "
                        f"data observation window {graph.observation_window}")
    return model, manifest, graph, parts


def _split_ids(graph, parts, name):
    return list(graph.cascade_ids) if name == "all" else list(parts[name])


def cmd_evaluate(args) -> list[Path]:
    model, _, graph, parts = _load(args)
    res = evaluate(model, graph, _split_ids(graph, parts, args.split), buckets=args.buckets)
    report = res.report.as_dict()
    report["split"] = args.split
    out = Path(args.out or Path(args.checkpoint) / f"eval_{args.split}.json")
    _dump_json(report, out)
    pred_path = out.with_name(out.stem + "_predictions.jsonl")
    with open(pred_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in res.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"{args.split}: MSLE {res.report.msle:.6f}  MALE {res.report.male:.6f}  "
          f"MAPE {res.report.mape:.6f}  PCC {res.report.pcc:.6f}  n {res.report.n}")
    return [out, pred_path]


def cmd_predict(args) -> list[Path]:
    model, _, graph, parts = _load(args)
    res = evaluate(model, graph, _split_ids(graph, parts, args.split))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cascade\tpredicted_log\tpredicted_count\tlabel\n")
        for rec in res.records():
            fh.write(f"{rec['cascade']}\t{rec['predicted_log']!r}\t{rec['predicted_count']!r}\t{rec['label']}\n")
    return [out]


def cmd_export_embeddings(args) -> list[Path]:
    model, _, graph, parts = _load(args)
    res = evaluate(model, graph, _split_ids(graph, parts, args.split), embeddings=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for i, c in enumerate(res.cascades):
            rec = {"cascade": c, "static": res.embeddings["static"][i].tolist(),
                   "dynamic": res.embeddings["dynamic"][i].tolist(), "label": int(res.labels[i])}
            fh.write(json.dumps(rec) + "\n")
    return [out]


def cmd_plot_data(args) -> list[Path]:
    with open(args.report, encoding="utf-8") as fh:
        report = json.load(fh)
    buckets = report.get("buckets")
    if not buckets:
        raise DataError(f"{args.report} has no bucket breakdown; evaluate with --buckets")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bucket\tpercentile_low\tpercentile_high\tn\tmsle\n")
        for b in buckets:
            msle = "nan" if b["msle"] is None else repr(b["msle"])
            fh.write(f"{b['bucket']}\t{b['percentile_low']}\t{b['percentile_high']}\t{b['n']}\t{msle}\n")
    return [out]


def cmd_baseline(args) -> list[Path]:
    graph, parts = load_processed(args.data)
    recs = {name: [graph.cascades[c] for c in parts[name]] for name in ("train", "val", "test")}
    times = [r.publish_time for r in recs["train"]]
    span = (min(times), max(times))
    X = {k: bl.feature_matrix(v, span) if v else np.zeros((0, 5)) for k, v in recs.items()}
    y = {k: np.array([r.label for r in v], dtype=np.float64) for k, v in recs.items()}
    cfg = bl.BaselineConfig(seed=args.seed)
    pred = bl.baseline_fit_predict(X["train"], y["train"], X[args.split], X["val"], y["val"], cfg)
    report = compute_metrics(pred, y[args.split].astype(np.int64)).as_dict()
    report["split"] = args.split
    out = Path(args.out)
    _dump_json(report, out)
    paths = [out]
    if args.features:
        ids = [c for name in ("train", "val", "test") for c in parts[name]]
        feats = np.concatenate([X["train"], X["val"], X["test"]])
        labels = np.concatenate([y["train"], y["val"], y["test"]])
        bl.write_feature_table(args.features, ids, feats, labels)
        paths.append(Path(args.features))
    print(f"baseline {args.split}: MSLE {report['msle']:.6f}")
    return paths


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"flat key = value config file (default: ${CONFIG_ENV})")
    kinds = {"int": int, "float": float, "str": str, "bool": str, "float | None": float}
    for f in dataclasses.fields(ModelConfig):
        if f.name in ABLATIONS:
            continue
        flag = "--lambda" if f.name == "lam" else "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=kinds[f.type], default=None,
                       help=f"override {f.name} (default {f.default})")
    p.add_argument("--ablation", action="append", choices=ABLATIONS,
                   help="disable a model component; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="ctcp", description="Continuous-time cascade popularity prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("preprocess", help="filter, truncate and label raw cascades")
    p.add_argument("input", help="raw cascade file")
    p.add_argument("--t-o", type=float, required=True, help="observation window, in input time units")
    p.add_argument("--t-p", type=_horizon, default=END_OF_DATA,
                   help=f"prediction horizon or '{END_OF_DATA}' (default)")
    p.add_argument("--publish-start", type=float, help="keep cascades published at or after this time")
    p.add_argument("--publish-end", type=float, help="keep cascades published before this time")
    p.add_argument("--delimiter", default="\t", help="column separator of the raw file (default tab)")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a seeded synthetic raw cascade file")
    p.add_argument("--n-cascades", type=int, default=200)
    p.add_argument("--n-users", type=int, default=1000)
    p.add_argument("--mode", choices=("random", "popular-user-signal"), default="random")
    p.add_argument("--t-o", type=float, default=86400.0, help="observation window used for timing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a processed dataset")
    p.add_argument("data", help="processed data directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "metrics on a split"),
        ("predict", cmd_predict, "per-cascade predictions"),
        ("export-embeddings", cmd_export_embeddings, "static and dynamic cascade embeddings"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint", help="checkpoint directory")
        p.add_argument("data", help="processed data directory")
        p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
        if name == "evaluate":
            p.add_argument("--buckets", action="store_true", help="add a 5-way publication-time breakdown")
            p.add_argument("--out", help="report path (default <checkpoint>/eval_<split>.json)")
        else:
            p.add_argument("--out", required=True, help="output file")
        p.set_defaults(func=func)

    p = sub.add_parser("plot-data", help="bucket-to-MSLE table from an evaluation report")
    p.add_argument("report", help="JSON report written by evaluate --buckets")
    p.add_argument("--out", required=True, help="output TSV")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("baseline", help="five-feature MLP baseline")
    p.add_argument("data", help="processed data directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", help="also write the feature table here")
    p.add_argument("--out", required=True, help="report path")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ctcp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"ctcp: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as exc:
        print(f"ctcp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
