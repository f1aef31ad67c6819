"""Command-line entry point: ``flowclass <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from flowclass import evaluation, features, ingest, synth
from flowclass.baselines import ALGORITHMS, load_classifier, make_classifier
from flowclass.cascade import CascadeConfig, read_config_file

logger = logging.getLogger("flowclass")

DEVICE_FILE = "devices.csv"


def _load_config(path: str | None, **overrides) -> CascadeConfig:
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return CascadeConfig.from_mapping(values)


def _feature_names(spec: str) -> list[str]:
    if spec == "default6":
        return list(features.DEFAULT_FEATURES)
    if spec == "all":
        return list(features.full_schema())
    return features.read_feature_names(spec)


def _device_labels(stream_dir: str, devices: str | None) -> dict[str, int]:
    path = Path(devices) if devices else Path(stream_dir) / DEVICE_FILE
    return {e.mac: e.category_id for e in ingest.read_device_list(path)}


def _values(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    scenario = synth.load_scenario(args.scenario) if args.scenario else synth.default_scenario()
    capture, _ = synth.generate_scenario(scenario, args.duration_days, args.seed)
    ingest.write_capture(capture.table, args.out)
    if args.labels_out:
        ingest.write_device_list(scenario.device_entries(), args.labels_out)
    if args.split_out:
        train, test = scenario.split_macs()
        evaluation.write_split_file(evaluation.SplitSpec(train, test), args.split_out)
    print(f"wrote {len(capture)} packets from {len(scenario.devices)} devices to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    capture = ingest.parse_capture(args.input, args.delimiter)
    for line, msg in capture.parse_warnings[:20]:
        logger.warning("line %d: %s", line, msg)
    entries = ingest.read_device_list(args.devices)
    result = ingest.separate_streams(capture, [e.mac for e in entries])
    ingest.write_streams(result.streams, args.out)
    ingest.write_device_list(entries, Path(args.out) / DEVICE_FILE)
    print(f"{len(capture)} records, {len(capture.parse_warnings)} skipped rows, "
          f"{result.dropped} records matched no listed device")
    for e in entries:
        print(f"  {e.mac}  category {e.category_id}  {len(result.streams[e.mac]):>9d} records  {e.name}")
    return 0


def cmd_featurize(args) -> int:
    labels = _device_labels(args.streams, args.devices)
    streams = ingest.read_streams(args.streams, labels)
    data = evaluation.featurize_streams(streams, labels, args.interval_secs, _feature_names(args.features))
    ds = data.windows(args.window, args.overlap)
    features.write_dataset(ds, args.out)
    print(f"{len(ds)} windows of {args.window} x {len(ds.schema)} features from {len(labels)} devices")
    return 0


def cmd_train(args) -> int:
    ds = features.read_dataset(args.dataset)
    config = _load_config(args.config, seed=args.seed, epochs=args.epochs)
    config = dataclasses.replace(config, num_classes=config.num_classes or max(2, int(ds.labels.max())))
    scaler = features.FeatureScaler.fit(ds.X)
    order = np.random.default_rng(config.seed).permutation(len(ds))
    clf = make_classifier(args.algo, config, knn_k=args.knn_k, tree_max_depth=args.tree_depth)
    clf.fit(scaler.transform(ds.X[order]), ds.labels[order])
    clf.scaler = scaler
    clf.save(args.model_out)
    train_acc = float(np.mean(clf.predict(scaler.transform(ds.X)) == ds.labels))
    print(f"trained {args.algo} on {len(ds)} windows; training accuracy {train_acc:.4f}")
    return 0


def cmd_predict(args) -> int:
    clf = load_classifier(args.model)
    ds = features.read_dataset(args.dataset)
    X = clf.scaler.transform(ds.X) if clf.scaler is not None else ds.X
    pred = clf.predict(X)
    Path(args.out).write_text("".join(f"{p}\n" for p in pred.tolist()))
    print(f"{len(pred)} predictions written; accuracy against dataset labels {np.mean(pred == ds.labels):.4f}")
    return 0


def cmd_eval(args) -> int:
    ds = features.read_dataset(args.dataset)
    split = evaluation.read_split_file(args.split)
    config = _load_config(args.config, epochs=args.epochs)
    factory = lambda algo, cfg: make_classifier(algo, cfg, knn_k=args.knn_k, tree_max_depth=args.tree_depth)
    result = evaluation.run_experiment(ds, split, args.algo, config, args.repeats, args.base_seed,
                                       train_ratio=args.train_ratio, factory=factory)
    result.write(args.out)
    print(result.summary())
    return 0


def cmd_sweep(args) -> int:
    labels = _device_labels(args.streams, args.devices)
    streams = ingest.read_streams(args.streams, labels)
    split = evaluation.read_split_file(args.split)
    config = _load_config(args.config, epochs=args.epochs)
    factory = lambda algo, cfg: make_classifier(algo, cfg, knn_k=args.knn_k, tree_max_depth=args.tree_depth)
    rows = evaluation.sweep(args.param, _values(args.values), streams, labels, split, args.algo, config,
                            args.interval_secs, args.window, args.overlap, _feature_names(args.features),
                            args.repeats, args.base_seed, factory)
    text = evaluation.sweep_to_csv(args.param, rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------- parser

def _model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algo", choices=ALGORITHMS, default="cascade")
    p.add_argument("--config", help="key = value file of cascade settings")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--tree-depth", type=int, default=12)


def _window_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--interval-secs", type=float, default=300.0)
    p.add_argument("--window", type=int, default=6)
    p.add_argument("--overlap", type=int, default=3)
    p.add_argument("--features", default="default6",
                   help="default6, all, or a file with one feature name per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowclass", description="Classify IoT devices from traffic statistics.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled synthetic capture")
    p.add_argument("--scenario", help="scenario file (default: the shipped four-category scenario)")
    p.add_argument("--duration-days", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out", help="write MAC,category_id,device_name lines here")
    p.add_argument("--split-out", help="write the scenario's train/test device split here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="split a capture into per-device streams")
    p.add_argument("--input", required=True)
    p.add_argument("--devices", required=True, help="MAC,category_id,device_name file")
    p.add_argument("--out", required=True, help="stream directory")
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("featurize", help="segment streams and build windowed samples")
    p.add_argument("--streams", required=True)
    p.add_argument("--devices", help=f"device list (default: <streams>/{DEVICE_FILE})")
    p.add_argument("--out", required=True)
    _window_options(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="fit a classifier on a window dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--seed", type=int)
    _model_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label every window of a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="repeated held-out-device experiment")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--train-ratio", type=float)
    p.add_argument("--out", required=True, help="report directory")
    _model_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy across interval, window or train-ratio values")
    p.add_argument("--param", choices=evaluation.SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--streams", required=True)
    p.add_argument("--devices")
    p.add_argument("--split", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--out", help="CSV output (also printed)")
    _model_options(p)
    _window_options(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"flowclass {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
