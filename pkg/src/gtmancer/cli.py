"""``gtmancer`` command line: train, verify, synth, export-embeddings.

Exit codes: 0 ok, 2 usage or input error, 3 numerical failure during
training, 4 a verified property failed. Log verbosity comes from the
``GTMANCER_LOG_LEVEL`` environment variable (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

from . import model, verify
from .dataio import SynthSpec, load_dataset, save_dataset, split_semi_supervised, synth_generate
from .errors import (
    ConvergenceError,
    DegenerateError,
    DivergenceError,
    GTMancerError,
    SingularityError,
)

log = logging.getLogger("gtmancer")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PROPERTY = 0, 2, 3, 4
LOG_ENV = "GTMANCER_LOG_LEVEL"
NUMERIC_ERRORS = (DivergenceError, ConvergenceError, DegenerateError, SingularityError)


class UsageError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_atomic(path: Path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "seed": "seed", "label_ratio": "label_ratio", "k": "K", "tau": "tau", "epochs": "epochs",
    "lr": "learning_rate", "weight_decay": "weight_decay", "dropout": "dropout_rate",
    "latent_dim": "latent_dim", "fusion": "fusion", "optimizer": "optimizer",
}


def train_config(args) -> model.TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    values = read_config_file(args.config) if args.config else {}
    for flag, key in TRAIN_FLAGS.items():
        given = getattr(args, flag)
        if given is not None:
            values[key] = given
    return model.TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    out = Path(args.out)
    config = train_config(args)
    dataset = load_dataset(args.views, args.labels, zscore=args.zscore)
    mask = split_semi_supervised(dataset, config.label_ratio, config.seed)
    log.info("training on %d samples, %d labeled, widths %s", dataset.n_samples,
             len(mask.train_indices), dataset.widths)
    params, history = model.fit(dataset, config, mask)
    report = model.evaluate(dataset, params, config, mask)

    out.mkdir(parents=True, exist_ok=True)
    model.save_params(out / "model.bin", params, config)
    metrics = {"schema_version": SCHEMA_VERSION, "n_train": int(len(mask.train_indices)),
               "n_test": int(len(mask.test_indices)), **report.to_dict()}
    write_atomic(out / "metrics.json", _dump(metrics))
    lines = [json.dumps({"schema_version": SCHEMA_VERSION, **rec}, sort_keys=True) for rec in history]
    write_atomic(out / "train.log.jsonl", "\n".join(lines) + "\n")
    artifacts = ["model.bin", "metrics.json", "train.log.jsonl"]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "config": config.to_dict(),
        "seed": config.seed,
        "dataset_digest": dataset.digest(),
        "inputs": {str(p): file_digest(p) for p in [*args.views, args.labels]},
        "artifacts": {name: file_digest(out / name) for name in artifacts},
        "tool_version": tool_version(),
    }
    write_atomic(out / "manifest.json", _dump(manifest))
    print(f"ACC {report.accuracy:.4f}  macro-F1 {report.macro_f1:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    trace = [] if args.trace else None
    report = verify.run_suite(args.seeds, args.n, args.d, args.m, args.alpha_scale, args.seed_offset, trace)
    text = verify.report_json(report) + "\n"
    if args.out:
        write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if trace is not None:
        write_atomic(Path(args.trace), "".join(d.to_json() + "\n" for d in trace))
    for warning in report["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    for name, prop in sorted(report["properties"].items()):
        if prop["status"] == "fail":
            print(f"property {name} failed for seeds {prop['failing_seeds']}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_PROPERTY


def cmd_synth(args) -> int:
    dims = tuple(args.dims) if args.dims else (32,) * args.m
    if len(dims) == 1 and args.m > 1:
        dims = dims * args.m
    spec = SynthSpec(args.n, args.m, args.classes, dims, args.separation, args.sigma, args.seed)
    views, labels = save_dataset(synth_generate(spec), args.out, prefix=args.prefix)
    for p in [*views, labels]:
        print(p)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    params, config, header = model.load_params(args.model)
    dataset = load_dataset(args.views, args.labels, zscore=args.zscore)
    model.check_compatible(header, dataset)
    fused = model.forward(dataset, params, config, mode="eval").fused.value
    names = dataset.class_names or tuple(str(i) for i in range(dataset.class_count))
    head = ["sample_id", "label"] + [f"z{j}" for j in range(fused.shape[1])]
    rows = ["\t".join(head)]
    for sid, y, z in zip(dataset.sample_ids, dataset.labels, fused):
        rows.append("\t".join([sid, names[y]] + [repr(float(x)) for x in z]))
    write_atomic(Path(args.out), "\n".join(rows) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtmancer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=tool_version())
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p, out_help):
        p.add_argument("--views", action="append", required=True, help="view CSV (repeat per modality)")
        p.add_argument("--labels", required=True, help="label CSV (sample_id,label)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--zscore", action="store_true", help="standardize every feature column")

    t = sub.add_parser("train", help="fit on CSV views and report test metrics")
    data_flags(t, "output directory")
    t.add_argument("--config", help="flat key=value file overriding the defaults")
    t.add_argument("--seed", type=int)
    t.add_argument("--label-ratio", type=float)
    t.add_argument("--k", type=int)
    t.add_argument("--tau", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--fusion", choices=model.FUSION_MODES)
    t.add_argument("--optimizer", choices=model.OPTIMIZERS)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="numerically check the descent guarantees")
    v.add_argument("--seeds", type=int, default=100)
    v.add_argument("--seed-offset", type=int, default=0)
    v.add_argument("--n", type=int, default=16)
    v.add_argument("--d", type=int, default=4)
    v.add_argument("--m", type=int, default=3)
    v.add_argument("--alpha-scale", type=float, default=1.0)
    v.add_argument("--out", help="JSON report path (stdout if omitted)")
    v.add_argument("--trace", help="JSONL file for per-step diagnostics")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("synth", help="write a synthetic Gaussian-cluster dataset")
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--dims", type=int, nargs="+", help="feature width per view (one value is reused)")
    s.add_argument("--separation", type=float, default=5.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="synth")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("export-embeddings", help="write fused embeddings as TSV")
    e.add_argument("--model", required=True, help="model.bin from train")
    data_flags(e, "TSV path")
    e.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, GTMancerError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
