"""Command-line front end for batch runs.

Verbs: quantize, inspect, ratio, infer, train, retrain, extract, index,
search, eval, report. Results go to stdout, progress and errors to
stderr. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical failure. Every verb accepts --seed (default 0) and re-running
a verb with the same seed and inputs writes byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codec, datasets, descriptor, engine, network, retrieval, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PIPELINES = ("nip", "rnip-5x", "rnip-14x")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we reserve 2 for data errors
        raise _UsageError(f"{self.prog}: {message}")


def _say(*parts) -> None:
    print(*parts, file=sys.stderr)


def _load_weights(path):
    """FloatModel or CompressedModel, sniffed by magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == network.FLOAT_MAGIC:
        return network.load_float_model(path)
    if magic == codec.MAGIC:
        return codec.load_model(path)
    raise ValueError(f"{path}: neither a float-weights nor a compressed-model file")


def _build_parser() -> _Parser:
    parser = _Parser(prog="qnip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", metavar="VERB")

    def verb(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        return p

    p = verb("ratio", "per-kernel compression ratio for a bit split")
    p.add_argument("--mask-bits", type=int, required=True)
    p.add_argument("--scalar-bits", type=int, default=8)

    p = verb("quantize", "compress float weights into a container")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--profile", required=True, help='per-layer mask bits, e.g. "3x7,1x6"')
    p.add_argument("--policy", default="xnor-abs-mean",
                   choices=["xnor-abs-mean", "literal-mean"])
    p.add_argument("--shift-scope", default="layer", choices=["layer", "global"])
    p.add_argument("--out", required=True)

    p = verb("inspect", "layer table, ratio and sizes of a container")
    p.add_argument("model", nargs="?", help="a .qcm file")
    p.add_argument("--net", help="architecture config (accounting-only mode)")
    p.add_argument("--profile", help="profile for accounting-only mode")

    p = verb("infer", "classify one image")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", default="float", choices=list(engine.MODES))
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--calib", help="directory of calibration images (integer mode)")

    p = verb("train", "train a float model from scratch")
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True, help="directory with .img files and labels.txt")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", required=True, help="output float weights (.qfw)")
    p.add_argument("--metrics", help="per-epoch CSV")

    p = verb("retrain", "quantization-aware retraining of a float model")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True, help="pretrained float weights (.qfw)")
    p.add_argument("--data", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--policy", default="xnor-abs-mean",
                   choices=["xnor-abs-mean", "literal-mean"])
    p.add_argument("--refresh", default="epoch", choices=["epoch", "step"])
    p.add_argument("--shift-scope", default="layer", choices=["layer", "global"])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out", required=True, help="output container (.qcm)")
    p.add_argument("--shadow", help="also save final full-precision shadow (.qfw)")
    p.add_argument("--metrics", help="per-epoch CSV")

    p = verb("extract", "descriptors for a directory of images")
    p.add_argument("--net", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--mode", default="float", choices=list(engine.MODES))
    p.add_argument("--kind", default="nip", choices=["nip", "rnip"])
    p.add_argument("--levels", help="grid levels, e.g. 1,2,3 (default: nip 1,2,3 / rnip 1,2)")
    p.add_argument("--precision", default="real", choices=list(descriptor.PRECISIONS))
    p.add_argument("--no-rotations", action="store_true",
                   help="rnip only: skip the rotation orbit")
    p.add_argument("--jobs", type=int, default=int(os.environ.get("QNIP_JOBS", "1")),
                   help="worker cap (default $QNIP_JOBS or 1)")
    p.add_argument("--out", required=True)

    p = verb("index", "merge descriptor files into one index")
    p.add_argument("--desc", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = verb("search", "rank the index against one stored query")
    p.add_argument("--index", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="write results CSV here as well")

    p = verb("eval", "mean average precision against ground truth")
    p.add_argument("--index", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--pipeline", default="nip", help="label for the report grid")
    p.add_argument("--precision", help="label override (default: index precision)")
    p.add_argument("--out", help="write 'pipeline,precision,map' CSV")
    p.add_argument("--results", help="write full ranked results CSV")

    p = verb("report", "mAP grid over pipelines and precisions, plus model size")
    p.add_argument("--eval", nargs="+", required=True, dest="evals",
                   help="CSV files produced by the eval verb")
    p.add_argument("--model", help="a .qcm whose sizes close the report")
    p.add_argument("--out", help="also write the report here")

    return parser


# ---------------------------------------------------------------------------
# verb bodies

def _cmd_ratio(args) -> int:
    print(f"{codec.ratio_formula(args.mask_bits, args.scalar_bits):.2f}")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    net = network.load_network(args.net)
    profile = codec.parse_profile(args.profile, len(net.conv_layer_shapes()))
    model = network.load_float_model(args.weights)
    compressed = codec.build_compressed_model(net, model, profile, args.policy,
                                              args.shift_scope)
    codec.save_model(args.out, compressed)
    sizes = codec.model_sizes(net, profile, args.policy, compressed.source_checksum)
    _say(f"wrote {args.out}: {len(compressed.layers)} conv layers, "
         f"ratio {codec.model_ratio(net, profile):.2f}, "
         f"{sizes.compressed_bytes} bytes")
    return EXIT_OK


def _inspect_lines(net, profile, policy, checksum, layers=None):
    lines = ["layer  out   in  m  e"]
    shapes = net.conv_layer_shapes()
    for i, (shape, m) in enumerate(zip(shapes, profile)):
        e = layers[i].shift if layers is not None else "-"
        lines.append(f"conv{i + 1:<2} {shape.out_channels:>4} {shape.in_channels:>4}"
                     f"  {m}  {e}")
    sizes = codec.model_sizes(net, profile, policy, checksum)
    lines.append(f"ratio {codec.model_ratio(net, profile):.2f}")
    lines.append(f"sizes {sizes.float_bytes / 1e6:.2f} MB -> "
                 f"{sizes.compressed_bytes / 1e6:.2f} MB")
    return lines


def _cmd_inspect(args) -> int:
    if args.model:
        model = codec.load_model(args.model)
        lines = _inspect_lines(model.network, model.profile, model.policy,
                               model.source_checksum, model.layers)
    elif args.net and args.profile:
        net = network.load_network(args.net)
        profile = codec.parse_profile(args.profile, len(net.conv_layer_shapes()))
        lines = _inspect_lines(net, profile, "xnor-abs-mean", "")
    else:
        raise _UsageError("inspect: give a model file, or both --net and --profile")
    print("\n".join(lines))
    return EXIT_OK


def _cmd_infer(args) -> int:
    net = network.load_network(args.net)
    weights = _load_weights(args.weights)
    if args.mode == "float" and not isinstance(weights, network.FloatModel):
        raise ValueError(f"{args.weights}: float mode needs float weights (.qfw)")
    if args.mode != "float" and not isinstance(weights, codec.CompressedModel):
        raise ValueError(f"{args.weights}: {args.mode} mode needs a compressed model (.qcm)")
    image = descriptor.sized_input(net, retrieval.read_image(args.image))
    exps = None
    if args.mode == "integer" and args.calib:
        calib = [descriptor.sized_input(net, retrieval.read_image(p))
                 for p in sorted(Path(args.calib).glob("*.img"))]
        exps = engine.calibrate_activation_exponents(net, weights, calib)
    for label, score in engine.classify(net, weights, image, args.mode, args.topk, exps):
        print(f"{label} {score:.6f}")
    return EXIT_OK


def _cmd_train(args) -> int:
    net = network.load_network(args.net)
    dataset = datasets.load_labeled_dataset(args.data)
    config = train.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                               batch_size=args.batch_size, seed=args.seed)
    result = train.train_float(net, dataset, config)
    network.save_float_model(args.out, result.model)
    if args.metrics:
        train.write_metrics_csv(args.metrics, result.metrics)
    last = result.metrics[-1]
    _say(f"trained {args.epochs} epochs: loss {last.loss:.4f}, top1 {last.top1:.4f}")
    return EXIT_OK


def _cmd_retrain(args) -> int:
    net = network.load_network(args.net)
    profile = codec.parse_profile(args.profile, len(net.conv_layer_shapes()))
    if any(m is None for m in profile):
        raise ValueError("retrain profile must quantize every layer (no 'f' entries)")
    dataset = datasets.load_labeled_dataset(args.data)
    model = network.load_float_model(args.weights)
    config = train.TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                               batch_size=args.batch_size, seed=args.seed,
                               policy=args.policy, profile=profile,
                               refresh=args.refresh, shift_scope=args.shift_scope)
    result = train.retrain_quantized(net, model, dataset, config)
    codec.save_model(args.out, result.model)
    if args.shadow:
        network.save_float_model(args.shadow, result.shadow)
    if args.metrics:
        train.write_metrics_csv(args.metrics, result.metrics)
    last = result.metrics[-1]
    _say(f"retrained {args.epochs} epochs: loss {last.loss:.4f}, top1 {last.top1:.4f}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    net = network.load_network(args.net)
    weights = _load_weights(args.weights)
    if args.mode == "float" and not isinstance(weights, network.FloatModel):
        raise ValueError(f"{args.weights}: float mode needs float weights (.qfw)")
    if args.mode != "float" and not isinstance(weights, codec.CompressedModel):
        raise ValueError(f"{args.weights}: {args.mode} mode needs a compressed model (.qcm)")
    levels_text = args.levels or ("1,2,3" if args.kind == "nip" else "1,2")
    levels = tuple(int(t) for t in levels_text.split(","))
    images, _ = retrieval.ingest_dataset(args.images)

    exps = None
    if args.mode == "integer":
        exps = engine.calibrate_activation_exponents(
            net, weights, (descriptor.sized_input(net, im) for im in images.values()))

    def one(image):
        if args.kind == "nip":
            d = descriptor.extract_nip(net, weights, image, args.mode, levels, exps)
        else:
            d = descriptor.extract_rnip(net, weights, image, args.mode, levels,
                                        not args.no_rotations, exps)
        return descriptor.convert_descriptor(d, args.precision)

    names = list(images)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, [images[n] for n in names]))
    else:
        results = [one(images[n]) for n in names]
    descriptor.save_descriptors(args.out, dict(zip(names, results)))
    _say(f"wrote {args.out}: {len(names)} {args.precision} descriptors "
         f"({args.kind}, levels {levels_text})")
    return EXIT_OK


def _cmd_index(args) -> int:
    merged: dict[str, descriptor.Descriptor] = {}
    for path in args.desc:
        for name, desc in descriptor.load_descriptors(path).items():
            if name in merged:
                raise ValueError(f"duplicate id {name!r} while merging {path}")
            merged[name] = desc
    ordered = {name: merged[name] for name in sorted(merged)}
    retrieval.build_index(ordered)  # validates uniform precision and length
    descriptor.save_descriptors(args.out, ordered)
    _say(f"wrote {args.out}: {len(ordered)} descriptors")
    return EXIT_OK


def _cmd_search(args) -> int:
    index = retrieval.build_index(descriptor.load_descriptors(args.index))
    if args.query_id not in index.entries:
        raise ValueError(f"query id {args.query_id!r} not in index")
    ranked = retrieval.search(index, index.entries[args.query_id], k=args.k,
                              exclude=args.query_id)
    bitwise = index.precision == "bit"
    print("query_id,rank,id,score")
    for rank, (name, score) in enumerate(ranked, start=1):
        text = str(int(score)) if bitwise else f"{score:.6f}"
        print(f"{args.query_id},{rank},{name},{text}")
    if args.out:
        retrieval.write_results_csv(args.out, {args.query_id: ranked}, bitwise)
    return EXIT_OK


def _cmd_eval(args) -> int:
    index = retrieval.build_index(descriptor.load_descriptors(args.index))
    ground_truth = retrieval.read_ground_truth(args.ground_truth)
    mAP, per_query = retrieval.evaluate(index, ground_truth)
    precision = args.precision or index.precision
    print(f"mAP {mAP:.4f} ({args.pipeline}, {precision}, {len(per_query)} queries)")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("pipeline,precision,map\n")
            fh.write(f"{args.pipeline},{precision},{mAP:.6f}\n")
    if args.results:
        bitwise = index.precision == "bit"
        ranked = {qid: retrieval.search(index, index.entries[qid], exclude=qid)
                  for qid in ground_truth}
        retrieval.write_results_csv(args.results, ranked, bitwise)
    return EXIT_OK


def _cmd_report(args) -> int:
    cells: dict[tuple[str, str], float] = {}
    pipelines = list(PIPELINES)
    for path in args.evals:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [l.strip() for l in fh if l.strip()]
        if not lines or lines[0] != "pipeline,precision,map":
            raise ValueError(f"{path}: not an eval CSV (bad header)")
        for line in lines[1:]:
            pipeline, precision, value = line.split(",")
            cells[(precision, pipeline)] = float(value)
            if pipeline not in pipelines:
                pipelines.append(pipeline)
    out = ["mAP by descriptor precision and pipeline"]
    header = "precision " + " ".join(f"{p:>9}" for p in pipelines)
    out.append(header)
    for precision in ("real", "byte", "bit"):
        row = [f"{precision:<9}"]
        for pipeline in pipelines:
            value = cells.get((precision, pipeline))
            row.append(f"{value:>9.4f}" if value is not None else f"{'-':>9}")
        out.append(" ".join(row))
    if args.model:
        model = codec.load_model(args.model)
        sizes = codec.model_sizes(model.network, model.profile, model.policy,
                                  model.source_checksum)
        out.append("")
        out.append(f"model: float {sizes.float_bytes / 1e6:.2f} MB -> "
                   f"compressed {sizes.compressed_bytes / 1e6:.2f} MB "
                   f"(ratio {codec.model_ratio(model.network, model.profile):.2f})")
    text = "\n".join(out)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    return EXIT_OK


_HANDLERS = {
    "ratio": _cmd_ratio,
    "quantize": _cmd_quantize,
    "inspect": _cmd_inspect,
    "infer": _cmd_infer,
    "train": _cmd_train,
    "retrain": _cmd_retrain,
    "extract": _cmd_extract,
    "index": _cmd_index,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.verb:
            raise _UsageError("missing verb; try --help")
        np.seterr(over="raise", invalid="raise", divide="raise", under="ignore")
        try:
            return _HANDLERS[args.verb](args)
        finally:
            np.seterr(all="warn")
    except _UsageError as err:
        _say(str(err))
        return EXIT_USAGE
    except train.DivergenceError as err:
        _say(f"numerical failure: {err}")
        return EXIT_NUMERIC
    except FloatingPointError as err:
        _say(f"numerical failure: {err}")
        return EXIT_NUMERIC
    except (codec.CodecError, OSError, ValueError) as err:
        _say(str(err))
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
