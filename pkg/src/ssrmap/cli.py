"""Offline batch pipeline: one executable tying the library together.

Subcommands cover data generation, codec fitting, centralized and
federated training, caption zip/unzip, map compression and inspection,
retrieval queries, and evaluation sweeps.  Commands exchange plain
files, every output path is overwritten atomically (temp file + rename),
and each run logs its resolved configuration to stderr as one JSON line.

All randomness funnels through --seed.  Errors print a single
machine-parsable line ``error: <Type>: <message>`` and exit with the
code classes documented in --help.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
import tempfile
from typing import Callable, Sequence

import numpy as np

from . import evalkit, figures, ssr
from .baselines import dequantize, quantize
from .federated import PARTITION_MODES, FedConfig, fed_train
from .mapstore import (
    ENCODINGS,
    SyntheticSpec,
    bytes_per_element,
    fit_caption_codec,
    generate_synthetic,
    load_dataset,
    map_fused_vectors,
    read_map,
    save_dataset,
    split_records,
    stack_embeddings,
    stack_text_embeddings,
    write_map,
)
from .similarity import normalize_rows
from .textcodec import CodedBlob, decode, encode, load_context_model
from .textembed import HashedBowEmbedder

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4

_EXIT_HELP = """\
exit codes:
  0  success
  2  usage error (unknown flag or malformed argument value)
  3  missing or unreadable file
  4  invalid data, file format, or configuration value
  1  unexpected internal error
"""


# ---------------------------------------------------------------------------
# Plumbing


def _write_bytes_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_atomic(save: Callable[[str], None], path: str) -> None:
    """Run a path-taking saver against a temp file, then rename over path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    os.close(fd)
    try:
        save(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_codec(path: str):
    with open(path, "rb") as fh:
        return load_context_model(fh.read())


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse_dims(text: str) -> tuple[int, ...] | None:
    if text == "auto":
        return None
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated integer list or 'auto', got {text!r}"
        )
    return dims


def _parse_methods(text: str) -> tuple[str, ...]:
    return tuple(part for part in text.split(",") if part)


def _log_config(args: argparse.Namespace) -> None:
    fields = {k: v for k, v in vars(args).items() if k != "func"}
    line = json.dumps(fields, sort_keys=True, default=str)
    print(f"config: {line}", file=sys.stderr)


def _ssr_config(args: argparse.Namespace) -> ssr.SsrConfig:
    return ssr.SsrConfig(
        nested_dims=args.dims or (),
        temperature=args.temperature,
        alpha=args.alpha,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        seed=args.seed,
        exclude_diagonal=not args.include_diagonal,
        swap_kl=args.swap_kl,
    )


def _reference_arrays(path: str) -> tuple[np.ndarray, np.ndarray]:
    records = load_dataset(path)
    refs, _ = split_records(records)
    if not refs:
        raise ValueError(f"dataset {path!r} has no reference rows")
    return stack_embeddings(refs), stack_text_embeddings(refs)


def _encode_like_map(cmap, prefixes: np.ndarray) -> np.ndarray:
    """Pass query prefixes through the map's value encoding (symmetric
    compression: queries pay the same precision loss as references)."""
    if cmap.encoding == "fp32":
        return prefixes.astype(np.float32).astype(np.float64)
    if cmap.encoding == "fp16":
        return prefixes.astype(np.float16).astype(np.float64)
    return dequantize(cmap.quantizer, quantize(cmap.quantizer, prefixes))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_places=args.places,
        items_per_place=args.items_per_place,
        dim=args.dim,
        coarse_sigma=args.coarse_sigma,
        head_dims=args.head_dims,
        head_gain=args.head_gain,
        alias_start=args.alias_start,
        alias_sigma=args.alias_sigma,
        fine_sigma=args.fine_sigma,
        noise_sigma=args.noise_sigma,
        mean_sigma=args.mean_sigma,
        attribute_words=args.attribute_words,
        seed=args.seed,
    )
    records = generate_synthetic(spec)
    save_dataset(records, args.out)
    print(f"records={len(records)} out={args.out}")
    return EXIT_OK


def cmd_fit_codec(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    model = fit_caption_codec(records, order=args.order)
    blob = model.serialize()
    _write_bytes_atomic(args.out, blob)
    print(f"model_bytes={len(blob)} order={args.order} out={args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    images, texts = _reference_arrays(args.dataset)
    config = _ssr_config(args)
    model = ssr.create_model(images.shape[1], config, hidden=args.hidden)
    report = ssr.train(model, images, texts, fraction=args.fraction)
    _save_atomic(lambda p: ssr.save_model(model, p), args.out)
    first = report.epoch_losses[0] if report.epoch_losses else math.nan
    last = report.epoch_losses[-1] if report.epoch_losses else math.nan
    dims = ",".join(str(c) for c in model.config.nested_dims)
    print(
        f"dims={dims} steps={report.steps} "
        f"initial_loss={first!r} final_loss={last!r} out={args.out}"
    )
    return EXIT_OK


def cmd_fed_train(args: argparse.Namespace) -> int:
    images, texts = _reference_arrays(args.dataset)
    fed_config = FedConfig(
        nodes=args.nodes,
        rounds=args.rounds,
        local_epochs=args.local_epochs,
        partition=args.partition,
        seed=args.seed,
        weighted=args.weighted,
    )
    model, report = fed_train(images, texts, fed_config, _ssr_config(args))
    _save_atomic(lambda p: ssr.save_model(model, p), args.out)
    last = report.round_losses[-1] if report.round_losses else math.nan
    sizes = ",".join(str(n) for n in report.node_sizes)
    print(
        f"nodes={args.nodes} rounds={args.rounds} node_sizes={sizes} "
        f"final_round_loss={last!r} out={args.out}"
    )
    return EXIT_OK


def cmd_compress(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    refs, _ = split_records(records)
    if not refs:
        raise ValueError(f"dataset {args.dataset!r} has no reference rows")
    model = ssr.load_model(args.model)
    codec = _load_codec(args.codec)
    cmap = write_map(args.out, refs, model, args.dims, codec, encoding=args.encoding)
    cost = bytes_per_element(cmap)
    print(
        f"elements={cmap.size} c={cmap.c} encoding={cmap.encoding} "
        f"bytes_per_element={cost!r} kb_per_element={cost / 1000.0!r} "
        f"file_bytes={cmap.file_bytes} out={args.out}"
    )
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    cmap = read_map(args.map)
    if cmap.size == 0:
        raise ValueError(f"map {args.map!r} is empty")
    model = ssr.load_model(args.model)
    records = load_dataset(args.dataset)
    queries = [r for r in records if r.split == "query"]
    if not queries:
        raise ValueError(f"dataset {args.dataset!r} has no query rows")
    alpha = model.config.alpha
    embedder = HashedBowEmbedder()
    refs_fused = normalize_rows(
        map_fused_vectors(cmap, embedder, alpha=alpha), allow_zero=True
    )
    prefixes = ssr.project(model, stack_embeddings(queries), cmap.c)
    prefixes = _encode_like_map(cmap, prefixes)
    fused = ssr.fuse_batch(prefixes, stack_text_embeddings(queries), alpha)
    sims = normalize_rows(fused, allow_zero=True) @ refs_fused.T
    k = min(args.k, cmap.size)
    lines = []
    for qi, record in enumerate(queries):
        order = np.argsort(-sims[qi], kind="stable")[:k]
        for rank, ri in enumerate(order, start=1):
            lines.append(
                f"{record.id}\t{rank}\t{cmap.ids[int(ri)]}\t{float(sims[qi, int(ri)])!r}"
            )
    body = "\n".join(lines) + "\n"
    if args.out is not None:
        _write_bytes_atomic(args.out, body.encode("utf-8"))
        print(f"queries={len(queries)} k={k} out={args.out}")
    else:
        sys.stdout.write(body)
    return EXIT_OK


def cmd_eval_sweep(args: argparse.Namespace) -> int:
    records = load_dataset(args.dataset)
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    rows = evalkit.run_sweep(
        records,
        methods=args.methods,
        dims=args.dims or evalkit.DEFAULT_SWEEP_DIMS,
        k=args.k,
        seeds=seeds,
        alpha=args.alpha,
        fraction=args.fraction,
        codec_order=args.codec_order,
    )
    _write_bytes_atomic(args.out, evalkit.rows_to_csv(rows).encode("utf-8"))
    plot = ""
    if not args.no_plot:
        plot = args.plot or os.path.splitext(args.out)[0] + ".png"
        figures.plot_sweep(rows, plot, k=args.k)
    print(f"rows={len(rows)} seeds={len(seeds)} out={args.out} plot={plot}")
    return EXIT_OK


def cmd_zip(args: argparse.Namespace) -> int:
    codec = _load_codec(args.model)
    data = _read_bytes(args.infile)
    blob = encode(codec, data)
    raw = blob.to_bytes()
    _write_bytes_atomic(args.outfile, raw)
    ratio = len(data) / len(raw) if raw else math.inf
    print(f"in_bytes={len(data)} out_bytes={len(raw)} ratio={ratio:.3f} out={args.outfile}")
    return EXIT_OK


def cmd_unzip(args: argparse.Namespace) -> int:
    codec = _load_codec(args.model)
    raw = _read_bytes(args.infile)
    data = decode(codec, CodedBlob.from_bytes(raw))
    _write_bytes_atomic(args.outfile, data)
    print(f"in_bytes={len(raw)} out_bytes={len(data)} out={args.outfile}")
    return EXIT_OK


def cmd_inspect_map(args: argparse.Namespace) -> int:
    cmap = read_map(args.map)
    print(f"elements={cmap.size}")
    print(f"c={cmap.c}")
    print(f"encoding={cmap.encoding}")
    print(f"file_bytes={cmap.file_bytes}")
    print(f"codec_model_bytes={len(cmap.codec_blob)}")
    print(f"config={cmap.config_summary}")
    if cmap.size > 0:
        cost = bytes_per_element(cmap)
        amortized = bytes_per_element(cmap, amortize_header=True)
        print(f"bytes_per_element={cost!r}")
        print(f"kb_per_element={cost / 1000.0!r}")
        print(f"amortized_bytes_per_element={amortized!r}")
        head = ",".join(cmap.ids[:3])
        print(f"ids_head={head}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_seed(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="global random seed")


def _add_ssr_flags(sub: argparse.ArgumentParser) -> None:
    cfg = ssr.SsrConfig()
    sub.add_argument(
        "--dims",
        type=_parse_dims,
        default=None,
        help="comma-separated nested prefix lengths, or 'auto' for"
        " {16,32,64,128,d} clipped to the embedding dim",
    )
    sub.add_argument("--temperature", type=float, default=cfg.temperature,
                     help="softmax temperature for similarity rows")
    sub.add_argument("--alpha", type=float, default=cfg.alpha,
                     help="fusion weight on the normalized prefix half")
    sub.add_argument("--epochs", type=int, default=cfg.epochs, help="training epochs")
    sub.add_argument("--learning-rate", type=float, default=cfg.learning_rate,
                     help="Adam learning rate")
    sub.add_argument("--batch-size", type=int, default=cfg.batch_size,
                     help="minibatch size")
    sub.add_argument("--include-diagonal", action="store_true",
                     help="keep self-similarity in the softmax rows")
    sub.add_argument("--swap-kl", action="store_true",
                     help="use KL(teacher || student) instead of the default direction")
    sub.add_argument("--hidden", type=int, default=None,
                     help="optional tanh hidden width (default: linear map)")
    sub.add_argument("--fraction", type=float, default=1.0,
                     help="train on this seed-chosen fraction of the references")
    _add_seed(sub)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssrmap",
        description="Text-enhanced map compression: train, compress, query, evaluate.",
        epilog=_EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=_EXIT_HELP,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        sub.set_defaults(func=func)
        return sub

    spec = SyntheticSpec()
    sub = add("gen-synthetic", cmd_gen_synthetic,
              "Generate the synthetic place-recognition dataset.")
    sub.add_argument("--out", required=True, help="output dataset path (TSV)")
    sub.add_argument("--places", type=int, default=spec.num_places,
                     help="number of places")
    sub.add_argument("--items-per-place", type=int, default=spec.items_per_place,
                     help="records per place (last one becomes the query split)")
    sub.add_argument("--dim", type=int, default=spec.dim, help="embedding dimension")
    sub.add_argument("--coarse-sigma", type=float, default=spec.coarse_sigma,
                     help="place center scale")
    sub.add_argument("--head-dims", type=int, default=spec.head_dims,
                     help="count of boosted leading channels")
    sub.add_argument("--head-gain", type=float, default=spec.head_gain,
                     help="variance boost on the leading channels")
    sub.add_argument("--alias-start", type=int, default=spec.alias_start,
                     help="first dimension of the pair-separating tail band")
    sub.add_argument("--alias-sigma", type=float, default=spec.alias_sigma,
                     help="tail-band offset scale separating paired places")
    sub.add_argument("--fine-sigma", type=float, default=spec.fine_sigma,
                     help="per-item offset scale")
    sub.add_argument("--noise-sigma", type=float, default=spec.noise_sigma,
                     help="additive noise scale")
    sub.add_argument("--mean-sigma", type=float, default=spec.mean_sigma,
                     help="global mean offset scale")
    sub.add_argument("--attribute-words", type=int, default=spec.attribute_words,
                     help="item-specific words appended to each caption")
    _add_seed(sub)

    sub = add("fit-codec", cmd_fit_codec,
              "Fit the caption codec model on a dataset's reference captions.")
    sub.add_argument("--dataset", required=True, help="input dataset path")
    sub.add_argument("--out", required=True, help="output codec model path")
    sub.add_argument("--order", type=int, default=3, help="context order in bytes")
    _add_seed(sub)

    sub = add("train", cmd_train,
              "Train the similarity-replicating projection on reference rows.")
    sub.add_argument("--dataset", required=True, help="input dataset path")
    sub.add_argument("--out", required=True, help="output model checkpoint path")
    _add_ssr_flags(sub)

    fed = FedConfig()
    sub = add("fed-train", cmd_fed_train,
              "Train the projection federatedly over simulated nodes.")
    sub.add_argument("--dataset", required=True, help="input dataset path")
    sub.add_argument("--out", required=True, help="output model checkpoint path")
    sub.add_argument("--nodes", type=int, default=fed.nodes, help="node count")
    sub.add_argument("--rounds", type=int, default=fed.rounds,
                     help="aggregation rounds")
    sub.add_argument("--local-epochs", type=int, default=fed.local_epochs,
                     help="epochs per node per round")
    sub.add_argument("--partition", choices=PARTITION_MODES, default=fed.partition,
                     help="how reference rows are split across nodes")
    sub.add_argument("--weighted", action="store_true",
                     help="weight the parameter average by node size")
    _add_ssr_flags(sub)

    sub = add("compress", cmd_compress,
              "Project reference rows to c-dim prefixes and write the map file.")
    sub.add_argument("--dataset", required=True, help="input dataset path")
    sub.add_argument("--model", required=True, help="projection model checkpoint")
    sub.add_argument("--codec", required=True, help="caption codec model file")
    sub.add_argument("--out", required=True, help="output map path")
    sub.add_argument("--dims", type=int, required=True, help="prefix length c")
    sub.add_argument("--encoding", choices=ENCODINGS, default="fp32",
                     help="prefix value encoding")
    _add_seed(sub)

    sub = add("query", cmd_query,
              "Rank map elements against each query row (symmetric compression).")
    sub.add_argument("--map", required=True, help="compressed map path")
    sub.add_argument("--model", required=True, help="projection model checkpoint")
    sub.add_argument("--dataset", required=True,
                     help="dataset whose query rows are searched")
    sub.add_argument("--k", type=int, default=5, help="results per query")
    sub.add_argument("--out", default=None,
                     help="output TSV path (default: stdout)")
    _add_seed(sub)

    sub = add("eval-sweep", cmd_eval_sweep,
              "Sweep methods and budgets; write a CSV and a figure.")
    sub.add_argument("--dataset", required=True, help="input dataset path")
    sub.add_argument("--out", required=True, help="output CSV path")
    sub.add_argument("--methods", type=_parse_methods,
                     default=evalkit.METHODS,
                     help="comma-separated method names"
                     f" (valid: {','.join(evalkit.METHODS)})")
    sub.add_argument("--dims", type=_parse_dims, default=None,
                     help="comma-separated prefix lengths, or 'auto' for "
                     + ",".join(str(c) for c in evalkit.DEFAULT_SWEEP_DIMS))
    sub.add_argument("--k", type=int, default=5, help="retrieval cutoff")
    sub.add_argument("--seeds", type=int, default=1,
                     help="number of consecutive seeds starting at --seed")
    sub.add_argument("--alpha", type=float, default=0.5,
                     help="fusion weight on the normalized prefix half")
    sub.add_argument("--fraction", type=float, default=1.0,
                     help="training-data fraction for the data-efficiency protocol")
    sub.add_argument("--codec-order", type=int, default=3,
                     help="caption codec context order")
    sub.add_argument("--plot", default=None,
                     help="figure path (default: CSV path with .png suffix)")
    sub.add_argument("--no-plot", action="store_true", help="skip the figure")
    _add_seed(sub)

    sub = add("zip", cmd_zip, "Compress a file with a fitted codec model.")
    sub.add_argument("infile", help="input file")
    sub.add_argument("outfile", help="output blob path")
    sub.add_argument("--model", required=True, help="codec model file")
    _add_seed(sub)

    sub = add("unzip", cmd_unzip, "Decompress a blob written by zip.")
    sub.add_argument("infile", help="input blob path")
    sub.add_argument("outfile", help="output file")
    sub.add_argument("--model", required=True, help="codec model file")
    _add_seed(sub)

    sub = add("inspect-map", cmd_inspect_map,
              "Print a map file's header fields and per-element cost.")
    sub.add_argument("map", help="compressed map path")
    _add_seed(sub)

    return parser


def _fail(code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _log_config(args)
    try:
        return args.func(args)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except (ValueError, KeyError, struct.error) as exc:
        return _fail(EXIT_DATA, exc)
    except Exception as exc:  # pragma: no cover - last-resort mapping
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
