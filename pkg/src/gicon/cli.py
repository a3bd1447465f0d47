"""Command-line entry point: ``gicon {gen-data,train,eval,gradcheck,retrieve}``.

Exit codes: 0 success, 1 gradcheck failure, 2 configuration error, 3 data or
I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import TrainConfig, load_config_file
from .errors import ConfigError, DataError, NumericError
from .gradcheck import MAX_CHECK_BATCH, MAX_CHECK_DIM, run_gradcheck, toy_config
from .image_encoder import load_image
from .model import QUERY_MODES, GiconModel
from .retrieval import RetrievalTask, embed_gallery, embed_queries, r_precision, similarity_matrix
from .scene_graph import Vocab, load_vocab, parse_scene_graph, read_dataset
from .synth import SynthVocab, make_dataset
from .trainer import train


EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".npy")

# flags that override TrainConfig fields on `train`
TRAIN_FLAGS = {
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "temperature": float,
    "mode": str,
    "d_model": int,
    "max_nodes": int,
    "checkpoint_every": int,
}


# ---------------------------------------------------------------------------
# manifests and inputs
# ---------------------------------------------------------------------------


def sha256_file(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_files(paths: Sequence[str | os.PathLike]) -> str:
    """One digest over an ordered list of files (name and content)."""
    digest = hashlib.sha256()
    for p in paths:
        digest.update(f"{Path(p).name}:{sha256_file(p)}\n".encode())
    return digest.hexdigest()


def manifest(command: str, config: dict, seed: int, inputs: dict, outputs: dict, **extra) -> dict:
    """Run record with no timestamps or host details, so reruns compare byte for byte."""
    return {
        "command": command,
        "code_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        **extra,
    }


def write_json(path: str | os.PathLike, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def resolve_vocab(explicit: str | None, data: str) -> tuple[Vocab, str]:
    path = explicit or os.path.join(os.path.dirname(os.path.abspath(data)), "vocab.json")
    if not os.path.exists(path):
        raise DataError(f"no vocabulary at {path}; pass --vocab")
    return load_vocab(path), path


def load_pairs(data: str, images_dir: str, vocab: Vocab) -> tuple[list, list, list]:
    """Graphs, images and image paths for every record of a dataset file."""
    records = read_dataset(data, vocab)
    if not records:
        raise DataError(f"{data} contains no records")
    paths = [os.path.join(images_dir, r.image) for r in records]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DataError(f"{len(missing)} referenced images are missing, e.g. {missing[0]}")
    return [r.graph for r in records], [load_image(p) for p in paths], paths


def resolve_train_config(args: argparse.Namespace) -> tuple[TrainConfig, dict]:
    """Merge defaults, the config file and flags (flags win); report where each value came from."""
    values = TrainConfig().to_dict()
    source = {k: "default" for k in values}
    if args.config:
        for k, v in load_config_file(args.config).items():
            values[k] = v
            source[k] = "file"
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
            source[k] = "flag"
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
        source[key] = "flag"
    return TrainConfig.from_dict(values), source


@contextlib.contextmanager
def execution_mode(deterministic: bool):
    """In deterministic mode BLAS is pinned to one thread so reductions keep a fixed order."""
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    info = make_dataset(
        args.n, args.seed, args.out, SynthVocab(), image_size=args.image_size, gallery_fraction=args.gallery_fraction
    )
    config = {"n": args.n, "image_size": args.image_size, "gallery_fraction": args.gallery_fraction}
    outputs = {k: os.path.relpath(info[k], args.out) for k in ("vocab", "images", "train", "gallery")}
    doc = manifest(
        "gen-data", config, args.seed, {}, outputs, counts={"train": info["n_train"], "gallery": info["n_gallery"]}
    )
    write_json(os.path.join(args.out, "manifest.json"), doc)
    print(f"wrote {info['n_train']} training and {info['n_gallery']} gallery pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, sources = resolve_train_config(args)
    vocab, vocab_path = resolve_vocab(args.vocab, args.data)
    graphs, images, image_paths = load_pairs(args.data, args.images, vocab)
    inputs = {"data": sha256_file(args.data), "vocab": sha256_file(vocab_path), "images": sha256_files(image_paths)}
    if args.config:
        inputs["config_file"] = sha256_file(args.config)
    with execution_mode(args.deterministic):
        result = train(config, graphs, images, vocab, out_dir=args.out)
    outputs = {"log": "train_log.jsonl", "checkpoint": "checkpoint.json"}
    doc = manifest(
        "train",
        config.to_dict(),
        config.seed,
        inputs,
        outputs,
        config_sources=sources,
        deterministic=args.deterministic,
    )
    write_json(os.path.join(args.out, "manifest.json"), doc)
    last = result.log[-1] if result.log else {}
    print(f"trained {len(result.log)} steps; final loss {last.get('loss', float('nan')):.4f}, in-batch acc {last.get('in_batch_acc', 0):.3f}")
    return EXIT_OK


def parse_ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks:
        raise ConfigError("--k needs at least one value")
    return ks


def cmd_eval(args) -> int:
    model = GiconModel.load(args.checkpoint)
    graphs, images, image_paths = load_pairs(args.data, args.images, model.vocab)
    mode = args.mode or model.config.mode
    task = RetrievalTask(graphs, images, ks=parse_ks(args.k), trials=args.trials, seed=args.seed)
    workers = 1 if args.deterministic else args.workers
    with execution_mode(args.deterministic):
        report = r_precision(task, model, mode=mode, workers=workers)
    doc = report.to_json()
    doc["manifest"] = manifest(
        "eval",
        {"k": list(task.ks), "trials": args.trials, "mode": mode, "checkpoint_config": model.config.to_dict()},
        args.seed,
        {"checkpoint": sha256_file(args.checkpoint), "data": sha256_file(args.data), "images": sha256_files(image_paths)},
        {"report": os.path.basename(args.report) if args.report else None},
        deterministic=args.deterministic,
    )
    if args.report:
        write_json(args.report, doc)
    for k, score in report.scores.items():
        lo, hi = score.ci95
        print(f"R-Precision@{k} ({mode}): {score.r_precision:.4f}  [{lo:.4f}, {hi:.4f}]  n={score.trials}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        overrides = load_config_file(args.config)
        config = toy_config(**overrides)
    else:
        config = toy_config()
    if args.d_model is not None:
        config = dataclasses.replace(config, d_model=args.d_model)
    if config.d_model > MAX_CHECK_DIM or args.batch > MAX_CHECK_BATCH:
        raise ConfigError(
            f"gradcheck runs finite differences over every parameter, which is only feasible at "
            f"d_model <= {MAX_CHECK_DIM} and batch <= {MAX_CHECK_BATCH} (got d_model={config.d_model}, batch={args.batch})"
        )
    with execution_mode(True):
        report = run_gradcheck(config, batch=args.batch, seed=args.seed, tol=args.tol)
    for r in report.operations + report.full_loss:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<28} worst rel. error {r.worst:.2e}")
        if not r.passed or args.verbose:
            for name, err in sorted(r.per_input.items(), key=lambda kv: -kv[1])[:5]:
                print(f"       {name}: {err:.2e}")
    if args.report:
        doc = report.to_json()
        doc["manifest"] = manifest("gradcheck", config.to_dict(), args.seed, {}, {"report": os.path.basename(args.report)})
        write_json(args.report, doc)
    if not report.passed:
        print(f"gradient check failed: {', '.join(report.failures())}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def gallery_files(directory: str) -> list:
    if not os.path.isdir(directory):
        raise DataError(f"gallery directory {directory} does not exist")
    files = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_SUFFIXES))
    if not files:
        raise DataError(f"gallery directory {directory} holds no images")
    return files


def cmd_retrieve(args) -> int:
    model = GiconModel.load(args.checkpoint)
    with open(args.query) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.query}: invalid JSON ({exc.msg})") from None
    graph = parse_scene_graph(doc, model.vocab)
    mode = args.mode or ("lb" if graph.location_bound else "lf")
    files = gallery_files(args.gallery)
    k = args.k
    if k > len(files):
        print(f"warning: k={k} exceeds the gallery size {len(files)}; showing all images", file=sys.stderr)
        k = len(files)
    with execution_mode(args.deterministic):
        images = embed_gallery(model, [load_image(os.path.join(args.gallery, f)) for f in files])
        sims = similarity_matrix(embed_queries(model, [graph], mode), images)[0]
    order = np.argsort(-sims, kind="stable")
    ranked = [{"rank": int(r) + 1, "image": files[i], "similarity": float(sims[i])} for r, i in enumerate(order)]
    result = {"mode": mode, "top": ranked[:k], "bottom": ranked[-k:][::-1]}
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        for title, rows in (("top", result["top"]), ("bottom", result["bottom"])):
            print(f"{title}-{k}:")
            for row in rows:
                print(f"  {row['rank']:>5}  {row['similarity']:+.6f}  {row['image']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gicon", description="Scene-graph/image contrastive alignment at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic (scene graph, image) dataset")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--gallery-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both towers on a dataset")
    p.add_argument("--config", help="flat JSON file of TrainConfig fields")
    p.add_argument("--data", required=True, help="JSON Lines annotations")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.json beside --data)")
    p.add_argument("--out", required=True)
    for name, kind in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS and sequential execution")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="R-Precision of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--k", default="10,50,100", help="comma-separated candidate-set sizes")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--mode", choices=QUERY_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation and the full loss")
    p.add_argument("--config", help="overrides applied to the built-in toy config")
    p.add_argument("--d-model", type=int)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("retrieve", help="rank gallery images against one query graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="JSON scene graph document")
    p.add_argument("--gallery", required=True, help="directory of images")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mode", choices=QUERY_MODES)
    p.add_argument("--json", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_retrieve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
