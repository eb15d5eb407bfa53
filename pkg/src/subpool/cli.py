"""Command-line interface: ``subpool {synth,train,eval,rank,gradcheck}``.

stdout carries one JSON document per invocation; diagnostics go to stderr.
Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig, load_config
from .data_io import (
    Dataset,
    ManifestError,
    TensorFileError,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .model import embed
from .optim import NonFiniteGradientError
from .pooling import FeatureMap, RankDeficientError, flatten, pool_forward, projector_embedding
from .retrieval import evaluate, export_ranking, ranking_to_csv, samples_from_arrays
from .synthetic import generate_synthetic
from .training import NumericalError, TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("subpool")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
RUN_CONFIG = "run.cfg"
TRAIN_LOG = "train_log.csv"


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "preset", None),
                       {"seed": getattr(args, "seed", None), **overrides})


# synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args, num_ids=args.ids, per_id=args.per_id, cameras=args.cameras,
                  channels=args.channels, height=args.height, width=args.width,
                  intra_noise=args.noise, camera_shift=args.camera_shift)
    if cfg.intra_noise < 0 or cfg.camera_shift < 0:
        raise UsageError("noise and camera shift must be non-negative")
    ds = generate_synthetic(num_ids=cfg.num_ids, images_per_id=cfg.per_id, cameras=cfg.cameras,
                            channels=cfg.channels, h=cfg.height, w=cfg.width,
                            intra_noise=cfg.intra_noise, camera_shift=cfg.camera_shift,
                            seed=cfg.seed, spectrum_decay=cfg.spectrum_decay)
    try:
        manifest = save_dataset(ds, args.out)
    except OSError as err:
        raise UsageError(f"cannot write dataset to {args.out}: {err.strerror or err}") from None
    _emit({"manifest": str(manifest), "num_images": len(ds), "num_ids": cfg.num_ids,
           "cameras": cfg.cameras, "shape": list(ds.tensors.shape[1:]), "seed": cfg.seed})
    return EXIT_OK


# train -------------------------------------------------------------------

def _split(ds: Dataset, cfg: RunConfig):
    return split_dataset(ds.person_ids, ds.camera_ids, cfg.split_spec())


def _descriptor_samples(ds: Dataset, idx, embeddings):
    return samples_from_arrays(embeddings, ds.person_ids[idx], ds.camera_ids[idx],
                               [ds.paths[i] for i in idx])


def cmd_train(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    ds = load_dataset(args.data)
    split = _split(ds, cfg)
    train_set = ds.subset(split.train)
    model_cfg = cfg.model_config(ds.tensors.shape[1:], len(split.train_ids))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / RUN_CONFIG).write_text(cfg.to_text(), encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot write to {out}: {err.strerror or err}") from None

    protocol = cfg.eval_protocol()

    def snapshot(params, epoch):
        report = _evaluate(ds, split, model_cfg, params, protocol, cfg.eval_threads)
        log.info("epoch %d: mAP %.4f rank-1 %.4f", epoch, report.map, report.cmc[0])
        return report.to_dict()

    result = train(train_set, model_cfg, cfg.epochs, cfg.seed,
                   steps_per_epoch=cfg.steps_per_epoch or None,
                   eval_fn=snapshot, eval_every=cfg.eval_every)
    save_checkpoint(out, result.params, result.adam, model_cfg)
    with open(out / TRAIN_LOG, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss_id", "loss_tl", "lr"])
        for row in result.log:
            writer.writerow([row["epoch"], repr(float(row["loss_id"])),
                             repr(float(row["loss_tl"])), repr(float(row["lr"]))])
    payload = {"checkpoint": str(out), "epochs": cfg.epochs, "steps": result.adam.step,
               "seed": cfg.seed, "jitter_count": result.jitter_count,
               "train_ids": len(split.train_ids), "test_ids": len(split.test_ids)}
    if result.log:
        payload["initial_loss"] = float(result.log[0]["loss"])
        payload["final_loss"] = float(result.log[-1]["loss"])
    if cfg.epochs > 0 and not args.no_eval:
        payload["eval"] = _evaluate(ds, split, model_cfg, result.params, protocol,
                                    cfg.eval_threads).to_dict()
    _emit(payload)
    return EXIT_OK


# eval / rank -------------------------------------------------------------

def _raw_descriptors(tensors, cfg: RunConfig) -> np.ndarray:
    """Subspace descriptors of feature maps used as-is, without a model."""
    out = []
    for t in tensors:
        desc, _ = pool_forward(FeatureMap.from_array(t), cfg.rank)
        out.append(projector_embedding(desc.U) if cfg.metric == "projection" else flatten(desc))
    return np.stack(out)


def _evaluate(ds, split, model_cfg, params, protocol, threads):
    q = embed(ds.tensors[split.query], model_cfg, params)
    g = embed(ds.tensors[split.gallery], model_cfg, params)
    return evaluate(_descriptor_samples(ds, split.query, q),
                    _descriptor_samples(ds, split.gallery, g), protocol, threads=threads)


def cmd_eval(args, ranking_depth: int | None = None) -> int:
    config_path = args.config
    if args.checkpoint and config_path is None and (Path(args.checkpoint) / RUN_CONFIG).exists():
        config_path = Path(args.checkpoint) / RUN_CONFIG
    cfg = load_config(config_path, args.preset,
                      {"seed": args.seed, "mode": args.mode, "eval_threads": args.eval_threads})
    ds = load_dataset(args.data)
    split = _split(ds, cfg)
    if args.checkpoint:
        try:
            params, _, model_cfg = load_checkpoint(args.checkpoint)
        except (OSError, KeyError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot load checkpoint {args.checkpoint}: {err}") from None
        q = embed(ds.tensors[split.query], model_cfg, params)
        g = embed(ds.tensors[split.gallery], model_cfg, params)
    else:
        q = _raw_descriptors(ds.tensors[split.query], cfg)
        g = _raw_descriptors(ds.tensors[split.gallery], cfg)
    queries = _descriptor_samples(ds, split.query, q)
    gallery = _descriptor_samples(ds, split.gallery, g)
    protocol = cfg.eval_protocol()
    report = evaluate(queries, gallery, protocol, threads=cfg.eval_threads)
    payload = report.to_dict()

    depth = ranking_depth if ranking_depth is not None else args.export_ranking
    if depth:
        if not args.ranking_out:
            raise UsageError("--export-ranking needs --ranking-out PATH")
        rows = export_ranking(queries, gallery, protocol, depth)
        try:
            Path(args.ranking_out).write_text(ranking_to_csv(rows), encoding="utf-8")
        except OSError as err:
            raise UsageError(f"cannot write {args.ranking_out}: {err.strerror or err}") from None
        log.info("wrote %d ranking rows to %s", len(rows), args.ranking_out)
    _emit(payload)
    return EXIT_OK


def cmd_rank(args) -> int:
    return cmd_eval(args, ranking_depth=args.depth)


# gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run(args.stage, degenerate=args.degenerate)
    except ValueError as err:
        raise UsageError(str(err)) from None
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.stage}: {status} rel error {r.error:.3e} (tol {r.tolerance:g}) {r.detail}",
              file=sys.stderr)
    passed = all(r.passed for r in results)
    _emit({"passed": passed, "stages": [r.to_dict() for r in results]})
    return EXIT_OK if passed else EXIT_VERIFY


# parser ------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=["desk", "paper"], help="hyperparameter bundle")
    p.add_argument("--seed", type=int, help="master seed (default: $SUBPOOL_SEED, else 0)")


def _add_eval_args(p: argparse.ArgumentParser) -> None:
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--checkpoint", help="trained model directory (default: pool raw features)")
    p.add_argument("--mode", choices=["single", "multi"], help="query protocol")
    p.add_argument("--eval-threads", type=_positive, help="per-query worker threads")
    p.add_argument("--ranking-out", help="CSV path for exported rankings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subpool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic identity dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ids", type=_positive, help="number of identities")
    p.add_argument("--per-id", type=_positive, help="images per identity")
    p.add_argument("--cameras", type=_positive)
    p.add_argument("--channels", type=_positive)
    p.add_argument("--height", type=_positive)
    p.add_argument("--width", type=_positive)
    p.add_argument("--noise", type=float, help="intra-class noise std")
    p.add_argument("--camera-shift", type=float, help="per-camera offset std")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the training split, then evaluate")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=_non_negative)
    p.add_argument("--no-eval", action="store_true", help="skip the final held-out evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the held-out split")
    _add_eval_args(p)
    p.add_argument("--export-ranking", type=_positive, metavar="N",
                   help="also write the top-N ranking per query")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="eval plus ranking export")
    _add_eval_args(p)
    p.add_argument("--depth", type=_positive, default=10, help="rows per query")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--stage", action="append", choices=sorted(gradcheck.STAGES),
                   help="run only this stage (repeatable)")
    p.add_argument("--degenerate", action="store_true",
                   help="include the near-degenerate spectrum pooling case")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, TensorFileError, TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteGradientError, RankDeficientError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
