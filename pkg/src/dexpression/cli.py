"""Command-line entry point: ``dexpression <command> ...``.

Exit codes: 0 success, 1 internal failure (including failed gradient checks),
2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as dt
import hashlib
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import data as D
from . import frameselect as F
from . import layers as L
from . import network as N
from . import training as T
from .synthetic import make_expression_dataset

log = logging.getLogger("dexpression")

CHECKPOINT_NAME = "checkpoint.dxpr"


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


INPUT_ERRORS = (UsageError, D.DatasetError, D.ImageLoadError, N.CheckpointError, N.ClassCountError,
                F.TooFewFramesError, F.FrameSizeMismatchError, T.TooFewSamplesError, T.EmptyDatasetError,
                FileNotFoundError, json.JSONDecodeError)


# ---------------------------------------------------------------- helpers

def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, started: str, config: dict | None, inputs: dict, outputs: list[Path]):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "version": __version__,
        "config": config,
        "seed": getattr(args, "seed", None) if config is None else config.get("seed"),
        "started": started,
        "finished": _now(),
        "inputs": inputs,
        "outputs": sorted(p.name for p in outputs),
    }
    ckpt = out / CHECKPOINT_NAME
    if ckpt.exists() and ckpt in outputs:
        manifest["checkpoint_sha256"] = _sha256(ckpt)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _resolve_config(args) -> T.TrainConfig:
    """Flags override the config file, which overrides the defaults."""
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        values.update(json.loads(path.read_text()))
    for field_name, flag in (("learning_rate", "lr"), ("momentum", "momentum"),
                             ("weight_decay", "weight_decay"), ("epochs", "epochs"),
                             ("batch_size", "batch_size"), ("lr_step_factor", "lr_step_factor"),
                             ("lr_step_epochs", "lr_step_epochs"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            values[field_name] = v
    try:
        return T.TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _load_dataset(args) -> D.LabeledDataset:
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    ds = D.load_class_directory_dataset(root, size=args.input_size)
    if args.classes is not None and args.classes != ds.num_classes:
        raise UsageError(f"--classes {args.classes} but {root} has {ds.num_classes} class directories")
    return ds


def _history_rows(fold, history):
    return [(fold, s) for s in history]


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_config(args)
    ds = _load_dataset(args)
    out = _out_dir(args)
    g = N.build_dexpression(ds.num_classes, input_size=args.input_size)
    params, history = T.train(g, ds, cfg)
    ckpt = out / CHECKPOINT_NAME
    N.save_checkpoint(ckpt, g, params, {"epoch": cfg.epochs, "seed": cfg.seed,
                                        "class_names": ds.class_names, "config": asdict(cfg)})
    rows = _history_rows(0, history)
    T.write_metrics_csv(out / "metrics.csv", rows)
    T.write_loss_table(out / "loss_curve.txt", rows)
    outputs = [ckpt, out / "metrics.csv", out / "loss_curve.txt"]
    _write_manifest(out, args, started, asdict(cfg), {"data": str(args.data)}, outputs)
    final = history[-1] if history else None
    print(f"trained {len(ds)} samples, {cfg.epochs} epochs"
          + (f", final loss {final.loss:.5f}, train accuracy {final.accuracy:.4f}" if final else ""))
    print(f"checkpoint: {ckpt}")
    return 0


def _load_ckpt(path, num_classes=None):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return N.load_checkpoint(path, num_classes)


def _write_predictions(path, preds, class_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "true", "predicted", *[f"p_{n}" for n in class_names]])
        for p in preds:
            w.writerow([p.source_id, class_names[p.true], class_names[p.predicted],
                        *(f"{v:.6f}" for v in p.probabilities)])


def cmd_evaluate(args) -> int:
    started = _now()
    g, params, meta = _load_ckpt(args.checkpoint)
    args.input_size = g.input_shape[-1]
    args.classes = None
    ds = _load_dataset(args)
    if ds.num_classes != g.num_classes:
        raise N.ClassCountError(f"dataset has {ds.num_classes} classes, checkpoint has {g.num_classes}")
    out = _out_dir(args)
    res = T.evaluate(g, params, ds)
    res.confusion.to_csv(out / "confusion.csv")
    res.confusion.to_csv(out / "confusion_counts.csv", percentages=False)
    _write_predictions(out / "predictions.csv", res.predictions, ds.class_names)
    outputs = [out / "confusion.csv", out / "confusion_counts.csv", out / "predictions.csv"]
    _write_manifest(out, args, started, None, {"data": str(args.data), "checkpoint": str(args.checkpoint)},
                    outputs)
    print(f"accuracy {res.accuracy:.4f} ({len(ds)} samples)")
    print(res.confusion.format())
    return 0


def cmd_crossval(args) -> int:
    started = _now()
    if args.k < 2:
        raise UsageError("--k must be >= 2")
    cfg = _resolve_config(args)
    ds = _load_dataset(args)
    out = _out_dir(args)
    g = N.build_dexpression(ds.num_classes, input_size=args.input_size)
    result = T.cross_validate(g, ds, cfg, k=args.k, by_group=args.by_subject, jobs=args.jobs)
    rows = [row for f in result.folds for row in _history_rows(f.fold, f.history)]
    T.write_metrics_csv(out / "metrics.csv", rows)
    T.write_loss_table(out / "loss_curve.txt", rows)
    T.write_fold_report(out / "folds.csv", result)
    cm = result.confusion
    cm.to_csv(out / "confusion.csv")
    cm.to_csv(out / "confusion_counts.csv", percentages=False)
    summary = {"k": args.k, "fold_accuracies": result.fold_accuracies, "mean_accuracy": result.mean_accuracy,
               "pooled_accuracy": cm.accuracy}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    outputs = [out / n for n in ("metrics.csv", "loss_curve.txt", "folds.csv", "confusion.csv",
                                 "confusion_counts.csv", "summary.json")]
    _write_manifest(out, args, started, asdict(cfg), {"data": str(args.data)}, outputs)
    for f in result.folds:
        print(f"fold {f.fold}: accuracy {f.accuracy:.4f} ({len(f.test_indices)} test samples)")
    print(f"mean accuracy {result.mean_accuracy:.4f}")
    print(cm.format())
    return 0


def _sessions(root: Path) -> list[Path]:
    """Directories directly containing frame images, ordered by path."""
    found = {p.parent for p in root.rglob("*") if p.is_file() and p.suffix.lower() in D.IMAGE_SUFFIXES}
    return sorted(found)


def cmd_extract(args) -> int:
    started = _now()
    root = Path(args.frames)
    if not root.is_dir():
        raise UsageError(f"frames directory {root} does not exist")
    sessions = _sessions(root)
    if not sessions:
        raise UsageError(f"{root}: no frame images found")
    out = _out_dir(args)
    extractions = []
    for sdir in sessions:
        rel = sdir.relative_to(root).as_posix()
        seq = F.load_frame_sequence(sdir, session=rel)
        ex = F.extract_mmi_style(seq, count=args.count, discard=args.discard, sigma=args.sigma,
                                 size=args.input_size)
        target = out / "images" / rel
        target.mkdir(parents=True, exist_ok=True)
        for idx, img in zip(ex.kept, ex.images):
            D.save_image(target / f"frame_{idx:05d}.png", img)
        extractions.append(ex)
        print(f"{rel}: kept {len(ex.kept)} of {len(seq)} frames")
    F.write_manifest(out / "extraction.csv", extractions, args.sigma, args.count)
    _write_manifest(out, args, started, {"sigma": args.sigma, "count": args.count, "discard": args.discard},
                    {"frames": str(root)}, [out / "extraction.csv"])
    return 0


def cmd_gradcheck(args) -> int:
    if args.full_small:
        report = N.check_network_gradients(input_size=16, seed=args.seed,
                                           tolerance=args.tolerance or 1e-3)
        print(f"full-small: {report}")
        return 0 if report.passed else 1
    kinds = L.LAYER_KINDS if args.layer == "all" else (args.layer,)
    ok = True
    for kind in kinds:
        report = L.check_layer(kind, seed=args.seed, tolerance=args.tolerance or 1e-4)
        print(f"{kind}: {report}")
        ok &= report.passed
    return 0 if ok else 1


def _load_input_image(path, g) -> np.ndarray:
    path = Path(path)
    img = D.load_image(path)
    size = g.input_shape[-1]
    if img.shape[1:] != (size, size):
        img = D.resize_to_input(img, size)
    return img


def cmd_predict(args) -> int:
    g, params, meta = _load_ckpt(args.checkpoint)
    names = meta.get("class_names") or [str(i) for i in range(g.num_classes)]
    for path in args.image:
        probs, _ = N.forward(g, params, _load_input_image(path, g))
        idx = L.argmax_class(probs)
        if args.json:
            print(json.dumps({"image": str(path), "class": names[idx], "index": idx,
                              "probabilities": {n: float(p) for n, p in zip(names, probs)}}))
        else:
            print(f"{path}: {names[idx]} ({probs[idx]:.4f})")
            for n, p in zip(names, probs):
                print(f"  {n:>12s} {p:.6f}")
    return 0


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower()


def activation_images(act: np.ndarray) -> np.ndarray:
    """Min-max normalize a whole layer to [0,1].

    Channels that are constant on their own (dead ReLUs, a constant layer)
    carry no picture and are rendered mid-gray.
    """
    a = act.astype(np.float64)
    if a.ndim == 1:
        a = a[:, None, None]
    lo, hi = a.min(), a.max()
    out = np.full(a.shape, 0.5) if hi - lo <= 0 else (a - lo) / (hi - lo)
    flat = a.reshape(len(a), -1)
    out[flat.min(axis=1) == flat.max(axis=1)] = 0.5
    return out


def cmd_visualize(args) -> int:
    started = _now()
    g, params, meta = _load_ckpt(args.checkpoint)
    valid = g.layer_names()
    unknown = [n for n in args.layers if n not in valid]
    if unknown:
        raise UsageError(f"unknown layer(s) {unknown}; valid names: {', '.join(valid)}")
    _, acts = N.forward(g, params, _load_input_image(args.image, g), capture=True)
    out = _out_dir(args)
    written = []
    for name in args.layers:
        imgs = activation_images(acts[name])
        ldir = out / _slug(name)
        ldir.mkdir(exist_ok=True)
        for c, img in enumerate(imgs):
            path = ldir / f"channel_{c:03d}.png"
            D.save_image(path, img)
            written.append(path)
        print(f"{name}: {len(imgs)} channel images -> {ldir}")
    _write_manifest(out, args, started, None, {"checkpoint": str(args.checkpoint), "image": str(args.image)},
                    [])
    return 0


def cmd_synth(args) -> int:
    ds = make_expression_dataset(args.per_class, size=args.input_size, seed=args.seed, noise=args.noise)
    D.write_class_directory_dataset(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset root with one subdirectory per class")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--classes", type=int, help="expected number of classes")
    p.add_argument("--input-size", type=int, default=D.INPUT_SIZE)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-step-factor", type=float)
    p.add_argument("--lr-step-epochs", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dexpression", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, help="BLAS thread limit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on a class-directory dataset")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    _add_train_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--by-subject", action="store_true",
                   help="keep each subject/session (first path component below the class dir) in one fold")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("extract", help="select representative frames from frame-sequence directories")
    p.add_argument("--frames", required=True, help="root; every directory holding images is one session")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=F.DEFAULT_SIGMA)
    p.add_argument("--count", type=int, default=F.DEFAULT_COUNT)
    p.add_argument("--discard", type=int, default=F.DEFAULT_DISCARD)
    p.add_argument("--input-size", type=int, default=D.INPUT_SIZE)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--layer", choices=[*L.LAYER_KINDS, "all"])
    grp.add_argument("--full-small", action="store_true", help="whole network on 16x16 inputs")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="classify images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", nargs="+")
    p.add_argument("--json", action="store_true", help="one JSON object per line")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("visualize", help="write per-channel activation images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layers", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("synth", help="generate the synthetic 7-class expression dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--input-size", type=int, default=D.INPUT_SIZE)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = contextlib.nullcontext()
    if args.threads:
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
