"""``gesturenet`` command line: train, eval, binarize, infer, segment, synth, bench."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import pnm
from .bench import format_bench, run_bench
from .binary import (BINARY_MAGIC, binarize_model, load_binarized_model, save_binarized_model,
                     storage_report)
from .config import ConfigError, RunConfig, load_config
from .dataset import ANGLES, SynthConfig, augment_rotations, load_manifest, make_folds, \
    prepare_masks, synth_generate
from .estimators import GestureNetClassifier, check_masks
from .evaluation import (ConfusionMatrix, cv_report, run_cross_validation, stats_dict,
                         summary_stats, vote, vote_batch, write_report)
from .nn import FLOAT_MAGIC, load_float_model, save_float_model
from .segmentation import SegmentationParams, resize_mask, segment_full_resolution

log = logging.getLogger("gesturenet")

EVAL_FORMAT = "gesturenet-eval/1"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


# ------------------------------------------------------------------- models

class ModelFile:
    """A ``.hgm`` or ``.hgb`` file behind a ``predict_proba`` interface.

    Binarized files run through the add/sub path when ``addsub`` is set,
    otherwise through their materialized ``alpha*B`` weights (same values, faster).
    """

    def __init__(self, path, addsub=False):
        self.path = Path(path)
        magic = self.path.read_bytes()[:4]
        if magic == FLOAT_MAGIC:
            self.kind, self.binarized = "float", None
            self.network = load_float_model(self.path)
        elif magic == BINARY_MAGIC:
            self.kind = "binarized"
            self.binarized = load_binarized_model(self.path)
            self.network = self.binarized.materialize()
        else:
            raise ValueError(f"{self.path}: unrecognised model file")
        self.addsub = addsub and self.binarized is not None
        self.classes_ = np.arange(self.network.shapes[-1][-1])

    def predict_proba(self, X, chunk=256):
        X = check_masks(X)
        if self.addsub:
            return self.binarized.predict_proba(X)
        return np.concatenate([self.network.forward(X[i:i + chunk])
                               for i in range(0, len(X), chunk)])


# ------------------------------------------------------------------ helpers

def _load_dataset(cfg, threads):
    with stage("dataset"):
        if not cfg.dataset:
            raise ValueError("no dataset given (--dataset or 'dataset = PATH')")
        samples = load_manifest(cfg.dataset)
        if not samples:
            raise ValueError(f"{cfg.dataset} contains no samples")
    with stage("segmentation"):
        masks = prepare_masks(samples, SegmentationParams(depth_alpha=cfg.depth_alpha), threads)
    labels = np.array([s.gesture for s in samples])
    persons = np.array([s.person_id for s in samples])
    return samples, masks, labels, persons


def _estimator(cfg, mode):
    return GestureNetClassifier(mode=mode, **cfg.estimator_params())


def _modes(cfg):
    return ["float", "binarized"] if cfg.mode == "both" else [cfg.mode]


def _write_json(path, data):
    with stage("output"):
        write_report(path, data)


# ----------------------------------------------------------------- commands

def cmd_train(cfg, args):
    if cfg.mode == "both":
        raise StageError("config", "train needs mode float or binarized")
    if not cfg.out:
        raise StageError("config", "train needs --out MODEL_PATH")
    samples, masks, labels, persons = _load_dataset(cfg, cfg.threads)
    if args.subset:
        with stage("dataset"):
            if args.subset > len(samples):
                raise ValueError(f"subset of {args.subset} from {len(samples)} samples")
            keep = np.sort(np.random.default_rng(cfg.seed).permutation(len(samples))[:args.subset])
            masks, labels = masks[keep], labels[keep]
    if args.no_augment:
        masks = masks[:, ANGLES.index(0):ANGLES.index(0) + 1]
    X = masks.reshape((-1,) + masks.shape[2:])
    y = np.repeat(labels, masks.shape[1])
    model = _estimator(cfg, cfg.mode)
    with stage("training"):
        model.fit(X, y)
        train_acc = float(np.mean(model.predict(X) == y))
    with stage("output"):
        model.save(cfg.out)
        log_path = Path(args.log or f"{cfg.out}.log")
        lines = [f"seed = {cfg.seed}", f"mode = {cfg.mode}", f"samples = {len(X)}"]
        lines += [f"epoch {i + 1} loss {v:.8f}" for i, v in enumerate(model.loss_curve_)]
        lines.append(f"train_accuracy = {train_acc:.6f}")
        log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {cfg.mode} model on {len(X)} masks; "
          f"final loss {model.loss_curve_[-1]:.6f}, training accuracy {100 * train_acc:.2f}%")
    print(f"wrote {cfg.out} and {log_path}")
    return 0


def _print_matrix(title, cm):
    print(cm.format(title))
    try:
        s = summary_stats(cm)
        print(f"mean {s.mean_accuracy:.2f}%  min {s.min_accuracy:.2f}%  variance {s.variance:.2f}")
    except ValueError as exc:
        print(f"stats unavailable: {exc}")


def cmd_eval(cfg, args):
    samples, masks, labels, persons = _load_dataset(cfg, cfg.threads)
    meta = {"config": cfg.fingerprint(), "samples": len(samples)}
    if args.model:
        with stage("model"):
            model = ModelFile(args.model)
        with stage("evaluation"):
            pred, _ = vote_batch(model, masks)
            cm = ConfusionMatrix.from_predictions(labels, pred, len(model.classes_))
        meta["model"] = {"path": str(args.model), "kind": model.kind}
        report = {"format": EVAL_FORMAT, "meta": meta, "runs": {
            model.kind: {"merged": {"counts": cm.counts.tolist(), "percent": cm.percent().tolist()},
                         "stats": stats_dict(summary_stats(cm)),
                         "per_class_accuracy": cm.per_class_accuracy().tolist()}}}
        _print_matrix(f"held-out ({model.kind})", cm)
    else:
        plan = make_folds(persons, cfg.seed)
        meta["fold_groups"] = [list(g) for g in plan.groups]
        report = {"format": EVAL_FORMAT, "meta": meta, "runs": {}}
        for mode in _modes(cfg):
            with stage(f"cross-validation ({mode})"):
                result = run_cross_validation(_estimator(cfg, mode), masks, labels, persons, plan,
                                              threads=cfg.threads)
            report["runs"][mode] = cv_report(result)
            if result.failed:
                print(f"{mode}: folds {result.failed} failed (training diverged)")
            _print_matrix(f"{mode} (merged over {len(plan.groups)} folds)", result.merged)
        runs = report["runs"]
        if len(runs) == 2 and runs["float"]["stats"] and runs["binarized"]["stats"]:
            gap = runs["float"]["stats"]["mean_accuracy"] - runs["binarized"]["stats"]["mean_accuracy"]
            report["gap_percentage_points"] = gap
            print(f"float - binarized mean accuracy gap: {gap:.2f} percentage points")
    if cfg.out:
        _write_json(cfg.out, report)
        print(f"wrote {cfg.out}")
    failed = any(r.get("failed_folds") for r in report["runs"].values())
    return 1 if failed else 0


def cmd_binarize(cfg, args):
    if not cfg.out:
        raise StageError("config", "binarize needs --out MODEL.hgb")
    with stage("model"):
        net = load_float_model(args.model)
    with stage("binarization"):
        model = binarize_model(net)
    with stage("output"):
        save_binarized_model(model, cfg.out)
    s = storage_report(net.layers)
    print(f"weights: {s['float_weight_bytes']} B float -> {s['packed_bit_bytes']} B bits "
          f"+ {s['scale_bytes']} B scales")
    print(f"size ratio {s['weight_ratio']:.2f}x (bit ratio {s['bit_ratio']:.0f}x)")
    print(f"wrote {cfg.out}")
    return 0


def cmd_infer(cfg, args):
    with stage("model"):
        model = ModelFile(args.model, addsub=True)
    with stage("input"):
        depth = pnm.read_pgm(args.depth)
    with stage("segmentation"):
        full = segment_full_resolution(depth, SegmentationParams(depth_alpha=cfg.depth_alpha))
        rotations = np.stack([resize_mask(m) for m in augment_rotations(full)])
    with stage("inference"):
        probs = model.predict_proba(rotations).astype(np.float64)
        winner = vote(probs)
        mean = probs.mean(axis=0)
    print(f"class {winner}")
    print("probabilities " + " ".join(f"{p:.6f}" for p in mean))
    if cfg.out:
        _write_json(cfg.out, {"class": winner, "probabilities": mean.tolist(),
                              "rotation_votes": np.argmax(probs, axis=1).tolist()})
    return 0


def cmd_segment(cfg, args):
    if not cfg.out:
        raise StageError("config", "segment needs --out MASK.pgm or MASK.pbm")
    with stage("input"):
        depth = pnm.read_pgm(args.depth)
    with stage("segmentation"):
        mask = segment_full_resolution(depth, SegmentationParams(depth_alpha=cfg.depth_alpha))
        if not args.full_resolution:
            mask = resize_mask(mask)
    with stage("output"):
        if str(cfg.out).lower().endswith(".pbm"):
            pnm.write_pbm(cfg.out, mask)
        else:
            pnm.write_mask_pgm(cfg.out, mask)
    print(f"{int(mask.sum())} foreground pixels of {mask.size}; wrote {cfg.out}")
    return 0


def cmd_synth(cfg, args):
    if not cfg.out:
        raise StageError("config", "synth needs --out DIRECTORY")
    config = SynthConfig(n_classes=args.classes, persons=args.persons, repetitions=args.repetitions)
    with stage("synthesis"):
        samples = synth_generate(cfg.out, config, cfg.seed)
    print(f"wrote {len(samples)} depth maps and {Path(cfg.out) / 'dataset.csv'}")
    return 0


def cmd_bench(cfg, args):
    with stage("benchmark"):
        report = run_bench(cfg.seed, args.reps)
    print(format_bench(report))
    if cfg.out:
        _write_json(cfg.out, report)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "binarize": cmd_binarize, "infer": cmd_infer,
            "segment": cmd_segment, "synth": cmd_synth, "bench": cmd_bench}

# config keys each subcommand accepts as flags
_TRAINING_FLAGS = ("dataset", "epochs", "lr", "momentum", "lr_decay", "batch_size", "depth_alpha",
                   "mode", "xnor_grad", "float_epochs")


def _add_config_flags(p, keys):
    types = {"epochs": int, "batch_size": int, "depth_alpha": int, "lr": float,
             "momentum": float, "lr_decay": float, "dataset": str, "float_epochs": int}
    for key in keys:
        flag = "--" + key.replace("_", "-")
        if key == "mode":
            p.add_argument(flag, choices=("float", "binarized", "both"))
        elif key == "xnor_grad":
            p.add_argument(flag, action="store_const", const=True,
                           help="include the scale-factor term in binarized gradients")
        elif key == "float_epochs":
            p.add_argument(flag, type=int,
                           help="binarized mode: leading epochs trained without binarization")
        else:
            p.add_argument(flag, type=types[key])


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int,
                        help="unsigned 64-bit seed (required where randomness is drawn)")
    common.add_argument("--threads", type=int, help="worker count; results do not depend on it")
    common.add_argument("--out", help="output path")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gesturenet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a float or binarized model")
    _add_config_flags(p, _TRAINING_FLAGS)
    p.add_argument("--subset", type=int, help="train on a seeded subset of N samples")
    p.add_argument("--no-augment", action="store_true", help="train on unrotated masks only")
    p.add_argument("--log", help="training log path (default: OUT.log)")

    p = sub.add_parser("eval", parents=[common], help="cross-validate, or evaluate --model")
    _add_config_flags(p, _TRAINING_FLAGS)
    p.add_argument("--model", help="evaluate this model on the whole dataset instead of CV")

    p = sub.add_parser("binarize", parents=[common], help="convert .hgm to .hgb")
    p.add_argument("model")

    p = sub.add_parser("infer", parents=[common], help="classify one depth frame")
    _add_config_flags(p, ("depth_alpha",))
    p.add_argument("--model", required=True)
    p.add_argument("depth")

    p = sub.add_parser("segment", parents=[common], help="depth frame to hand mask")
    _add_config_flags(p, ("depth_alpha",))
    p.add_argument("--full-resolution", action="store_true", help="skip the 50x50 resize")
    p.add_argument("depth")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic gesture dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--persons", type=int, default=14)
    p.add_argument("--repetitions", type=int, default=10)

    p = sub.add_parser("bench", parents=[common], help="float vs binarized convolution timing")
    p.add_argument("--reps", type=int, default=100)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    keys = ("seed", "threads", "out") + _TRAINING_FLAGS
    overrides = {k: getattr(args, k, None) for k in keys}
    try:
        cfg = load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        cfg.validate(need_seed=args.command not in ("binarize", "infer", "segment"))
    except (ConfigError, OSError, TypeError) as exc:
        print(f"gesturenet {args.command}: config: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(f"gesturenet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
