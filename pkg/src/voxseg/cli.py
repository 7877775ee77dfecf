"""Command-line entry point: ``voxseg <subcommand> [options]``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .inference import (
    argmax_labels,
    dense_macs,
    segment_dense,
    sliding_window_macs,
    sliding_window_oracle,
)
from .io import BrainMask, LabelMap, NiftiError, Volume, normalize_intensity, read_nifti, write_nifti
from .metrics import aggregate, evaluate, largest_component_filter
from .network import ARCHITECTURES, PAPER_CONV_WIDTHS, PAPER_FC_WIDTHS, make_spec
from .phantom import PhantomSpec, generate_with_masks
from .training import TrainingConfig, train

log = logging.getLogger("voxseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "VOXSEG_THREADS"
MANIFEST = "manifest.json"
ARCH_CHOICES = tuple(a.lower() for a in ARCHITECTURES)

_CONFIG_HELP = {
    "epochs": "training epochs",
    "subepochs_per_epoch": "subepochs per epoch",
    "samples_per_subepoch": "segments drawn per subepoch",
    "batch_size": "segments per optimizer step",
    "segment_size": "edge length of training segments",
    "initial_lr": "initial learning rate",
    "lr_halving_period": "halve the learning rate every this many epochs",
    "momentum": "momentum coefficient",
    "foreground_fraction": "share of segments centered on foreground voxels",
}


class UsageError(Exception):
    """Bad arguments or missing inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _dims(text: str) -> tuple[int, int, int]:
    d = _int_tuple(text)
    if len(d) == 1:
        d = d * 3
    if len(d) != 3 or min(d) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or D,H,W with positive entries, got {text!r}")
    return d


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default: 0)")
    p.add_argument(
        "--threads", type=int, default=None,
        help=f"worker threads; falls back to ${THREADS_ENV}, then the CPU count",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _add_network_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", type=str.lower, choices=ARCH_CHOICES, default="cnn_multi",
                   help="architecture (default: cnn_multi)")
    p.add_argument(
        "--conv-widths", type=_int_tuple, default=None,
        help="comma-separated conv layer widths (paper default: "
        + ", ".join(f"{a} {','.join(map(str, w))}" for a, w in PAPER_CONV_WIDTHS.items()) + ")",
    )
    p.add_argument("--fc-widths", type=_int_tuple, default=None,
                   help=f"fully-connected widths (paper default: {','.join(map(str, PAPER_FC_WIDTHS))})")
    p.add_argument("--num-classes", type=int, default=9, help="output classes (paper default: 9)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="voxseg", description="Dense FCNN segmentation of subcortical structures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    d = PhantomSpec()
    p.add_argument("--num-subjects", type=int, default=d.num_subjects, help="subjects to generate")
    p.add_argument("--dims", type=_dims, default=d.dims, help="volume size, N or D,H,W")
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma, help="Gaussian noise std")
    p.add_argument("--bias-amplitude", type=float, default=d.bias_amplitude,
                   help="multiplicative bias field amplitude")

    p = sub.add_parser("train", parents=[common], help="train a network on a dataset directory")
    p.add_argument("--data", type=Path, required=True, help="training dataset directory")
    p.add_argument("--val-data", type=Path, default=None, help="optional validation dataset directory")
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for checkpoint.vxck, checkpoint.json and train_log.csv")
    p.add_argument("--config", type=Path, default=None,
                   help="config file (JSON or 'key = value' lines); flags override it")
    _add_network_args(p)
    defaults = TrainingConfig()
    for f in fields(TrainingConfig):
        if f.name == "seed":
            continue
        p.add_argument(
            "--" + f.name.replace("_", "-"), dest=f.name, default=None,
            type=float if f.type == "float" else int,
            help=f"{_CONFIG_HELP[f.name]} (paper default: {getattr(defaults, f.name)})",
        )
    p.add_argument("--no-normalize", action="store_true", help="skip intensity normalization")

    p = sub.add_parser("segment", parents=[common], help="segment volumes with a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="NIfTI volume or dataset directory")
    p.add_argument("--mask", type=Path, default=None, help="brain mask for a single input volume")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--tile", type=int, default=35, help="input tile edge length")
    p.add_argument("--no-postprocess", action="store_true", help="skip the largest-component filter")
    p.add_argument("--no-normalize", action="store_true", help="skip intensity normalization")
    p.add_argument("--save-probs", action="store_true", help="also write one probability map per class")

    p = sub.add_parser("evaluate", parents=[common], help="score segmentations against references")
    p.add_argument("--ref", type=Path, required=True, help="reference label map or dataset directory")
    p.add_argument("--pred", type=Path, required=True, help="predicted label map or segment output directory")
    p.add_argument("--out", type=Path, required=True, help="CSV report path")

    p = sub.add_parser("bench", parents=[common], help="MAC census of dense vs sliding-window inference",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--dims", type=_dims, default=(40, 40, 40), help="volume size, N or D,H,W")
    p.add_argument("--tile", type=int, default=35, help="input tile edge length")
    p.add_argument("--arch", type=str.lower, choices=ARCH_CHOICES + ("all",), default="all")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")

    p = sub.add_parser("oracle-check", parents=[common],
                       help="compare dense inference with the per-voxel sliding-window path",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="NIfTI volume")
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--tile", type=int, default=35, help="input tile edge length")
    return parser


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# dataset directories --------------------------------------------------------

def load_dataset(directory: Path) -> list[dict]:
    """Subjects listed in ``manifest.json`` as dicts of absolute paths."""
    _require(directory, "dataset directory")
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise UsageError(f"{directory} has no {MANIFEST}")
    manifest = json.loads(mpath.read_text())
    subjects = []
    for s in manifest["subjects"]:
        entry = {"id": s["id"]}
        for key in ("image", "labels", "mask"):
            if s.get(key):
                entry[key] = _require(directory / s[key], f"{key} file")
        subjects.append(entry)
    if not subjects:
        raise UsageError(f"{directory} lists no subjects")
    return subjects


def _read(path: Path, kind: str):
    return read_nifti(path, kind=kind)


def _load_training_items(directory: Path, normalize: bool):
    items = []
    for s in load_dataset(directory):
        if "labels" not in s:
            raise UsageError(f"subject {s['id']} has no label map")
        vol = _read(s["image"], "volume")
        lab = _read(s["labels"], "labels")
        mask = BrainMask(_read(s["mask"], "labels").labels > 0) if "mask" in s else None
        if normalize:
            vol = normalize_intensity(vol, mask)
        items.append((vol, lab, mask))
    return items


# subcommands -------------------------------------------------------------

def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims, num_subjects=args.num_subjects, noise_sigma=args.noise_sigma,
        bias_amplitude=args.bias_amplitude, seed=args.seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (vol, lab, mask) in enumerate(generate_with_masks(spec)):
        sid = f"subject_{i:03d}"
        files = {"image": f"{sid}_image.nii", "labels": f"{sid}_labels.nii", "mask": f"{sid}_mask.nii"}
        write_nifti(vol, args.out / files["image"])
        write_nifti(lab, args.out / files["labels"])
        write_nifti(LabelMap(mask.mask.astype(np.int64), 2, vol.spacing, vol.affine), args.out / files["mask"])
        entries.append({"id": sid, **files})
    manifest = {
        "generator": "phantom",
        "seed": args.seed,
        "dims": list(spec.dims),
        "num_subjects": spec.num_subjects,
        "noise_sigma": spec.noise_sigma,
        "bias_amplitude": spec.bias_amplitude,
        "subjects": entries,
    }
    (args.out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(entries)} subjects to {args.out}")
    return EXIT_OK


def _training_config(args) -> TrainingConfig:
    cfg = TrainingConfig.from_file(_require(args.config, "config file")) if args.config else TrainingConfig()
    overrides = {k: getattr(args, k) for k in TrainingConfig.keys() if k != "seed"}
    return cfg.override(seed=args.seed, **overrides)


def cmd_train(args) -> int:
    cfg = _training_config(args)
    spec = make_spec(args.arch, args.conv_widths, args.fc_widths, args.num_classes)
    data = _load_training_items(args.data, not args.no_normalize)
    val = _load_training_items(args.val_data, not args.no_normalize) if args.val_data else None
    args.out.mkdir(parents=True, exist_ok=True)
    log_path = args.out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    t0 = time.perf_counter()
    state, rows = train(spec, data, cfg, validation=val, log_path=log_path)
    ckpt = args.out / "checkpoint.vxck"
    save_checkpoint(ckpt, state, spec, seed=cfg.seed, epoch=cfg.epochs, config=cfg.to_dict())
    print(f"trained {spec.name} for {len(rows)} subepochs in {time.perf_counter() - t0:.1f} s")
    print(f"final mean loss {rows[-1]['mean_loss']:.5f}; checkpoint {ckpt}; log {log_path}")
    return EXIT_OK


def _segment_one(vol: Volume, mask, state, spec, args):
    if not args.no_normalize:
        vol = normalize_intensity(vol, mask)
    probs = segment_dense(vol, state, spec, input_tile=args.tile, mask=mask, n_jobs=args.threads)
    labels = argmax_labels(probs)
    if not args.no_postprocess:
        labels = largest_component_filter(labels)
    return probs, labels


def cmd_segment(args) -> int:
    state, spec = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    _require(args.input, "input")
    args.out.mkdir(parents=True, exist_ok=True)
    if args.input.is_dir():
        jobs = [
            (s["id"], s["image"], s.get("mask"), f"{s['id']}_seg.nii")
            for s in load_dataset(args.input)
        ]
    else:
        jobs = [(args.input.stem, args.input, args.mask, "labelmap.nii")]
    outputs = []
    for sid, image, mask_path, name in jobs:
        vol = _read(image, "volume")
        mask = None
        if mask_path is not None:
            mask = BrainMask(_read(_require(Path(mask_path), "mask"), "labels").labels > 0)
        probs, labels = _segment_one(vol, mask, state, spec, args)
        write_nifti(labels, args.out / name)
        if args.save_probs:
            prefix = "" if name == "labelmap.nii" else f"{sid}_"
            for c in range(probs.num_classes):
                write_nifti(probs.class_volume(c), args.out / f"{prefix}prob_{c}.nii")
        outputs.append({"id": sid, "labels": name})
        log.info("segmented %s", sid)
    if args.input.is_dir():
        (args.out / MANIFEST).write_text(
            json.dumps({"generator": "segment", "subjects": outputs}, indent=2) + "\n"
        )
    print(f"segmented {len(outputs)} volume(s) into {args.out}")
    return EXIT_OK


def _pairs(ref: Path, pred: Path):
    _require(ref, "reference")
    _require(pred, "prediction")
    if ref.is_dir() != pred.is_dir():
        raise UsageError("--ref and --pred must both be files or both be directories")
    if not ref.is_dir():
        return [(ref.stem, ref, pred)]
    preds = {s["id"]: s for s in load_dataset(pred)}
    pairs = []
    for s in load_dataset(ref):
        if s["id"] not in preds:
            raise UsageError(f"no prediction for subject {s['id']}")
        if "labels" not in s or "labels" not in preds[s["id"]]:
            raise UsageError(f"subject {s['id']} lacks a label map")
        pairs.append((s["id"], s["labels"], preds[s["id"]]["labels"]))
    return pairs


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def cmd_evaluate(args) -> int:
    reports = []
    for sid, ref_path, pred_path in _pairs(args.ref, args.pred):
        ref = _read(ref_path, "labels")
        pred = _read(pred_path, "labels")
        reports.append(evaluate(ref, pred, subject=sid))
    summary = aggregate(reports)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "structure", "dsc", "mhd_mm"])
        for rep in reports:
            for row in rep.rows():
                w.writerow([row["subject"], row["structure"], _fmt(row["dsc"]), _fmt(row["mhd_mm"])])
        # summary block: one mean row and one std row per structure
        for stat in ("mean", "std"):
            for name, s in summary.items():
                w.writerow([stat, name, _fmt(s[f"dsc_{stat}"]), _fmt(s[f"mhd_{stat}"])])
    print(f"{'structure':<12} {'dsc mean':>9} {'dsc std':>8} {'mhd mean':>9} {'mhd std':>8}")
    for name, s in summary.items():
        print(f"{name:<12} {s['dsc_mean']:9.4f} {s['dsc_std']:8.4f} {s['mhd_mean']:9.3f} {s['mhd_std']:8.3f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    archs = ARCH_CHOICES if args.arch == "all" else (args.arch,)
    results = {}
    for arch in archs:
        spec = make_spec(arch)
        dense = dense_macs(spec, args.dims, args.tile)
        sw = sliding_window_macs(spec, args.dims)
        results[spec.name] = {"dense_macs": dense, "sliding_window_macs": sw, "ratio": sw / dense}
    if args.json:
        print(json.dumps({"dims": list(args.dims), "tile": args.tile, "results": results}, indent=2))
    else:
        print(f"dims {args.dims}, input tile {args.tile}")
        print(f"{'arch':<11} {'dense MACs':>16} {'sliding MACs':>18} {'ratio':>8}")
        for arch, r in results.items():
            print(f"{arch:<11} {r['dense_macs']:16,d} {r['sliding_window_macs']:18,d} {r['ratio']:8.1f}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    state, spec = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    vol = _read(_require(args.input, "input"), "volume")
    mask = BrainMask(_read(_require(args.mask, "mask"), "labels").labels > 0) if args.mask else None
    t0 = time.perf_counter()
    dense = argmax_labels(segment_dense(vol, state, spec, input_tile=args.tile, mask=mask, n_jobs=args.threads))
    t1 = time.perf_counter()
    ref = sliding_window_oracle(vol, state, spec, mask=mask)
    t2 = time.perf_counter()
    agree = float(np.mean(dense.labels == ref.labels))
    print(f"dense {t1 - t0:.2f} s, sliding window {t2 - t1:.2f} s, agreement {agree:.6%}")
    if agree < 1.0:
        print(f"{int(np.sum(dense.labels != ref.labels))} voxels differ", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and --version exit 0, usage errors 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, NiftiError, CheckpointError, ValueError) as exc:
        print(f"voxseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"voxseg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
