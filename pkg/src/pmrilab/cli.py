"""Command-line pipeline: generate, reconstruct, train, evaluate, compare.

Every command writes a ``manifest.json`` holding the command name and all of
its arguments, so a run can be replayed with :func:`replay_argv`.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .clear import PatchConfig, clear_reconstruct
from .phantom import AcquisitionConfig, PhantomSpec, make_dataset, normalize, sos, zero_filled
from .tensors_io import (ConfigError, Dataset, RunConfig, TensorFormatError, load_config,
                         load_dataset, read_json, read_tensor, save_dataset, write_json,
                         write_tensor)
from .unrolled import TrainingDiverged, build_model, load_model, predict, save_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
METHODS = ("zero-filled", "clear", "idslr")
SEG_PALETTE = (0, 0, 0, 70, 130, 230, 120, 200, 90, 240, 200, 60)


class UsageError(Exception):
    """Bad arguments or inconsistent input data (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers


def dataset_ids(data_dir):
    d = Path(data_dir)
    manifest = d / "manifest.json"
    if not manifest.is_file():
        raise UsageError(f"{d}: not a dataset directory (no manifest.json)")
    return list(read_json(manifest)["datasets"])


def load_datasets(data_dir):
    return {i: load_dataset(Path(data_dir) / i) for i in dataset_ids(data_dir)}


def window_png(path, image, reference):
    """8-bit grayscale PNG, min-max windowed over the reference's range."""
    lo, hi = float(np.min(reference)), float(np.max(reference))
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip((np.asarray(image, dtype=np.float64) - lo) * scale, 0, 255)
    Image.fromarray(np.round(pix).astype(np.uint8)).save(path)


def labels_png(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", labels.shape[::-1], labels.tobytes())
    img.putpalette(SEG_PALETTE)
    img.save(path)


def clear_dataset(ds: Dataset, cfg: RunConfig):
    """CLEAR on the unit-normalized dataset; returns coil images in input units."""
    scaled, scale = normalize(ds)
    gamma, state = clear_reconstruct(
        scaled.kspace, scaled.mask, cfg.clear_lam, PatchConfig(cfg.patch_size, cfg.patch_stride),
        iters=cfg.clear_iters, eps_scale=cfg.eps_scale, eps_decay=cfg.eps_decay,
        eps_floor=cfg.eps_floor, cg_tol=cfg.cg_tol, cg_maxiter=cfg.cg_maxiter)
    return gamma / scale, state


def _write_manifest(out_dir, command, args, **extra):
    record = {"command": command, "args": _args_dict(args)}
    record.update(extra)
    write_json(Path(out_dir) / "manifest.json", record)


def _args_dict(args):
    skip = {"func", "command", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def replay_argv(manifest, out):
    """Argument vector that re-runs the command recorded in ``manifest``,
    writing to ``out`` (the manifest lives inside the output, so the output
    location itself is not recorded)."""
    args = dict(manifest["args"])
    argv = ["--deterministic"] if args.pop("deterministic", False) else []
    argv.append(manifest["command"])
    if manifest["command"] != "compare" or out is not None:
        argv.extend(["--out", str(out)])
    for key, value in args.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, list):
            if value:
                argv.append(flag)
                argv.extend(str(v) for v in value)
        elif value is not None:
            argv.extend([flag, str(value)])
    return argv


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    try:
        acq = AcquisitionConfig(coils=args.coils, noise=args.noise, accel=args.accel,
                                center_fraction=args.center_fraction,
                                density_exponent=args.density_exponent)
        spec = PhantomSpec(height=args.size, width=args.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    ids, fractions = [], []
    for i in range(args.count):
        ds_id = f"{i:04d}"
        try:
            ds = make_dataset(args.seed + i, acq, spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        save_dataset(out / ds_id, ds, {"id": ds_id})
        ids.append(ds_id)
        fractions.append(ds.sampled_fraction)
        print(f"{ds_id}: seed {args.seed + i}, sampled fraction {ds.sampled_fraction:.4f}")
    _write_manifest(out, "generate", args, datasets=ids, sampled_fractions=fractions)
    return EXIT_OK


def cmd_reconstruct(args):
    if args.method == "idslr" and not args.checkpoint:
        raise UsageError("--checkpoint is required for method idslr")
    if args.method != "idslr" and args.checkpoint:
        raise UsageError("--checkpoint only applies to method idslr")
    cfg = load_config(args.config) if args.config else RunConfig()
    model = None
    if args.method == "idslr":
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model = load_model(args.checkpoint)
    out = Path(args.out)
    snrs = {}
    for ds_id, ds in load_datasets(args.data).items():
        probs = None
        if args.method == "zero-filled":
            gamma = zero_filled(ds)
        elif args.method == "clear":
            gamma, _ = clear_dataset(ds, cfg)
        else:
            gamma, probs = predict(ds, model)
        image = sos(gamma).astype(np.float32)
        d = out / ds_id
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "recon.pmri", image)
        window_png(d / "recon.png", image, ds.reference)
        if probs is not None:
            labels = metrics.predict_labels(probs)
            write_tensor(d / "labels.pmri", labels)
            labels_png(d / "labels.png", labels)
        snrs[ds_id] = metrics.snr_db(image, ds.reference)
        print(f"{ds_id}: {args.method} SNR {snrs[ds_id]:.3f} dB")
    _write_manifest(out, "reconstruct", args, method=args.method, datasets=list(snrs),
                    config=cfg.to_dict(), snr_db=[snrs[k] for k in snrs])
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("labelled_fraction", "epochs", "seed", "lr", "alpha")
                 if getattr(args, k) is not None}
    try:
        cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    datasets = load_datasets(args.data)
    ids = list(datasets)
    first = datasets[ids[0]]
    model = build_model(args.mode, coils=first.kspace.shape[0], width=cfg.width,
                        unrolls=cfg.unrolls, lam=cfg.lam, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch, loss):
        if not args.quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs}: loss {loss:.6g}", flush=True)

    model, result = train([datasets[i] for i in ids], model, cfg, progress)
    save_model(out / "checkpoint.pmri", model)
    with open(out / "loss_trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss", "rec"))
        for k, (loss, rec) in enumerate(zip(result.epoch_loss, result.epoch_rec)):
            w.writerow((k + 1, repr(float(loss)), repr(float(rec))))
    _write_manifest(out, "train", args, config=cfg.to_dict(), seed=cfg.seed, mode=args.mode,
                    datasets=ids, labelled_ids=[ids[i] for i in result.labelled_ids],
                    epoch_loss=result.epoch_loss, parameters=model.parameter_count())
    return EXIT_OK


def cmd_evaluate(args):
    recon_manifest = read_json(Path(args.recon) / "manifest.json")
    method = args.method or recon_manifest.get("method", "unknown")
    data_ids = dataset_ids(args.data)
    recon_ids = list(recon_manifest.get("datasets", []))
    if sorted(data_ids) != sorted(recon_ids):
        raise UsageError(f"dataset ids differ between {args.recon} and {args.data}")
    rows = []
    for ds_id in data_ids:
        ds = load_dataset(Path(args.data) / ds_id)
        image = read_tensor(Path(args.recon) / ds_id / "recon.pmri")
        if image.shape != ds.reference.shape:
            raise UsageError(f"{ds_id}: reconstruction shape {image.shape} "
                             f"does not match reference {ds.reference.shape}")
        pred = None
        if args.seg:
            path = Path(args.recon) / ds_id / "labels.pmri"
            if not path.is_file():
                raise UsageError(f"{ds_id}: --seg given but {path} is missing")
            if ds.labels is None:
                raise UsageError(f"{ds_id}: dataset has no reference labels")
            pred = read_tensor(path)
        rows.append(metrics.evaluate_one(ds_id, method, image, ds.reference, pred, ds.labels))
    metrics.write_report(args.out, rows)
    sys.stdout.write(metrics.format_summary(metrics.summarize(rows)))
    return EXIT_OK


def cmd_compare(args):
    rows = []
    for path in args.reports:
        rows.extend(metrics.read_report(path))
    per_method = {}
    for r in rows:
        per_method.setdefault(r.method, []).append(r.dataset_id)
    id_sets = {m: sorted(ids) for m, ids in per_method.items()}
    if len({tuple(v) for v in id_sets.values()}) > 1:
        raise UsageError("reports cover different dataset ids")
    table = metrics.format_summary(metrics.summarize(rows))
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="pmrilab", description=__doc__.splitlines()[0])
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bit-reproducible runs")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write seeded phantom datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--accel", type=float, default=6.0)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--center-fraction", type=float, default=0.04)
    g.add_argument("--density-exponent", type=float, default=2.0)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct every dataset in a directory")
    r.add_argument("--method", choices=METHODS, required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train the unrolled network")
    t.add_argument("--mode", choices=("joint", "recon-only", "cascade"), default="joint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--labelled-fraction", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score reconstructions against references")
    e.add_argument("--recon", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seg", action="store_true")
    e.add_argument("--method")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="merge reports and print per-method means")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def _run(args):
    try:
        return args.func(args)
    except (UsageError, ConfigError, TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return _run(args)
    return _run(args)
