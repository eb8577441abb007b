"""Image-quality and segmentation metrics, plus the CSV evaluation report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensors_io import CLASS_NAMES

REPORT_COLUMNS = ("dataset_id", "method", "snr_db", "ssim", "dice_csf", "dice_gm", "dice_wm")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def snr_db(x_rec, x_org):
    """``20 log10(||x_org|| / ||x_org - x_rec||)``; ``inf`` for a perfect match.

    Raises
    ------
    ValueError
        If the reference has zero norm.
    """
    x_org = np.asarray(x_org)
    ref = np.linalg.norm(x_org.ravel())
    if ref == 0:
        raise ValueError("reference image has zero norm")
    err = np.linalg.norm((x_org - np.asarray(x_rec)).ravel())
    if err == 0:
        return math.inf
    return float(20.0 * np.log10(ref / err))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x_rec, x_org):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use reflected borders, so every pixel contributes a
    window and tiny images are handled. The dynamic range is ``max(x_org)``.
    """
    x = np.asarray(x_rec, dtype=np.float64)
    y = np.asarray(x_org, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2D images, got {x.shape} and {y.shape}")
    big_l = float(y.max())
    c1 = (SSIM_K1 * big_l) ** 2
    c2 = (SSIM_K2 * big_l) ** 2
    win = gaussian_window()

    def filt(a):
        return ndimage.correlate(a, win, mode="mirror")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def dice(pred, ref, c):
    """Dice overlap of class ``c``; 1.0 when the class is absent from both."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {ref.shape}")
    a = pred == c
    b = ref == c
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def predict_labels(probs):
    """Arg-max class map; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=0).astype(np.uint8)


@dataclass
class EvalRow:
    dataset_id: str
    method: str
    snr_db: float
    ssim: float
    dice: tuple | None = None  # (csf, gm, wm)


def evaluate_one(dataset_id, method, recon_sos, reference, labels_pred=None, labels_ref=None):
    d = None
    if labels_pred is not None:
        if labels_ref is None:
            raise ValueError("reference labels required for Dice")
        d = tuple(dice(labels_pred, labels_ref, c) for c in range(1, len(CLASS_NAMES)))
    return EvalRow(str(dataset_id), method, snr_db(recon_sos, reference),
                   ssim(recon_sos, reference), d)


def _fmt(v):
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def format_report(rows):
    """CSV text of the rows (``\\n`` line endings, fixed 6-decimal floats)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        dices = r.dice if r.dice is not None else (None, None, None)
        w.writerow([r.dataset_id, r.method, _fmt(r.snr_db), _fmt(r.ssim), *map(_fmt, dices)])
    return buf.getvalue()


def write_report(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_report(rows))


def _parse(v):
    return None if v == "" else float(v)


def read_report(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            d = tuple(_parse(rec[k]) for k in REPORT_COLUMNS[4:])
            rows.append(EvalRow(rec["dataset_id"], rec["method"], _parse(rec["snr_db"]),
                                _parse(rec["ssim"]), None if d[0] is None else d))
    return rows


def summarize(rows):
    """Per-method means, sorted by mean SNR descending (ties by name).

    Returns a list of dicts with keys ``method``, ``n``, ``snr_db``, ``ssim``,
    ``dice_csf``, ``dice_gm``, ``dice_wm`` (Dice ``None`` without labels).
    """
    by_method = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    out = []
    for method, rs in by_method.items():
        entry = {"method": method, "n": len(rs),
                 "snr_db": float(np.mean([r.snr_db for r in rs])),
                 "ssim": float(np.mean([r.ssim for r in rs]))}
        with_dice = [r.dice for r in rs if r.dice is not None]
        for k, name in enumerate(("dice_csf", "dice_gm", "dice_wm")):
            entry[name] = float(np.mean([d[k] for d in with_dice])) if with_dice else None
        out.append(entry)
    out.sort(key=lambda e: (-e["snr_db"], e["method"]))
    return out


def format_summary(summary):
    lines = [f"{'method':<14}{'n':>4}{'snr_db':>10}{'ssim':>9}{'csf':>8}{'gm':>8}{'wm':>8}"]
    for e in summary:
        d = "".join(f"{e[k]:>8.3f}" if e[k] is not None else f"{'-':>8}"
                    for k in ("dice_csf", "dice_gm", "dice_wm"))
        lines.append(f"{e['method']:<14}{e['n']:>4}{e['snr_db']:>10.3f}{e['ssim']:>9.4f}{d}")
    return "\n".join(lines) + "\n"
