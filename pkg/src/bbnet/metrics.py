"""MAE, S-measure, E-measure, F-measure and PR curves for binary-mask evaluation.

All per-threshold measures sweep the 256 thresholds ``t/255, t = 0..255`` and
binarize with ``P >= t/255``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BBNetError

log = logging.getLogger(__name__)

BETA2 = 0.3
# machine epsilon, as in the reference E-measure code; 1e-8 would pull self-scores of
# small objects visibly below 1 (bias term ~ eps / (2 * mean(G)^2))
E_EPS = np.finfo(np.float64).eps
S_EPS = np.finfo(np.float64).eps
THRESHOLDS = np.arange(256) / 255.0
SCALARS = ("mae", "s_alpha", "e_mean", "e_max", "f_mean", "f_max")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DegenerateGTError(BBNetError):
    pass


class MissingPredictionError(BBNetError):
    def __init__(self, stems):
        self.stems = sorted(stems)
        super().__init__(f"missing predictions for {len(self.stems)} image(s): {', '.join(self.stems)}")


def normalize_pred(pred) -> np.ndarray:
    """Bring a prediction to float64 in [0, 1].

    uint8 maps are divided by 255; float maps outside [0, 1] are min-max
    normalized per image.
    """
    pred = np.asarray(pred)
    if pred.dtype == np.uint8:
        return pred.astype(np.float64) / 255.0
    pred = pred.astype(np.float64)
    lo, hi = pred.min(), pred.max()
    if lo < 0 or hi > 1:
        pred = (pred - lo) / (hi - lo) if hi > lo else np.zeros_like(pred)
    return pred


def binarize_gt(gt) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.dtype == np.bool_:
        return gt
    return gt > (127 if gt.dtype == np.uint8 and gt.max() > 1 else 0.5)


def _align(pred, gt):
    p, g = normalize_pred(pred), binarize_gt(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def mae(pred, gt) -> float:
    p, g = _align(pred, gt)
    return float(np.abs(p - g).mean())


def _confusion(p, g):
    """TP, FP, FN, TN counts for every threshold (arrays of length 256)."""
    fg = np.sort(p[g])
    bg = np.sort(p[~g])
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="left")
    fp = bg.size - np.searchsorted(bg, THRESHOLDS, side="left")
    fn = fg.size - tp
    tn = bg.size - fp
    return tp, fp, fn, tn


def f_measure(pred, gt, adaptive: bool = False) -> dict:
    p, g = _align(pred, gt)
    if not g.any():
        raise DegenerateGTError("F-measure is undefined for an empty ground truth")
    tp, fp, fn, _ = _confusion(p, g)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = tp / (tp + fn)
        denom = BETA2 * precision + recall
        f = np.where(denom > 0, (1 + BETA2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    out = {
        "f_max": float(f.max()),
        "f_mean": float(f.mean()),
        "curve": f,
        "pr_curve": np.stack([precision, recall], axis=1),
    }
    if adaptive:
        out["f_adaptive"] = _adaptive_f(p, g)
    return out


def _adaptive_f(p, g):
    b = p >= min(2 * p.mean(), 1.0)
    tp = np.sum(b & g)
    if tp == 0:
        return 0.0
    precision, recall = tp / b.sum(), tp / g.sum()
    return float((1 + BETA2) * precision * recall / (BETA2 * precision + recall))


def _enhanced(g_val, b_val, mg, mb):
    fg, fb = g_val - mg, b_val - mb
    xi = 2 * fg * fb / (fg * fg + fb * fb + E_EPS)
    return (xi + 1) ** 2 / 4


def e_measure(pred, gt) -> dict:
    p, g = _align(pred, gt)
    n = g.size
    tp, fp, fn, tn = _confusion(p, g)
    mean_b = (tp + fp) / n
    if not g.any():
        curve = 1 - mean_b
    elif g.all():
        curve = mean_b.astype(np.float64)
    else:
        mg = g.mean()
        # B and G are binary, so every pixel falls into one of four cases
        curve = (
            tp * _enhanced(1, 1, mg, mean_b)
            + fp * _enhanced(0, 1, mg, mean_b)
            + fn * _enhanced(1, 0, mg, mean_b)
            + tn * _enhanced(0, 0, mg, mean_b)
        ) / n
    return {"e_max": float(curve.max()), "e_mean": float(curve.mean()), "curve": curve}


def _s_object_part(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + S_EPS)


def _s_object(p, g):
    mu = g.mean()
    fg = _s_object_part(p[g])
    bg = _s_object_part(1 - p[~g])
    return mu * fg + (1 - mu) * bg


def centroid_split(g):
    """Split indices (row, col) at the rounded ground-truth centroid, 1-based convention."""
    rows, cols = np.nonzero(g)
    y = int(np.floor(rows.mean() + 0.5)) + 1
    x = int(np.floor(cols.mean() + 0.5)) + 1
    return y, x


def _ssim(p, g):
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + S_EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(p, g):
    h, w = g.shape
    y, x = centroid_split(g)
    gf = g.astype(np.float64)
    area = h * w
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        pr, gr = p[rs, cs], gf[rs, cs]
        if pr.size:
            score += pr.size / area * _ssim(pr, gr)
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    p, g = _align(pred, gt)
    mean_g = g.mean()
    if mean_g == 0:
        s = 1 - p.mean()
    elif mean_g == 1:
        s = p.mean()
    else:
        s = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return float(min(max(s, 0.0), 1.0))


def evaluate_pair(pred, gt, adaptive: bool = False) -> dict:
    """All scalar metrics for one image. ``f_*`` and ``pr_curve`` are None for an empty GT."""
    row = {"mae": mae(pred, gt), "s_alpha": s_measure(pred, gt)}
    row.update({k: v for k, v in e_measure(pred, gt).items() if k != "curve"})
    try:
        f = f_measure(pred, gt, adaptive=adaptive)
        row.update(f_max=f["f_max"], f_mean=f["f_mean"], pr_curve=f["pr_curve"])
        if adaptive:
            row["f_adaptive"] = f["f_adaptive"]
    except DegenerateGTError:
        row.update(f_max=None, f_mean=None, pr_curve=None)
    return row


@dataclass
class MetricReport:
    per_image: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    pr_curve: np.ndarray | None = None
    n_degenerate_gt: int = 0

    def summary(self) -> dict:
        return {
            **{k: self.means.get(k) for k in SCALARS},
            "n_images": len(self.per_image),
            "n_degenerate_gt": self.n_degenerate_gt,
        }


def aggregate_report(rows: list[dict]) -> MetricReport:
    """Dataset means; F-measure and the PR curve skip images with empty ground truth."""
    rows = sorted(rows, key=lambda r: r["stem"])
    means = {}
    for key in SCALARS:
        values = [r[key] for r in rows if r.get(key) is not None]
        means[key] = float(np.mean(values)) if values else float("nan")
    curves = [r["pr_curve"] for r in rows if r.get("pr_curve") is not None]
    pr = np.mean(curves, axis=0) if curves else None
    n_deg = sum(1 for r in rows if r.get("pr_curve") is None)
    per_image = [{k: v for k, v in r.items() if k != "pr_curve"} for r in rows]
    return MetricReport(per_image, means, pr, n_deg)


def evaluate_arrays(pairs, adaptive: bool = False) -> MetricReport:
    """``pairs`` yields ``(stem, pred, gt)`` triples."""
    rows = []
    for stem, pred, gt in pairs:
        row = evaluate_pair(pred, gt, adaptive)
        row["stem"] = stem
        rows.append(row)
    return aggregate_report(rows)


def _images_by_stem(directory: Path) -> dict[str, Path]:
    return {
        p.stem: p for p in sorted(Path(directory).iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_EXTS
    }


def load_gray(path, size=None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != size:
        img = img.resize(size, Image.BILINEAR)
    return np.asarray(img)


def evaluate_dirs(pred_dir, gt_dir, adaptive: bool = False) -> MetricReport:
    preds = _images_by_stem(Path(pred_dir))
    gts = _images_by_stem(Path(gt_dir))
    missing = set(gts) - set(preds)
    if missing:
        raise MissingPredictionError(missing)
    extra = set(preds) - set(gts)
    if extra:
        log.warning("ignoring %d prediction(s) without ground truth", len(extra))

    def pairs():
        for stem in sorted(gts):
            gt = load_gray(gts[stem])
            pred = load_gray(preds[stem], size=(gt.shape[1], gt.shape[0]))
            yield stem, pred, gt

    return evaluate_arrays(pairs(), adaptive)


def write_report(report: MetricReport, json_path) -> dict[str, Path]:
    """Write the JSON summary plus per-image and PR-curve CSVs next to it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    base = json_path.with_suffix("")
    per_image_csv = base.parent / f"{base.name}_per_image.csv"
    pr_csv = base.parent / f"{base.name}_pr.csv"

    summary = report.summary()
    summary["per_image_csv"] = per_image_csv.name
    summary["pr_curve_csv"] = pr_csv.name
    tmp = json_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    tmp.replace(json_path)

    columns = ["stem", *SCALARS]
    with open(per_image_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in report.per_image:
            writer.writerow([row["stem"]] + ["" if row.get(k) is None else repr(float(row[k])) for k in SCALARS])

    with open(pr_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        if report.pr_curve is not None:
            for t, (prec, rec) in enumerate(report.pr_curve):
                writer.writerow([t, repr(float(prec)), repr(float(rec))])
    return {"json": json_path, "per_image_csv": per_image_csv, "pr_csv": pr_csv}
