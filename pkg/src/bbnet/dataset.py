"""Group-structured data: directory scanning, group sampling, synthetic
camouflage groups and dataset statistics.

Layout::

    root/{train,test}/<super_class>/<sub_class>/<stem>.jpg|png
    root/{train,test}/<super_class>/<sub_class>/masks/<stem>.png
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import BBNetError

log = logging.getLogger(__name__)

MIN_GROUP = 5
IMAGE_EXTS = (".jpg", ".jpeg", ".png")
FG_BAND = (0.02, 0.5)
BAND_WIDTH = 15
SUPER_CLASSES = ("land", "sea", "fly", "amphibious", "insect")


class PairingError(BBNetError):
    pass


class DegenerateMaskError(BBNetError):
    pass


@dataclass(frozen=True)
class GroupRecord:
    super_class: str
    sub_class: str
    image_paths: tuple[Path, ...]
    mask_paths: tuple[Path, ...]

    @property
    def group_id(self) -> str:
        return f"{self.super_class}/{self.sub_class}"

    def __len__(self):
        return len(self.image_paths)


@dataclass
class ImageGroup:
    images: torch.Tensor  # (B, 3, S, S) in [0, 1]
    masks: torch.Tensor  # (B, 1, S, S) in {0, 1}
    group_id: str
    stems: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# scanning and loading

def _pair_group(sub_dir: Path) -> tuple[list[Path], list[Path]]:
    images = sorted(p for p in sub_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)
    mask_dir = sub_dir / "masks"
    masks = []
    for img in images:
        mask = mask_dir / f"{img.stem}.png"
        if not mask.is_file():
            raise PairingError(f"{img} has no mask {mask}")
        try:
            with Image.open(img) as im, Image.open(mask) as mk:
                if im.size != mk.size:
                    raise PairingError(f"{img} is {im.size} but its mask is {mk.size}")
        except OSError as exc:
            raise OSError(f"unreadable image pair {img}: {exc}") from exc
        masks.append(mask)
    return images, masks


def scan_dataset(root, split: str | None = "train") -> list[GroupRecord]:
    """One record per sub-class directory holding at least five image/mask pairs.

    ``root/split`` is scanned when it exists, otherwise ``root`` itself.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if split and (root / split).is_dir():
        root = root / split
    records = []
    for super_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for sub_dir in sorted(p for p in super_dir.iterdir() if p.is_dir() and p.name != "masks"):
            images, masks = _pair_group(sub_dir)
            if len(images) < MIN_GROUP:
                log.warning("dropping group %s/%s with %d image(s)", super_dir.name, sub_dir.name, len(images))
                continue
            records.append(GroupRecord(super_dir.name, sub_dir.name, tuple(images), tuple(masks)))
    if not records:
        log.warning("no usable image groups under %s", root)
    return records


def load_image(path, size: int | None = None) -> np.ndarray:
    """RGB float32 array (H, W, 3) in [0, 1], bilinearly resized when ``size`` is set."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Binary float32 array (H, W); resized masks are re-thresholded at 0.5."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    if size is not None and arr.shape != (size, size):
        arr = np.asarray(Image.fromarray(arr, mode="F").resize((size, size), Image.BILINEAR))
    return (arr >= 0.5).astype(np.float32)


def load_group(record: GroupRecord, size: int, indices=None) -> ImageGroup:
    indices = range(len(record)) if indices is None else indices
    imgs = [load_image(record.image_paths[i], size) for i in indices]
    masks = [load_mask(record.mask_paths[i], size) for i in indices]
    return ImageGroup(
        images=torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous(),
        masks=torch.from_numpy(np.stack(masks))[:, None],
        group_id=record.group_id,
        stems=[record.image_paths[i].stem for i in indices],
    )


def sample_group(records, batch_size: int, rng: np.random.Generator, size: int) -> ImageGroup:
    """Pick one group uniformly, then ``batch_size`` of its images.

    Sampling is without replacement unless the group is smaller than the batch.
    """
    if not records:
        raise ValueError("sample_group needs at least one record")
    record = records[int(rng.integers(len(records)))]
    replace = len(record) < batch_size
    indices = rng.choice(len(record), size=batch_size, replace=replace)
    return load_group(record, size, [int(i) for i in indices])


# ---------------------------------------------------------------------------
# synthetic camouflage groups

def _texture(rng, size, sigma, std):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0))
    noise /= noise.std() + 1e-12
    return noise * std


def _blob_mask(rng, size, species):
    """Rasterize a radial Fourier-descriptor blob from the group's shape family."""
    k = species["harmonics"]
    amps = species["amps"] * rng.uniform(0.8, 1.2, size=k.size)
    phases = species["phases"] + rng.normal(0, 0.15, size=k.size)
    radius = rng.uniform(0.12, 0.3) * size
    rot = rng.uniform(0, 2 * np.pi)
    margin = radius * (1 + amps.sum())
    cy, cx = rng.uniform(margin * 0.6, size - margin * 0.6, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx) - rot
    r = radius * (1 + np.sum(amps[:, None, None] * np.cos(k[:, None, None] * theta + phases[:, None, None]), 0))
    return np.hypot(yy - cy, xx - cx) <= r


def synth_image(rng, size, species):
    """One camouflaged image and its mask; the object reuses the background texture law."""
    while True:
        mask = _blob_mask(rng, size, species)
        frac = mask.mean()
        if FG_BAND[0] <= frac <= FG_BAND[1]:
            break
    bg = _texture(rng, size, species["sigma"], species["texture_std"])
    obj = _texture(rng, size, species["sigma"], species["texture_std"]) + species["delta"]
    field_ = np.where(mask[..., None], obj, bg) + species["base"]
    img = np.clip(field_, 0, 1)
    return (img * 255).round().astype(np.uint8), mask


def _species(rng):
    k = np.arange(2, 6)
    return {
        "harmonics": k,
        "amps": rng.uniform(0.0, 0.3, size=k.size) / k,
        "phases": rng.uniform(0, 2 * np.pi, size=k.size),
        "sigma": rng.uniform(1.0, 2.5),
        "texture_std": rng.uniform(0.06, 0.1),
        "delta": rng.choice([-1.0, 1.0]) * rng.uniform(0.12, 0.18),
        "base": rng.uniform(0.3, 0.7, size=3),
    }


def synth_generate(out, n_groups: int, images_per_group: int, size: int, seed: int) -> list[GroupRecord]:
    """Write ``n_groups`` synthetic groups to ``out/train`` and return their records.

    Output bytes depend only on the arguments.
    """
    if size % 24:
        raise ValueError(f"size {size} is not divisible by 24")
    out = Path(out)
    records = []
    for g in range(n_groups):
        rng = np.random.default_rng([seed, g])
        species = _species(rng)
        super_class = SUPER_CLASSES[g % len(SUPER_CLASSES)]
        sub_class = f"species_{g:03d}"
        group_dir = out / "train" / super_class / sub_class
        (group_dir / "masks").mkdir(parents=True, exist_ok=True)
        images, masks = [], []
        for i in range(images_per_group):
            img, mask = synth_image(rng, size, species)
            stem = f"{sub_class}_{i:03d}"
            img_path, mask_path = group_dir / f"{stem}.png", group_dir / "masks" / f"{stem}.png"
            Image.fromarray(img).save(img_path)
            Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
            images.append(img_path)
            masks.append(mask_path)
        records.append(GroupRecord(super_class, sub_class, tuple(images), tuple(masks)))
    return records


# ---------------------------------------------------------------------------
# statistics

HIST_BINS = 10
RESOLUTION_EDGES = (0, 128, 256, 512, 768, 1024, 1536, 2048, 4096, 65536)


def color_histogram(pixels: np.ndarray, bins: int = 8) -> np.ndarray:
    """Normalized joint RGB histogram of an (N, 3) array in [0, 1]."""
    q = np.clip((pixels * bins).astype(int), 0, bins - 1)
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    hist = np.bincount(idx, minlength=bins ** 3).astype(np.float64)
    return hist / max(hist.sum(), 1)


def chi_square(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric chi-square distance of two normalized histograms, in [0, 1]."""
    s = p + q
    nz = s > 0
    return float(0.5 * np.sum((p[nz] - q[nz]) ** 2 / s[nz]))


def boundary_band(mask: np.ndarray, width: int = BAND_WIDTH) -> np.ndarray:
    """Background pixels within ``width`` pixels (Euclidean) of the object."""
    dist = ndimage.distance_transform_edt(~mask)
    return (dist <= width) & ~mask


def local_contrast(img: np.ndarray, mask: np.ndarray) -> float:
    band = boundary_band(mask)
    return chi_square(color_histogram(img[mask]), color_histogram(img[band]))


def global_contrast(img: np.ndarray, mask: np.ndarray) -> float:
    return chi_square(color_histogram(img[mask]), color_histogram(img[~mask]))


def center_bias(mask: np.ndarray) -> float:
    """Distance from object centroid to image center over half the diagonal, in [0, 1]."""
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    dy, dx = rows.mean() - (h - 1) / 2, cols.mean() - (w - 1) / 2
    return float(np.hypot(dy, dx) / np.hypot(h, w) * 2)


def image_stats(img: np.ndarray, mask: np.ndarray) -> dict:
    mask = mask.astype(bool)
    if not mask.any():
        raise DegenerateMaskError("mask has no foreground")
    h, w = mask.shape
    full = mask.all()
    return {
        "height": h,
        "width": w,
        "object_size": float(mask.mean()),
        "center_bias": center_bias(mask),
        "global_contrast": 0.0 if full else global_contrast(img, mask),
        "local_contrast": 0.0 if full else local_contrast(img, mask),
    }


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]

    @classmethod
    def of(cls, values, edges) -> "Histogram":
        counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=np.asarray(edges, dtype=np.float64))
        return cls([float(e) for e in edges], [int(c) for c in counts])


@dataclass
class DatasetStats:
    resolution_histogram: Histogram
    local_contrast_histogram: Histogram
    global_contrast_histogram: Histogram
    object_size_histogram: Histogram
    center_bias_histogram: Histogram
    per_image: list[dict]
    n_skipped: int = 0

    HISTOGRAMS = ("resolution", "local_contrast", "global_contrast", "object_size", "center_bias")

    def histogram(self, name: str) -> Histogram:
        return getattr(self, f"{name}_histogram")

    def summary(self) -> dict:
        out = {"n_images": len(self.per_image), "n_skipped": self.n_skipped}
        for key in ("object_size", "center_bias", "local_contrast", "global_contrast"):
            values = [r[key] for r in self.per_image]
            out[key] = {
                "mean": float(np.mean(values)) if values else None,
                "min": float(np.min(values)) if values else None,
                "max": float(np.max(values)) if values else None,
            }
        return out


def compute_stats(records) -> DatasetStats:
    if not records:
        raise ValueError("compute_stats needs at least one record")
    rows, skipped = [], 0
    for rec in records:
        for img_path, mask_path in zip(rec.image_paths, rec.mask_paths):
            img, mask = load_image(img_path), load_mask(mask_path)
            try:
                row = image_stats(img, mask)
            except DegenerateMaskError:
                skipped += 1
                log.warning("skipping %s: empty mask", img_path)
                continue
            row["image"] = str(img_path)
            rows.append(row)
    unit = np.linspace(0, 1, HIST_BINS + 1)
    return DatasetStats(
        resolution_histogram=Histogram.of([max(r["height"], r["width"]) for r in rows], RESOLUTION_EDGES),
        local_contrast_histogram=Histogram.of([r["local_contrast"] for r in rows], unit),
        global_contrast_histogram=Histogram.of([r["global_contrast"] for r in rows], unit),
        object_size_histogram=Histogram.of([r["object_size"] for r in rows], unit),
        center_bias_histogram=Histogram.of([r["center_bias"] for r in rows], unit),
        per_image=rows,
        n_skipped=skipped,
    )


def write_stats(stats: DatasetStats, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "stats.csv", out_dir / "stats.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["histogram", "bin_lo", "bin_hi", "count"])
        for name in DatasetStats.HISTOGRAMS:
            h = stats.histogram(name)
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                writer.writerow([name, lo, hi, c])
    json_path.write_text(json.dumps(stats.summary(), indent=2, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}
