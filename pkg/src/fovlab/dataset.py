"""Synthetic bounding-boxed dataset: textured shapes over cluttered backgrounds.

Each class is a (shape, texture, hue) combination so the object region, not
the clutter, carries the label. Every image records its exact object box and
pixel mask. FVT1 tensors are the authoritative numeric format; PNGs are
8-bit previews kept for interop.
"""

import colorsys
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import BoundingBox, LabeledImage
from .tensorfile import load_tensor, save_tensor

SHAPES = ("square", "circle", "triangle", "plus", "diamond")


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 1000
    size: int = 32
    num_classes: int = 10
    scale_lo: float = 0.3
    scale_hi: float = 0.8
    clutter_density: float = 1.0
    seed: int = 0


class DatasetError(ValueError):
    pass


def _shape_mask(shape: str, side: int) -> np.ndarray:
    """Boolean (side, side) mask of the shape inscribed in its square."""
    c = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    u = (xs - c) / max(c, 1e-9)
    v = (ys - c) / max(c, 1e-9)
    if shape == "square":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "circle":
        return u ** 2 + v ** 2 <= 1.0
    if shape == "triangle":
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "plus":
        return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _texture(side: int, kind: int) -> np.ndarray:
    """Brightness modulation in [0.55, 1]: 0 = stripes, 1 = checkerboard."""
    ys, xs = np.mgrid[0:side, 0:side]
    if kind == 0:
        cells = (ys // 2) % 2
    else:
        cells = ((ys // 2) + (xs // 2)) % 2
    return 0.55 + 0.45 * cells.astype(np.float32)


def class_color(label: int, num_classes: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(label / num_classes, 0.9, 1.0)
    return np.array([r, g, b], dtype=np.float32) * 255.0


def _render_image(label: int, spec: SyntheticSpec, rng):
    """Returns (image (3,S,S), bbox, object mask (S,S)).

    Clutter count and noise level vary per image so the classification margin
    spreads from near-trivial to genuinely hard images.
    """
    s = spec.size
    img = np.empty((3, s, s), dtype=np.float32)
    img[:] = rng.uniform(40.0, 90.0)
    # clutter: desaturated patches behind the object
    n_clutter = int(round(spec.clutter_density * rng.integers(2, 11)))
    for _ in range(n_clutter):
        cw = int(rng.integers(3, max(4, s // 3)))
        ch = int(rng.integers(3, max(4, s // 3)))
        cx = int(rng.integers(0, s - cw + 1))
        cy = int(rng.integers(0, s - ch + 1))
        hue = rng.uniform(0.0, 1.0)
        r, g, b = colorsys.hsv_to_rgb(hue, rng.uniform(0.0, 0.35),
                                      rng.uniform(0.3, 0.8))
        color = np.array([r, g, b], dtype=np.float32) * 255.0
        img[:, cy:cy + ch, cx:cx + cw] = color[:, None, None]
    # the labeled object
    shape = SHAPES[label % len(SHAPES)]
    texture_kind = (label // len(SHAPES)) % 2
    side = int(round(rng.uniform(spec.scale_lo, spec.scale_hi) * s))
    side = max(6, min(side, s - 2))
    oy = int(rng.integers(1, s - side))
    ox = int(rng.integers(1, s - side))
    shape_mask = _shape_mask(shape, side)
    tex = _texture(side, texture_kind)
    color = class_color(label, spec.num_classes)
    patch = color[:, None, None] * tex[None, :, :]
    region = img[:, oy:oy + side, ox:ox + side]
    img[:, oy:oy + side, ox:ox + side] = np.where(shape_mask[None], patch, region)
    mask = np.zeros((s, s), dtype=np.float32)
    mask[oy:oy + side, ox:ox + side] = shape_mask
    # sensor-style noise; strength varies per image
    img += rng.normal(0.0, rng.uniform(4.0, 10.0), size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 255.0).astype(np.float32)
    ys, xs = np.nonzero(mask)
    bbox = BoundingBox(int(xs.min()), int(ys.min()),
                       int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return img, bbox, mask


def _to_png(img: np.ndarray) -> Image.Image:
    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return Image.fromarray(arr, mode="RGB")


def generate_synthetic(spec: SyntheticSpec, outdir) -> list:
    """Write a class-balanced dataset; deterministic per seed. Returns the images."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    images = []
    label_rows = []
    bbox_rows = []
    for i in range(spec.num_images):
        label = i % spec.num_classes
        img, bbox, mask = _render_image(label, spec, rng)
        image_id = f"img_{i:05d}"
        save_tensor(img, outdir / "images" / f"{image_id}.fvt")
        _to_png(img).save(outdir / "images" / f"{image_id}.png")
        save_tensor(mask, outdir / "masks" / f"{image_id}.fvt")
        label_rows.append((image_id, label))
        bbox_rows.append((image_id, bbox.x0, bbox.y0, bbox.w, bbox.h))
        images.append(LabeledImage(img, label, [bbox], image_id))
    with open(outdir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        w.writerows(label_rows)
    with open(outdir / "bboxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x0", "y0", "w", "h"])
        w.writerows(bbox_rows)
    manifest = {"num_images": spec.num_images, "size": spec.size,
                "num_classes": spec.num_classes, "seed": spec.seed,
                "scale_range": [spec.scale_lo, spec.scale_hi],
                "clutter_density": spec.clutter_density}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return images


@dataclass
class Dataset:
    images: list
    num_classes: int
    load_errors: list


def load_object_mask(datadir, image_id: str) -> np.ndarray:
    return load_tensor(Path(datadir) / "masks" / f"{image_id}.fvt")


def ingest_dataset(datadir) -> Dataset:
    """Load a dataset directory; FVT1 tensors win over PNGs when both exist.

    Malformed CSV structure raises with the offending line number; unreadable
    image files are collected per-file so the rest of the set still loads.
    """
    datadir = Path(datadir)
    labels_path = datadir / "labels.csv"
    if not labels_path.exists():
        raise DatasetError(f"missing labels.csv in {datadir}")
    num_classes = None
    manifest_path = datadir / "manifest.json"
    if manifest_path.exists():
        num_classes = json.loads(manifest_path.read_text()).get("num_classes")

    labels = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise DatasetError(f"labels.csv line 1: expected header id,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DatasetError(f"labels.csv line {lineno}: expected 2 fields, got {len(row)}")
            try:
                labels[row[0]] = int(row[1])
            except ValueError:
                raise DatasetError(f"labels.csv line {lineno}: bad label {row[1]!r}") from None
    if num_classes is None:
        num_classes = max(labels.values()) + 1 if labels else 0
    for image_id, label in labels.items():
        if not 0 <= label < num_classes:
            raise DatasetError(f"label {label} for {image_id} >= num_classes {num_classes}")

    bboxes = {}
    bbox_path = datadir / "bboxes.csv"
    if bbox_path.exists():
        with open(bbox_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "x0", "y0", "w", "h"]:
                raise DatasetError(f"bboxes.csv line 1: bad header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 5:
                    raise DatasetError(
                        f"bboxes.csv line {lineno}: expected 5 fields, got {len(row)}")
                try:
                    box = BoundingBox(*(int(v) for v in row[1:]))
                except ValueError:
                    raise DatasetError(f"bboxes.csv line {lineno}: bad box {row[1:]}") from None
                bboxes.setdefault(row[0], []).append(box)

    images = []
    errors = []
    for image_id in sorted(labels):
        fvt = datadir / "images" / f"{image_id}.fvt"
        png = datadir / "images" / f"{image_id}.png"
        try:
            if fvt.exists():
                img = load_tensor(fvt)
                if img.ndim != 3:
                    raise DatasetError(f"{fvt.name}: expected a (C,H,W) tensor, got {img.shape}")
            elif png.exists():
                with Image.open(png) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
                img = arr.transpose(2, 0, 1)
            else:
                raise DatasetError(f"no image file for {image_id}")
            boxes = bboxes.get(image_id, [])
            for b in boxes:
                b.validate(img.shape[1], img.shape[2])
            images.append(LabeledImage(img, labels[image_id], boxes, image_id))
        except Exception as e:  # per-file: keep loading the rest
            errors.append(f"{image_id}: {e}")
    return Dataset(images, num_classes, errors)
