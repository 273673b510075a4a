"""Foveation mechanisms: crop-based image transformations feeding the CNN.

Every mechanism selects one or more regions, resizes each to the fixed model
input size, and (for multi-crop variants) lets the caller average the scores.
All crop transforms are linear in the image; embedding is affine in the crop.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import BoundingBox, ClassScores, LabeledImage, average_scores  # noqa: F401

TEN_CROP_SIDE_FACTOR = 0.888  # per-axis; discards about 21% of image area
SALIENCY_WINDOW_FRACTION = 0.6


def make_object_mask(height: int, width: int, box: BoundingBox) -> np.ndarray:
    """(H, W) float32 mask: 1 inside the box, 0 outside."""
    box.validate(height, width)
    m = np.zeros((height, width), dtype=np.float32)
    m[box.y0:box.y0 + box.h, box.x0:box.x0 + box.w] = 1.0
    return m


def mask_perturbation(eps: np.ndarray, box: BoundingBox, mode: str) -> np.ndarray:
    """Keep only the object-region ('object') or the complement ('background')."""
    c, h, w = eps.shape
    mask = make_object_mask(h, w, box)
    if mode == "object":
        return eps * mask
    if mode == "background":
        return eps * (1.0 - mask)
    raise ValueError(f"unknown mask mode {mode!r}")


def crop_resize(image: np.ndarray, box: BoundingBox, out_hw) -> np.ndarray:
    if box.w < 2 or box.h < 2:
        raise ValueError(f"degenerate crop box {box}")
    box.validate(image.shape[1], image.shape[2])
    patch = image[:, box.y0:box.y0 + box.h, box.x0:box.x0 + box.w]
    return ops.bilinear_resize(patch, out_hw[0], out_hw[1])


def crop_resize_adjoint(grad_out: np.ndarray, box: BoundingBox, image_shape) -> np.ndarray:
    g = ops.bilinear_resize_grad(grad_out, box.h, box.w)
    full = np.zeros(image_shape, dtype=grad_out.dtype)
    full[:, box.y0:box.y0 + box.h, box.x0:box.x0 + box.w] = g
    return full


def object_crop(img: LabeledImage, out_hw):
    """One crop per ground-truth box; callers average the resulting scores."""
    if not img.bboxes:
        raise ValueError(f"image {img.image_id!r} has no bounding box")
    return [crop_resize(img.image, b, out_hw) for b in img.bboxes]


# ---------------------------------------------------------------------------
# Ten-crop (corners + center, plus horizontal flips)


def ten_crop_windows(height: int, width: int):
    """Five windows (4 corner-clamped + 1 centered) with their flip variants."""
    ch = max(2, round(TEN_CROP_SIDE_FACTOR * height))
    cw = max(2, round(TEN_CROP_SIDE_FACTOR * width))
    corners = [(0, 0), (0, width - cw), (height - ch, 0), (height - ch, width - cw),
               ((height - ch) // 2, (width - cw) // 2)]
    windows = [(BoundingBox(x0, y0, cw, ch), False) for (y0, x0) in corners]
    windows += [(box, True) for (box, _) in windows]
    return windows


def ten_crop(image: np.ndarray, out_hw):
    c, h, w = image.shape
    crops = []
    for box, flip in ten_crop_windows(h, w):
        patch = crop_resize(image, box, out_hw)
        crops.append(patch[:, :, ::-1].copy() if flip else patch)
    return crops


def random_crop_indices(n: int, seed: int, total: int = 10):
    if n > total:
        raise ValueError(f"cannot pick {n} of {total} crops")
    rng = np.random.default_rng(seed)
    return list(rng.choice(total, size=n, replace=False))


def random_crops(image: np.ndarray, n: int, out_hw, seed: int):
    crops = ten_crop(image, out_hw)
    return [crops[i] for i in random_crop_indices(n, seed)]


# ---------------------------------------------------------------------------
# Shift crops (object-box-sized windows with a fixed background fraction)


def _clamp_window(y0, x0, h, w, height, width):
    y0 = min(max(y0, 0), height - h)
    x0 = min(max(x0, 0), width - w)
    return BoundingBox(int(x0), int(y0), int(w), int(h))


def shift_windows(height: int, width: int, bbox: BoundingBox,
                  background_fraction: float):
    """Ten bbox-sized windows shifted so overlap(bbox)/area = 1 - background_fraction.

    Eight compass directions (single-axis shift s = bf*side; diagonals use the
    proportional split t = 1 - sqrt(1-bf)) plus two extra NE/SW diagonals with
    an asymmetric split solving the same overlap equation. Integer offsets are
    chosen to minimize the discretized overlap error; clamping at the image
    border can still raise the overlap for edge-hugging boxes.
    """
    bf = background_fraction
    if not 0.0 <= bf < 1.0:
        raise ValueError(f"background_fraction {bf} outside [0, 1)")
    w, h = bbox.w, bbox.h
    target = 1.0 - bf

    def best_pair(fy: float, fx: float):
        # floor/ceil combination whose overlap is closest to the target
        cands = []
        for ky in {int(np.floor(fy)), int(np.ceil(fy))}:
            for kx in {int(np.floor(fx)), int(np.ceil(fx))}:
                ky_c, kx_c = min(ky, h - 1), min(kx, w - 1)
                ov = (1.0 - ky_c / h) * (1.0 - kx_c / w)
                cands.append((abs(ov - target), ky_c, kx_c))
        _, ky, kx = min(cands)
        return ky, kx

    t = 1.0 - np.sqrt(1.0 - bf)
    # asymmetric diagonal: u on x, solve v so (1-u)(1-v) = 1-bf
    u = 0.5 * bf
    v = 1.0 - (1.0 - bf) / (1.0 - u) if bf > 0 else 0.0
    sy, _ = best_pair(bf * h, 0.0)
    _, sx = best_pair(0.0, bf * w)
    dy_d, dx_d = best_pair(t * h, t * w)
    dy_a, dx_a = best_pair(v * h, u * w)
    offsets = [
        (-sy, 0), (sy, 0), (0, sx), (0, -sx),                         # N S E W
        (-dy_d, dx_d), (-dy_d, -dx_d), (dy_d, dx_d), (dy_d, -dx_d),   # diagonals
        (-dy_a, dx_a), (dy_a, -dx_a),                                 # extras
    ]
    windows = []
    for dy, dx in offsets:
        windows.append((_clamp_window(bbox.y0 + dy, bbox.x0 + dx, h, w,
                                      height, width), False))
    return windows


def shift_crops(img: LabeledImage, n: int, background_fraction: float,
                out_hw, seed: int):
    box = img.bbox
    c, h, w = img.image.shape
    windows = shift_windows(h, w, box, background_fraction)
    if n < len(windows):
        rng = np.random.default_rng(seed)
        idx = sorted(rng.choice(len(windows), size=n, replace=False))
        windows = [windows[i] for i in idx]
    elif n > len(windows):
        raise ValueError(f"at most {len(windows)} shift crops available, asked for {n}")
    return [crop_resize(img.image, b, out_hw) for b, _ in windows]


# ---------------------------------------------------------------------------
# Embedding a (perturbed) object crop back into the full image


def embed_crop(full: LabeledImage, perturbed_crop: np.ndarray) -> np.ndarray:
    box = full.bbox
    back = ops.bilinear_resize(perturbed_crop, box.h, box.w)
    dtype = np.result_type(full.image.dtype, perturbed_crop.dtype)
    out = full.image.astype(dtype, copy=True)
    out[:, box.y0:box.y0 + box.h, box.x0:box.x0 + box.w] = back
    return out


# ---------------------------------------------------------------------------
# Saliency (gradient-magnitude stand-in for an external saliency network)


def _box_blur(m: np.ndarray, size: int = 5) -> np.ndarray:
    r = size // 2
    padded = np.pad(m, r, mode="edge")
    acc = np.zeros_like(m, dtype=np.float64)
    for dy in range(size):
        for dx in range(size):
            acc += padded[dy:dy + m.shape[0], dx:dx + m.shape[1]]
    return (acc / (size * size)).astype(np.float32)


def saliency_map(model, image: np.ndarray) -> np.ndarray:
    """Blurred channel-max |d top-class score / d pixel|, normalized to [0, 1]."""
    scores, cache = model.scores_with_cache(image)
    top = int(np.argmax(scores))
    grad = model.class_grad(cache, top)
    sal = np.abs(grad).max(axis=0)
    sal = _box_blur(sal, 5)
    peak = sal.max()
    if peak > 0:
        sal = sal / peak
    return sal.astype(np.float32)


def _weighted_kmeans(sal: np.ndarray, k: int, seed: int, iters: int = 20):
    """k-means on pixel coordinates weighted by saliency; returns (k, 2) centers."""
    h, w = sal.shape
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    weights = sal.ravel().astype(np.float64)
    total = weights.sum()
    if total <= 0:
        return None
    rng = np.random.default_rng(seed)
    probs = weights / total
    centers = coords[rng.choice(len(coords), size=k, replace=False, p=probs)]
    for _ in range(iters):
        d = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(k):
            sel = assign == j
            wsel = weights[sel]
            if wsel.sum() > 0:
                centers[j] = (coords[sel] * wsel[:, None]).sum(axis=0) / wsel.sum()
    return centers


def saliency_windows(sal: np.ndarray, n: int, seed: int,
                     window_fraction: float = SALIENCY_WINDOW_FRACTION):
    h, w = sal.shape
    ch = max(2, round(window_fraction * h))
    cw = max(2, round(window_fraction * w))
    centers = _weighted_kmeans(sal, n, seed)
    if centers is None:
        # degenerate all-zero map: center crop(s)
        centers = np.tile([[(h - 1) / 2.0, (w - 1) / 2.0]], (n, 1))
    windows = []
    for cy, cx in centers:
        y0 = int(round(cy - ch / 2.0))
        x0 = int(round(cx - cw / 2.0))
        windows.append((_clamp_window(y0, x0, ch, cw, h, w), False))
    return windows


def saliency_crops(model, img: LabeledImage, n: int, out_hw, seed: int = 0):
    if n < 1:
        raise ValueError("need at least one saliency crop")
    sal = saliency_map(model, img.image)
    return [crop_resize(img.image, b, out_hw)
            for b, _ in saliency_windows(sal, n, seed)]


# ---------------------------------------------------------------------------
# Declarative specs and the bound transformation pipeline

VARIANTS = ("identity", "object_crop", "ten_crop", "random_crops",
            "shift_crops", "saliency_crops", "embed")


@dataclass(frozen=True)
class FoveationSpec:
    variant: str
    n: int = 0
    background_fraction: float = 0.12
    out_hw: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown foveation variant {self.variant!r}")

    def to_text(self) -> str:
        parts = []
        if self.variant in ("random_crops", "shift_crops", "saliency_crops"):
            parts.append(f"n={self.n}")
        if self.variant == "shift_crops":
            parts.append(f"background_fraction={self.background_fraction:g}")
        if self.out_hw is not None:
            parts.append(f"out={self.out_hw[0]}x{self.out_hw[1]}")
        if self.seed:
            parts.append(f"seed={self.seed}")
        return self.variant + (f"({', '.join(parts)})" if parts else "")

    @staticmethod
    def from_text(text: str) -> "FoveationSpec":
        text = text.strip()
        name, _, rest = text.partition("(")
        name = name.strip()
        kwargs = {}
        if rest:
            if not rest.endswith(")"):
                raise ValueError(f"unbalanced parens in foveation spec {text!r}")
            for item in rest[:-1].split(","):
                item = item.strip()
                if not item:
                    continue
                key, _, val = item.partition("=")
                key, val = key.strip(), val.strip()
                if key == "n":
                    kwargs["n"] = int(val)
                elif key == "background_fraction":
                    kwargs["background_fraction"] = float(val)
                elif key == "seed":
                    kwargs["seed"] = int(val)
                elif key == "out":
                    h, _, w = val.partition("x")
                    kwargs["out_hw"] = (int(h), int(w))
                else:
                    raise ValueError(f"unknown key {key!r} in foveation spec {text!r}")
        defaults = {"random_crops": 3, "shift_crops": 10, "saliency_crops": 3}
        if name in defaults and "n" not in kwargs:
            kwargs["n"] = defaults[name]
        return FoveationSpec(name, **kwargs)


class Foveation:
    """A spec bound to one image: fixed windows, apply + adjoint.

    apply() maps the image argument to the list of model inputs; adjoint()
    scatters per-input gradients back and sums them. For 'embed' the image
    argument is the object crop and the single model input is the full image
    with that crop embedded.
    """

    def __init__(self, spec: FoveationSpec, windows, out_hw,
                 embed_base: LabeledImage | None = None):
        self.spec = spec
        self.windows = windows
        self.out_hw = out_hw
        self.embed_base = embed_base

    def apply(self, image: np.ndarray):
        if self.spec.variant == "identity":
            return [image]
        if self.spec.variant == "embed":
            return [embed_crop(self.embed_base, image)]
        out = []
        for box, flip in self.windows:
            patch = crop_resize(image, box, self.out_hw)
            out.append(patch[:, :, ::-1].copy() if flip else patch)
        return out

    def adjoint(self, grads, image_shape):
        if self.spec.variant == "identity":
            return grads[0]
        if self.spec.variant == "embed":
            box = self.embed_base.bbox
            region = grads[0][:, box.y0:box.y0 + box.h, box.x0:box.x0 + box.w]
            return ops.bilinear_resize_grad(np.ascontiguousarray(region),
                                            image_shape[1], image_shape[2])
        total = np.zeros(image_shape, dtype=grads[0].dtype)
        for (box, flip), g in zip(self.windows, grads):
            if flip:
                g = g[:, :, ::-1].copy()
            total += crop_resize_adjoint(g, box, image_shape)
        return total


def build_foveation(spec: FoveationSpec, img: LabeledImage, model=None,
                    input_hw=None) -> Foveation:
    """Freeze a spec's windows for one image (saliency windows use the clean image)."""
    out_hw = spec.out_hw or input_hw
    if out_hw is None and spec.variant not in ("identity", "embed"):
        raise ValueError("foveation needs an output size")
    c, h, w = img.image.shape
    v = spec.variant
    if v == "identity":
        return Foveation(spec, [], out_hw)
    if v == "embed":
        img.bbox  # raises when missing
        return Foveation(spec, [], out_hw, embed_base=img)
    if v == "object_crop":
        if not img.bboxes:
            raise ValueError(f"image {img.image_id!r} has no bounding box")
        windows = [(b, False) for b in img.bboxes]
    elif v == "ten_crop":
        windows = ten_crop_windows(h, w)
    elif v == "random_crops":
        all_windows = ten_crop_windows(h, w)
        windows = [all_windows[i] for i in random_crop_indices(spec.n, spec.seed)]
    elif v == "shift_crops":
        windows = shift_windows(h, w, img.bbox, spec.background_fraction)
        if spec.n < len(windows):
            rng = np.random.default_rng(spec.seed)
            idx = sorted(rng.choice(len(windows), size=spec.n, replace=False))
            windows = [windows[i] for i in idx]
    elif v == "saliency_crops":
        sal = saliency_map(model, img.image)
        windows = saliency_windows(sal, spec.n, spec.seed)
    else:
        raise ValueError(f"unknown foveation variant {v!r}")
    return Foveation(spec, windows, out_hw)


class FoveatedModel:
    """Pre-softmax scores of model composed with a bound foveation.

    Multi-crop variants average the per-crop score vectors; gradients average
    the per-crop input gradients mapped back through each (linear) crop.
    """

    def __init__(self, network, fov: Foveation):
        self.network = network
        self.fov = fov

    @property
    def num_classes(self):
        return self.network.num_classes

    def scores(self, image: np.ndarray) -> np.ndarray:
        inputs = self.fov.apply(image)
        return np.mean([self.network.scores(x) for x in inputs], axis=0).astype(np.float32)

    def scores_with_cache(self, image: np.ndarray):
        inputs = self.fov.apply(image)
        pairs = [self.network.scores_with_cache(x) for x in inputs]
        scores = np.mean([s for s, _ in pairs], axis=0).astype(np.float32)
        return scores, (image.shape, [t for _, t in pairs])

    def class_grad(self, cache, class_index: int) -> np.ndarray:
        image_shape, traces = cache
        grads = [self.network.class_grad(t, class_index) for t in traces]
        return (self.fov.adjoint(grads, image_shape) / len(grads)).astype(np.float32)
