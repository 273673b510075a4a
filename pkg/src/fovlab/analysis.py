"""Quantitative probes: norm sweeps, local-linearity curves, secant errors,
cumulative histograms, foveation score decomposition, and norm-increase ratios.

Every probe works on pre-softmax scores of the ground-truth class; asking for
post-softmax is rejected because the softmax would distort linearity.
"""

from dataclasses import dataclass

import numpy as np

from . import attack as attack_mod
from .data import PRE_SOFTMAX
from .foveation import Foveation, FoveatedModel
from .model import top_k_error


def _require_pre_softmax(stage: str) -> None:
    if stage != PRE_SOFTMAX:
        raise ValueError(f"analyses require pre-softmax scores, got {stage!r}")


# ---------------------------------------------------------------------------
# Local linearity along the minimum perturbation


@dataclass
class LinearityCurve:
    """Ground-truth-class score along x + c*eps, the perturbation alone, and
    the secant-line prediction, per scale factor c (pre-softmax).

    slope is the per-unit-c score change estimated from the line between
    f(x) and f(x + 2*eps); base_score is f(x) at the true class.
    """
    image_id: str
    c_values: np.ndarray
    score_full: np.ndarray
    score_pert_alone: np.ndarray
    score_secant: np.ndarray
    slope: float
    base_score: float


DEFAULT_C_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0)


def secant_slope(model, x: np.ndarray, eps: np.ndarray, label: int) -> float:
    """(f(x + 2*eps) - f(x)) / 2 at the true class: the hypothetical linear
    classifier's response per unit of eps."""
    f0 = float(model.scores(x)[label])
    f2 = float(model.scores((x + 2.0 * eps).astype(np.float32))[label])
    return (f2 - f0) / 2.0


def linearity_probe(model, img, record, c_values=DEFAULT_C_VALUES,
                    stage: str = PRE_SOFTMAX) -> LinearityCurve:
    """Score curves along the found perturbation direction.

    x + c*eps is evaluated without re-clamping: clamping is a nonlinearity of
    the pixel domain, not of the network under test.
    """
    _require_pre_softmax(stage)
    if not record.misclassified:
        raise ValueError("linearity probe needs a misclassifying record")
    cs = np.asarray(sorted(set(float(c) for c in c_values)))
    if 0.0 not in cs or 1.0 not in cs:
        raise ValueError("c grid must include 0 and 1")
    x = img.image
    eps = record.epsilon
    label = img.label
    base = float(model.scores(x)[label])
    slope = secant_slope(model, x, eps, label)
    full = np.array([float(model.scores((x + c * eps).astype(np.float32))[label])
                     for c in cs])
    alone = np.array([float(model.scores((c * eps).astype(np.float32))[label])
                      for c in cs])
    secant = base + cs * slope
    # pin the c = 0 entries to the directly computed base score
    i0 = int(np.where(cs == 0.0)[0][0])
    full[i0] = base
    secant[i0] = base
    return LinearityCurve(img.image_id, cs, full, alone, secant, slope, base)


def secant_errors(curves):
    """Per-curve |secant prediction - truth| and |f(eps) - (f(x+eps) - f(x))|
    at c = 1, in curve order."""
    hyp1, naive = [], []
    for c in curves:
        idx = np.where(c.c_values == 1.0)[0]
        if len(idx) == 0:
            raise ValueError("curve lacks the c = 1 point")
        i = int(idx[0])
        truth = c.score_full[i] - c.base_score
        hyp1.append(abs(c.slope - truth))
        naive.append(abs(c.score_pert_alone[i] - truth))
    return hyp1, naive


# ---------------------------------------------------------------------------
# Cumulative histogram


@dataclass
class CumulativeHistogram:
    thresholds: np.ndarray
    counts: np.ndarray
    population: int


def cumulative_histogram(values, thresholds) -> CumulativeHistogram:
    """counts[i] = number of values <= thresholds[i]."""
    t = np.asarray(thresholds, dtype=np.float64)
    if len(t) == 0 or np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be ascending and nonempty")
    v = np.sort(np.asarray(values, dtype=np.float64))
    counts = np.searchsorted(v, t, side="right")
    return CumulativeHistogram(t, counts, len(v))


# ---------------------------------------------------------------------------
# Accuracy vs perturbation norm


@dataclass
class SweepPoint:
    target: float
    accuracy: float
    population: int


def norm_sweep_accuracy(model, items, norm_targets, k_top: int, norm_kind: str,
                        relative: bool = False, pixel_lo: float = 0.0,
                        pixel_hi: float = 255.0, post_scale=None):
    """Mean accuracy after rescaling each perturbation to the target norm.

    items: (LabeledImage, epsilon) pairs. relative=True treats targets as
    multiples of each perturbation's own norm. Zero perturbations are skipped
    at nonzero targets (they cannot be rescaled). post_scale(img, eps) may
    transform the already-rescaled perturbation (e.g. masking).
    """
    if any(np.diff(norm_targets) < 0):
        raise ValueError("norm targets must be ascending")
    points = []
    for target in norm_targets:
        errs = []
        for img, eps in items:
            own = attack_mod._norm_of(eps, norm_kind)
            if target == 0:
                scaled = np.zeros_like(img.image)
            elif own == 0:
                continue
            else:
                factor = target if relative else target / own
                scaled = (eps * factor).astype(np.float32)
            if post_scale is not None:
                scaled = post_scale(img, scaled)
            adv = np.clip(img.image + scaled, pixel_lo, pixel_hi).astype(np.float32)
            errs.append(top_k_error(model.scores(adv), img.label, k_top))
        acc = 1.0 - float(np.mean(errs)) if errs else float("nan")
        points.append(SweepPoint(float(target), acc, len(errs)))
    return points


# ---------------------------------------------------------------------------
# Foveation score decomposition


@dataclass
class DecompositionRecord:
    """clean_shift: how the true-class score moves when foveating the clean
    image; pert_shift: how much of the perturbation's score damage the
    foveation removes. Both pre-softmax."""
    image_id: str
    clean_shift: float
    pert_shift: float


def foveation_decomposition(model, img, record, fov: Foveation,
                            stage: str = PRE_SOFTMAX) -> DecompositionRecord:
    _require_pre_softmax(stage)
    label = img.label
    fmodel = FoveatedModel(model, fov)
    x = img.image
    adv = (x + record.epsilon).astype(np.float32)
    f_x = float(model.scores(x)[label])
    f_adv = float(model.scores(adv)[label])
    ft_x = float(fmodel.scores(x)[label])
    ft_adv = float(fmodel.scores(adv)[label])
    clean_shift = f_x - ft_x
    pert_shift = (f_adv - f_x) - (ft_adv - ft_x)
    return DecompositionRecord(img.image_id, clean_shift, pert_shift)


# ---------------------------------------------------------------------------
# Norm-increase ratio after foveation


@dataclass
class NormRatio:
    image_id: str
    ratio: float = float("nan")
    raw_norm: float = float("nan")
    foveated_norm: float = float("nan")
    excluded: str = ""


def norm_ratio(model, img, cfg, fov: Foveation, kind: str,
               raw_record=None) -> NormRatio:
    """||eps*_foveated|| / ||eps*_raw|| in the attack's norm kind.

    Images misclassified either raw or after the foveation are excluded, as
    are attack failures; the exclusion reason is recorded.
    """
    run = {attack_mod.KIND_BFGS: attack_mod.bfgs_perturbation,
           attack_mod.KIND_SIGN: attack_mod.sign_perturbation}[kind]
    if top_k_error(model.scores(img.image), img.label, cfg.k_top) == 1:
        return NormRatio(img.image_id, excluded="misclassified_raw")
    fmodel = FoveatedModel(model, fov)
    if top_k_error(fmodel.scores(img.image), img.label, cfg.k_top) == 1:
        return NormRatio(img.image_id, excluded="misclassified_foveated")
    if raw_record is None or not raw_record.misclassified:
        raw_record = run(model, img, cfg)
    if not raw_record.misclassified or raw_record.norm_value == 0:
        return NormRatio(img.image_id, excluded="raw_attack_failed")
    fov_record = run(fmodel, img, cfg)
    if not fov_record.misclassified or fov_record.norm_value == 0:
        return NormRatio(img.image_id, excluded="foveated_attack_failed")
    return NormRatio(img.image_id,
                     ratio=fov_record.norm_value / raw_record.norm_value,
                     raw_norm=raw_record.norm_value,
                     foveated_norm=fov_record.norm_value)
