"""Minimum-norm adversarial perturbation generators.

Two attacks: a box-constrained limited-memory quasi-Newton descent on
eta*||eps||_1 plus a hinge on the true-class score, and a single step along
the sign of the loss gradient. Both are refined by a norm line search with
bisection; records store the effective (pixel-clamped) perturbation.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import LabeledImage
from .model import top_k_error
from .tensorfile import load_tensor, save_tensor

KIND_BFGS = "bfgs"
KIND_SIGN = "sign"
NORM_L1PP = "l1_per_pixel"
NORM_LINF = "linf"

IMPERCEPTIBLE = "imperceptible"
BORDERLINE = "borderline"
PERCEPTIBLE = "perceptible"

# visibility thresholds in 8-bit pixel units; borderline band is [0.8*t, t]
PERCEPTIBILITY_THRESHOLDS = {
    (KIND_BFGS, NORM_L1PP): 15.0,
    (KIND_BFGS, NORM_LINF): 100.0,
    (KIND_SIGN, NORM_L1PP): 15.0,
    (KIND_SIGN, NORM_LINF): 15.0,
}


@dataclass(frozen=True)
class AlphaGrid:
    """Geometric line-search grid for the perturbation scale."""
    lo: float = 0.1
    hi: float = 512.0
    factor: float = 2.0 ** 0.25
    hard_cap: float = 4096.0

    def values(self, cap: float | None = None):
        stop = cap if cap is not None else self.hi
        out = []
        a = self.lo
        while a <= stop * (1 + 1e-12):
            out.append(a)
            a *= self.factor
        return out


@dataclass(frozen=True)
class AttackConfig:
    eta: float = 1e-6
    max_iters: int = 60
    lbfgs_memory: int = 10
    alpha_grid: AlphaGrid = field(default_factory=AlphaGrid)
    k_top: int = 1
    pixel_lo: float = 0.0
    pixel_hi: float = 255.0
    armijo_c: float = 1e-4
    bisection_steps: int = 8


@dataclass
class PerturbationRecord:
    epsilon: np.ndarray
    kind: str
    norm_kind: str
    norm_value: float
    alpha_star: float
    misclassified: bool
    iterations: int
    l1_per_pixel: float = 0.0
    linf: float = 0.0
    already_misclassified: bool = False
    grid_extended: bool = False
    direction: np.ndarray | None = None
    image_id: str = ""
    seed: int = 0


def _norm_of(t: np.ndarray, norm_kind: str) -> float:
    n = ops.norms(t)
    if norm_kind == NORM_L1PP:
        return n.l1_per_pixel
    if norm_kind == NORM_LINF:
        return n.linf
    raise ValueError(f"unknown norm kind {norm_kind!r}")


def _finish_record(kind, norm_kind, eps, alpha_star, misclassified, iterations,
                   **extra) -> PerturbationRecord:
    n = ops.norms(eps)
    return PerturbationRecord(
        epsilon=eps.astype(np.float32), kind=kind, norm_kind=norm_kind,
        norm_value=_norm_of(eps, norm_kind), alpha_star=alpha_star,
        misclassified=misclassified, iterations=iterations,
        l1_per_pixel=n.l1_per_pixel, linf=n.linf, **extra)


# ---------------------------------------------------------------------------
# Hinge loss


def hinge_loss_and_grad(model, x: np.ndarray, eps: np.ndarray, label: int,
                        k_top: int, lo: float = 0.0, hi: float = 255.0):
    """Loss = true-class pre-softmax score while still correctly classified,
    0 once misclassified; gradient w.r.t. eps, zeroed where pixel clamping
    is active."""
    raw = x + eps
    clamped = np.clip(raw, lo, hi).astype(np.float32)
    scores, cache = model.scores_with_cache(clamped)
    if top_k_error(scores, label, k_top) == 1:
        return 0.0, np.zeros_like(x)
    grad = model.class_grad(cache, label)
    active = (raw < lo) | (raw > hi)
    if active.any():
        grad = np.where(active, 0.0, grad).astype(grad.dtype)
    return float(scores[label]), grad


# ---------------------------------------------------------------------------
# Norm line search


@dataclass
class LineSearchResult:
    found: bool
    alpha_star: float = 0.0
    epsilon: np.ndarray | None = None
    direction: np.ndarray | None = None
    grid_extended: bool = False
    alpha_lo: float = 0.0  # top of the non-misclassifying side of the bracket


def line_search_min_norm(model, img: LabeledImage, direction: np.ndarray,
                         cfg: AttackConfig, norm_kind: str,
                         extend: bool = False) -> LineSearchResult:
    """Smallest grid scale along the unit direction that misclassifies, then
    one bisection refinement pass between the bracketing grid points."""
    dnorm = _norm_of(direction, norm_kind)
    if dnorm == 0:
        raise ValueError("line search needs a nonzero direction")
    dhat = (direction / dnorm).astype(np.float32)
    x = img.image

    def misclassifies(alpha: float) -> bool:
        adv = np.clip(x + alpha * dhat, cfg.pixel_lo, cfg.pixel_hi).astype(np.float32)
        return top_k_error(model.scores(adv), img.label, cfg.k_top) == 1

    grid = cfg.alpha_grid.values(cfg.alpha_grid.hard_cap if extend else None)
    prev = 0.0
    hit = None
    extended = False
    for a in grid:
        if extend and a > cfg.alpha_grid.hi:
            extended = True
        if misclassifies(a):
            hit = a
            break
        prev = a
    if hit is None:
        return LineSearchResult(False, direction=dhat, grid_extended=extended)
    lo_a, hi_a = prev, hit
    for _ in range(cfg.bisection_steps):
        mid = 0.5 * (lo_a + hi_a)
        if misclassifies(mid):
            hi_a = mid
        else:
            lo_a = mid
    eps = (np.clip(x + hi_a * dhat, cfg.pixel_lo, cfg.pixel_hi) - x).astype(np.float32)
    return LineSearchResult(True, hi_a, eps, dhat, extended, alpha_lo=lo_a)


# ---------------------------------------------------------------------------
# Box-constrained L-BFGS


def _two_loop(grad, s_list, y_list):
    q = grad.ravel().astype(np.float64)
    alphas = []
    rhos = [1.0 / float(np.dot(y.ravel(), s.ravel())) for s, y in zip(s_list, y_list)]
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rhos)):
        a = rho * float(np.dot(s.ravel(), q))
        alphas.append(a)
        q -= a * y.ravel()
    if s_list:
        s, y = s_list[-1], y_list[-1]
        gamma = float(np.dot(s.ravel(), y.ravel())) / float(np.dot(y.ravel(), y.ravel()))
        q *= gamma
    for (s, y, rho), a in zip(zip(s_list, y_list, rhos), reversed(alphas)):
        b = rho * float(np.dot(y.ravel(), q))
        q += (a - b) * s.ravel()
    return (-q).reshape(grad.shape).astype(np.float32)


def _lbfgs_descent(objective, x0, lower, upper, max_iters, memory, armijo_c,
                   stop_when):
    """Projected L-BFGS with Armijo backtracking; objective(x) -> (f, grad).

    The accepted objective value never increases. Returns (x, iterations).
    """
    x = np.clip(x0, lower, upper).astype(np.float32)
    f, g = objective(x)
    s_list, y_list = [], []
    it = 0

    def backtrack(d, t0):
        t = t0
        for _ in range(30):
            cand = np.clip(x + t * d, lower, upper).astype(np.float32)
            step = cand - x
            if not step.any():
                return None
            f_c, g_c = objective(cand)
            slope = min(0.0, float(np.dot(g.ravel(), step.ravel())))
            if f_c <= f + armijo_c * slope:
                return cand, f_c, g_c
            t *= 0.5
        return None

    while it < max_iters:
        if stop_when(f):
            break
        it += 1
        # active-set reduction: freeze coordinates pinned at a bound whose
        # gradient pushes them further outside
        blocked = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        pg = np.where(blocked, 0.0, g).astype(np.float32)
        pgmax = float(np.abs(pg).max())
        if pgmax == 0:
            break  # projected-gradient stationary point
        d = _two_loop(pg, s_list, y_list)
        d = np.where(blocked, 0.0, d).astype(np.float32)
        if float(np.dot(d.ravel(), pg.ravel())) >= 0:
            d = -pg
        hit = backtrack(d, 1.0 if s_list else 1.0 / pgmax)
        if hit is None:
            hit = backtrack(-pg, 1.0 / pgmax)
        if hit is None:
            break
        x_new, f_new, g_new = hit
        s = x_new - x
        y = g_new - g
        if float(np.dot(s.ravel(), y.ravel())) > 1e-10:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        x, f, g = x_new, f_new, g_new
    return x, it


# ---------------------------------------------------------------------------
# The two attacks


def _zero_record(kind, norm_kind, shape, already):
    return _finish_record(kind, norm_kind, np.zeros(shape, dtype=np.float32),
                          0.0, already, 0, already_misclassified=already)


def bfgs_perturbation(model, img: LabeledImage, cfg: AttackConfig | None = None
                      ) -> PerturbationRecord:
    """Quasi-Newton minimum-perturbation attack, reported in L1-per-pixel."""
    cfg = cfg or AttackConfig()
    x = img.image
    if top_k_error(model.scores(x), img.label, cfg.k_top) == 1:
        return _zero_record(KIND_BFGS, NORM_L1PP, x.shape, already=True)

    lower = (cfg.pixel_lo - x).astype(np.float32)
    upper = (cfg.pixel_hi - x).astype(np.float32)
    eps0 = np.zeros_like(x)
    state = {"done": False}  # hinge hit 0 at the last evaluated point

    def objective_tracked(eps):
        loss, g = hinge_loss_and_grad(model, x, eps, img.label, cfg.k_top,
                                      cfg.pixel_lo, cfg.pixel_hi)
        state["done"] = loss == 0.0
        val = cfg.eta * float(np.abs(eps).sum()) + loss
        grad = (cfg.eta * np.sign(eps) + g).astype(np.float32)
        return val, grad

    eps_opt, iters = _lbfgs_descent(objective_tracked, eps0, lower, upper,
                                    cfg.max_iters, cfg.lbfgs_memory,
                                    cfg.armijo_c, lambda f: state["done"])
    ls = LineSearchResult(False)
    if eps_opt.any():
        ls = line_search_min_norm(model, img, eps_opt, cfg, NORM_L1PP)
    if not ls.found:
        # fall back to the direction after a single quasi-Newton iteration,
        # with the grid extended up to the hard cap
        eps_one, _ = _lbfgs_descent(objective_tracked, eps0, lower, upper, 1,
                                    cfg.lbfgs_memory, cfg.armijo_c, lambda f: False)
        if eps_one.any():
            ls = line_search_min_norm(model, img, eps_one, cfg, NORM_L1PP,
                                      extend=True)
    if not ls.found:
        rec = _zero_record(KIND_BFGS, NORM_L1PP, x.shape, already=False)
        rec.iterations = iters
        rec.grid_extended = True
        return rec
    return _finish_record(KIND_BFGS, NORM_L1PP, ls.epsilon, ls.alpha_star, True,
                          iters, direction=ls.direction,
                          grid_extended=ls.grid_extended, image_id=img.image_id)


def sign_perturbation(model, img: LabeledImage, cfg: AttackConfig | None = None
                      ) -> PerturbationRecord:
    """Single step along the sign of the loss gradient, reported in L-inf.

    The hinge is minimized toward misclassification, so the step direction is
    the descent orientation -sign(grad): it lowers the true-class score.
    """
    cfg = cfg or AttackConfig()
    x = img.image
    if top_k_error(model.scores(x), img.label, cfg.k_top) == 1:
        return _zero_record(KIND_SIGN, NORM_LINF, x.shape, already=True)
    _, g = hinge_loss_and_grad(model, x, np.zeros_like(x), img.label, cfg.k_top,
                               cfg.pixel_lo, cfg.pixel_hi)
    d = -np.sign(g).astype(np.float32)
    if not d.any():
        rec = _zero_record(KIND_SIGN, NORM_LINF, x.shape, already=False)
        rec.grid_extended = True
        return rec
    ls = line_search_min_norm(model, img, d, cfg, NORM_LINF)
    if not ls.found:
        ls = line_search_min_norm(model, img, d, cfg, NORM_LINF, extend=True)
        if not ls.found:
            rec = _zero_record(KIND_SIGN, NORM_LINF, x.shape, already=False)
            rec.iterations = 1
            rec.grid_extended = True
            return rec
    return _finish_record(KIND_SIGN, NORM_LINF, ls.epsilon, ls.alpha_star, True, 1,
                          direction=ls.direction, grid_extended=ls.grid_extended,
                          image_id=img.image_id)


# ---------------------------------------------------------------------------
# Perceptibility and the noise baseline


def perceptibility_of(kind: str, norm_kind: str, value: float) -> str:
    threshold = PERCEPTIBILITY_THRESHOLDS[(kind, norm_kind)]
    if value > threshold:
        return PERCEPTIBLE
    if value >= 0.8 * threshold:
        return BORDERLINE
    return IMPERCEPTIBLE


def perceptibility(record: PerturbationRecord) -> str:
    return perceptibility_of(record.kind, record.norm_kind, record.norm_value)


def uniform_noise(shape, amplitude: float, seed: int = 0) -> np.ndarray:
    """I.i.d. uniform noise in [-amplitude, amplitude]."""
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    rng = np.random.default_rng(seed)
    return rng.uniform(-amplitude, amplitude, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# Record serialization: directory of tensors plus a JSON manifest


def save_records(records, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, r in enumerate(records):
        name = r.image_id or f"record_{i:04d}"
        save_tensor(r.epsilon, outdir / f"{name}_{r.kind}_eps.fvt")
        if r.direction is not None:
            save_tensor(r.direction, outdir / f"{name}_{r.kind}_dir.fvt")
        manifest.append({
            "image_id": name, "kind": r.kind, "norm_kind": r.norm_kind,
            "norm_value": r.norm_value, "l1_per_pixel": r.l1_per_pixel,
            "linf": r.linf, "alpha_star": r.alpha_star,
            "misclassified": r.misclassified, "iterations": r.iterations,
            "already_misclassified": r.already_misclassified,
            "grid_extended": r.grid_extended, "seed": r.seed,
            "has_direction": r.direction is not None,
        })
    (outdir / "records.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_records(outdir):
    outdir = Path(outdir)
    manifest = json.loads((outdir / "records.json").read_text())
    records = []
    for m in manifest:
        eps = load_tensor(outdir / f"{m['image_id']}_{m['kind']}_eps.fvt")
        direction = None
        if m.get("has_direction"):
            direction = load_tensor(outdir / f"{m['image_id']}_{m['kind']}_dir.fvt")
        records.append(PerturbationRecord(
            epsilon=eps, kind=m["kind"], norm_kind=m["norm_kind"],
            norm_value=m["norm_value"], alpha_star=m["alpha_star"],
            misclassified=m["misclassified"], iterations=m["iterations"],
            l1_per_pixel=m["l1_per_pixel"], linf=m["linf"],
            already_misclassified=m["already_misclassified"],
            grid_extended=m["grid_extended"], direction=direction,
            image_id=m["image_id"], seed=m["seed"]))
    return records
