"""Experiment orchestration: attacks, foveations, analyses, and CSV reports.

A run is fully determined by its config (paths + seeds): attacks are
deterministic, per-image work is independent, and every reduction happens in
image-id order, so reruns produce byte-identical CSVs regardless of the
worker count.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, attack, foveation
from .attack import AttackConfig, KIND_BFGS, KIND_SIGN, NORM_L1PP, NORM_LINF
from .data import LabeledImage
from .dataset import ingest_dataset
from .foveation import BoundingBox, FoveationSpec, FoveatedModel, build_foveation
from .model import load_checkpoint, top_k_error

SUBSTITUTION_NOTE = ("k_top=1 stand-in for the usual top-5 criterion; "
                     "saliency crops use in-model gradient-magnitude maps")

RELATIVE_SCALES = (0.0, 1.0, 2.0, 4.0, 8.0)
MASKED_NORMS = (2.0, 4.0, 6.0, 9.0, 12.0, 15.0)
ERROR_THRESHOLDS = tuple(np.geomspace(1e-3, 100.0, 26))

MP_CONDITIONS = (("identity", "MP"),
                 ("object_crop", "Object Crop MP"),
                 ("saliency_crops", "Saliency Crop MP"),
                 ("ten_crop", "10 Crop MP"),
                 ("random_crops", "3 Crop MP"))
MPO_CONDITIONS = (("identity", "MP-Object"),
                  ("shift_crops_10", "10 Shift MP-Object"),
                  ("shift_crops_1", "1 Shift MP-Object"),
                  ("embed", "Embedded MP-Object"))


@dataclass(frozen=True)
class ExperimentConfig:
    model_path: str
    data_dir: str
    outdir: str
    model_b_path: str = ""
    k_top: int = 1
    seed: int = 0
    attack_count: int = 200
    transfer_count: int = 100
    ratio_count: int = 24
    workers: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    analyses: tuple = ("fig3", "fig4a", "fig4b", "fig4c", "hyp2", "table3")

    def validate(self) -> None:
        for name, p in (("model", self.model_path), ("data", self.data_dir)):
            if not Path(p).exists():
                raise FileNotFoundError(f"{name} path {p} does not exist")
        if self.model_b_path and not Path(self.model_b_path).exists():
            raise FileNotFoundError(f"model_b path {self.model_b_path} does not exist")

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        d = json.loads(text)
        atk = d.pop("attack", {})
        grid = atk.pop("alpha_grid", {})
        cfg = AttackConfig(**atk, alpha_grid=attack.AlphaGrid(**grid))
        if "analyses" in d:
            d["analyses"] = tuple(d["analyses"])
        return ExperimentConfig(attack=cfg, **d)


@dataclass
class ReportRow:
    condition: str
    attack: str
    accuracy: float
    population: int
    exclusions: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    outdir: Path
    clean_accuracy: float = 0.0
    rows: list = field(default_factory=list)
    subset: list = field(default_factory=list)
    crop_subset: list = field(default_factory=list)
    mp_records: dict = field(default_factory=dict)
    mpo_records: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    secant: dict = field(default_factory=dict)
    fig3: dict = field(default_factory=dict)
    fig4a: dict = field(default_factory=dict)
    hyp2: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    csv_paths: dict = field(default_factory=dict)


def map_images(fn, items, workers: int = 1):
    """Order-preserving per-item map; results are independent of workers."""
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


ATTACK_FNS = {KIND_BFGS: attack.bfgs_perturbation, KIND_SIGN: attack.sign_perturbation}


def _full_frame_box(image: np.ndarray) -> BoundingBox:
    return BoundingBox(0, 0, image.shape[2], image.shape[1])


def _object_crop_image(img: LabeledImage, input_hw) -> LabeledImage:
    crop = foveation.crop_resize(img.image, img.bbox, input_hw)
    return LabeledImage(crop, img.label, [_full_frame_box(crop)], img.image_id)


def _spec_for(name: str, input_hw, seed: int) -> FoveationSpec:
    if name == "shift_crops_10":
        return FoveationSpec("shift_crops", n=10, out_hw=input_hw, seed=seed)
    if name == "shift_crops_1":
        return FoveationSpec("shift_crops", n=1, out_hw=input_hw, seed=seed)
    if name == "saliency_crops":
        return FoveationSpec("saliency_crops", n=3, out_hw=input_hw, seed=seed)
    if name == "random_crops":
        return FoveationSpec("random_crops", n=3, out_hw=input_hw, seed=seed)
    return FoveationSpec(name, out_hw=input_hw, seed=seed)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _write_csv(path: Path, description: str, header, rows) -> None:
    lines = [f"# {path.name}: {description}",
             f"# substitutions: {SUBSTITUTION_NOTE}",
             ",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def emit_report(rows, outdir) -> dict:
    """Write report.csv and a plain-text table; accuracies use 4 decimals."""
    if not rows:
        raise ValueError("no report rows")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "report.csv"
    _write_csv(csv_path, "accuracy before/after each foveation",
               ["condition", "attack", "accuracy", "population", "exclusions"],
               [(r.condition, r.attack, f"{r.accuracy:.4f}", r.population, r.exclusions)
                for r in rows])
    width = max(len(r.condition) for r in rows)
    text = [f"# substitutions: {SUBSTITUTION_NOTE}",
            f"{'condition':<{width}}  attack  accuracy  population  exclusions"]
    for r in rows:
        text.append(f"{r.condition:<{width}}  {r.attack:<6}  {r.accuracy:8.4f}  "
                    f"{r.population:10d}  {r.exclusions:10d}")
    txt_path = outdir / "report.txt"
    txt_path.write_text("\n".join(text) + "\n")
    return {"report.csv": csv_path, "report.txt": txt_path}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.validate()
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(cfg, outdir)
    stages = {}
    t_start = time.perf_counter()

    ckpt = load_checkpoint(cfg.model_path)
    net = ckpt.network
    ds = ingest_dataset(cfg.data_dir)
    input_hw = tuple(net.spec.input_shape[1:])
    acfg = replace(cfg.attack, k_top=cfg.k_top)

    def stage(name, fn, *deps):
        if any(stages.get(d) != "ok" for d in deps):
            stages[name] = "skipped"
            return
        t0 = time.perf_counter()
        try:
            fn()
            stages[name] = "ok"
        except Exception as e:  # keep partial outputs, mark the stage failed
            stages[name] = f"failed: {e}"
        stages[f"{name}_seconds"] = round(time.perf_counter() - t0, 3)

    # ---- clean accuracy and the attacked subset ---------------------------

    def s_clean():
        errs = [top_k_error(net.scores(im.image), im.label, cfg.k_top)
                for im in ds.images]
        result.clean_accuracy = 1.0 - float(np.mean(errs))
        subset = [im for im, e in zip(ds.images, errs) if e == 0 and im.bboxes]
        result.subset = subset[:cfg.attack_count]
        result.crop_subset = [_object_crop_image(im, input_hw) for im in result.subset]

    stage("clean", s_clean)

    # ---- attacks -----------------------------------------------------------

    def s_attacks():
        for kind, fn in ATTACK_FNS.items():
            result.mp_records[kind] = map_images(
                lambda im: fn(net, im, acfg), result.subset, cfg.workers)
            result.mpo_records[kind] = map_images(
                lambda im: fn(net, im, acfg), result.crop_subset, cfg.workers)
            attack.save_records(result.mp_records[kind], outdir / f"records_mp_{kind}")
            attack.save_records(result.mpo_records[kind], outdir / f"records_mpo_{kind}")

    stage("attacks", s_attacks, "clean")

    # ---- foveation accuracy table ------------------------------------------

    def _accuracy_row(condition, kind, errors):
        pop = len(errors)
        acc = 1.0 - float(np.mean(errors)) if errors else float("nan")
        return ReportRow(condition, kind, acc, pop, len(ds.images) - pop)

    def _fov_errors(spec_name, adv_images, eval_base):
        """adv_images: evaluated inputs; eval_base: image used to freeze windows."""
        errs = []
        for adv, base in zip(adv_images, eval_base):
            spec = _spec_for(spec_name, input_hw, cfg.seed)
            fov = build_foveation(spec, base, net, input_hw)
            scores = FoveatedModel(net, fov).scores(adv)
            errs.append(top_k_error(scores, base.label, cfg.k_top))
        return errs

    def s_report():
        rows = result.rows
        n = len(result.subset)
        rows.append(ReportRow("w/o MP", "-", 1.0, n, len(ds.images) - n))
        for kind in ATTACK_FNS:
            advs = [np.clip(im.image + r.epsilon, acfg.pixel_lo, acfg.pixel_hi)
                    .astype(np.float32)
                    for im, r in zip(result.subset, result.mp_records[kind])]
            adv_imgs = [LabeledImage(a, im.label, im.bboxes, im.image_id)
                        for a, im in zip(advs, result.subset)]
            for spec_name, condition in MP_CONDITIONS:
                if spec_name == "identity":
                    errs = [top_k_error(net.scores(a), im.label, cfg.k_top)
                            for a, im in zip(advs, result.subset)]
                else:
                    # windows are frozen from the input under evaluation
                    errs = _fov_errors(spec_name, advs, adv_imgs)
                rows.append(_accuracy_row(condition, kind, errs))
        n = len(result.crop_subset)
        clean_crop_errs = [top_k_error(net.scores(im.image), im.label, cfg.k_top)
                           for im in result.crop_subset]
        rows.append(_accuracy_row("w/o MP-Object", "-", clean_crop_errs))
        for kind in ATTACK_FNS:
            adv_crops = [np.clip(im.image + r.epsilon, acfg.pixel_lo, acfg.pixel_hi)
                         .astype(np.float32)
                         for im, r in zip(result.crop_subset, result.mpo_records[kind])]
            embedded = [foveation.embed_crop(full, crop)
                        for full, crop in zip(result.subset, adv_crops)]
            for spec_name, condition in MPO_CONDITIONS:
                if spec_name == "identity":
                    errs = [top_k_error(net.scores(a), im.label, cfg.k_top)
                            for a, im in zip(adv_crops, result.crop_subset)]
                elif spec_name == "embed":
                    errs = [top_k_error(net.scores(e), im.label, cfg.k_top)
                            for e, im in zip(embedded, result.subset)]
                else:
                    emb_imgs = [LabeledImage(e, im.label, im.bboxes, im.image_id)
                                for e, im in zip(embedded, result.subset)]
                    errs = _fov_errors(spec_name, embedded, emb_imgs)
                rows.append(_accuracy_row(condition, kind, errs))
        result.csv_paths.update(emit_report(rows, outdir))

    stage("report", s_report, "attacks")

    # ---- fig3: accuracy vs relative perturbation norm ----------------------

    def s_fig3():
        rows = []
        for kind in ATTACK_FNS:
            norm_kind = NORM_L1PP if kind == KIND_BFGS else NORM_LINF
            items = [(im, r.epsilon) for im, r in
                     zip(result.subset, result.mp_records[kind]) if r.misclassified]
            pts = analysis.norm_sweep_accuracy(net, items, RELATIVE_SCALES,
                                               cfg.k_top, norm_kind, relative=True)
            result.fig3[("a", "own", kind)] = pts
            noise_items = []
            for i, (im, r) in enumerate(zip(result.subset, result.mp_records[kind])):
                if not r.misclassified or r.norm_value == 0:
                    continue
                noise = attack.uniform_noise(im.image.shape, 1.0,
                                             seed=cfg.seed * 100003 + i)
                scale = r.norm_value / attack._norm_of(noise, norm_kind)
                noise_items.append((im, (noise * scale).astype(np.float32)))
            result.fig3[("a", "uniform", kind)] = analysis.norm_sweep_accuracy(
                net, noise_items, RELATIVE_SCALES, cfg.k_top, norm_kind, relative=True)
        if cfg.model_b_path:
            net_b = load_checkpoint(cfg.model_b_path).network
            both = [i for i, im in enumerate(result.subset)
                    if top_k_error(net_b.scores(im.image), im.label, cfg.k_top) == 0]
            both = both[:cfg.transfer_count]
            for kind, fn in ATTACK_FNS.items():
                norm_kind = NORM_L1PP if kind == KIND_BFGS else NORM_LINF
                imgs = [result.subset[i] for i in both]
                own_b = map_images(lambda im: fn(net_b, im, acfg), imgs, cfg.workers)
                # equal-nu comparison: the transferred perturbation is rescaled
                # to the evaluated model's own per-image minimum norm
                own_items, cross_items = [], []
                for i, im, rb in zip(both, imgs, own_b):
                    ra = result.mp_records[kind][i]
                    if not (rb.misclassified and ra.misclassified):
                        continue
                    na = attack._norm_of(ra.epsilon, norm_kind)
                    nb = attack._norm_of(rb.epsilon, norm_kind)
                    if na == 0 or nb == 0:
                        continue
                    own_items.append((im, rb.epsilon))
                    cross_items.append((im, (ra.epsilon * (nb / na)).astype(np.float32)))
                result.fig3[("b", "own", kind)] = analysis.norm_sweep_accuracy(
                    net_b, own_items, RELATIVE_SCALES, cfg.k_top, norm_kind, relative=True)
                result.fig3[("b", "transfer", kind)] = analysis.norm_sweep_accuracy(
                    net_b, cross_items, RELATIVE_SCALES, cfg.k_top, norm_kind, relative=True)
        out = []
        for (eval_model, source, kind), pts in sorted(result.fig3.items()):
            for p in pts:
                out.append((eval_model, source, kind, _fmt(p.target),
                            f"{p.accuracy:.4f}", p.population))
        path = outdir / "fig3_norm_sweep.csv"
        _write_csv(path, "accuracy vs perturbation norm as a multiple of each "
                         "image's minimum misclassifying norm",
                   ["eval_model", "source", "attack", "norm_scale", "accuracy",
                    "population"], out)
        result.csv_paths["fig3_norm_sweep.csv"] = path

    if "fig3" in cfg.analyses:
        stage("fig3", s_fig3, "attacks")

    # ---- fig4a: object / background masked sweep ----------------------------

    def s_fig4a():
        out = []
        for kind in ATTACK_FNS:
            norm_kind = NORM_L1PP if kind == KIND_BFGS else NORM_LINF
            items = [(im, r.epsilon) for im, r in
                     zip(result.subset, result.mp_records[kind]) if r.misclassified]
            for mode in ("full", "object", "background"):
                post = None
                if mode != "full":
                    post = (lambda m: lambda im, eps:
                            foveation.mask_perturbation(eps, im.bbox, m))(mode)
                pts = analysis.norm_sweep_accuracy(
                    net, items, MASKED_NORMS, cfg.k_top, norm_kind, post_scale=post)
                result.fig4a[(kind, mode)] = pts
                for p in pts:
                    out.append((kind, mode, _fmt(p.target), f"{p.accuracy:.4f}",
                                p.population))
        path = outdir / "fig4a_masked_sweep.csv"
        _write_csv(path, "accuracy when the full-image perturbation is rescaled "
                         "to the target norm and then masked to the object box "
                         "or its complement",
                   ["attack", "mask", "norm", "accuracy", "population"], out)
        result.csv_paths["fig4a_masked_sweep.csv"] = path

    if "fig4a" in cfg.analyses:
        stage("fig4a", s_fig4a, "attacks")

    # ---- fig4b/fig4c: linearity curves and secant errors --------------------

    def s_fig4b():
        out = []
        for kind in ATTACK_FNS:
            curves = []
            for im, r in zip(result.subset, result.mp_records[kind]):
                if not r.misclassified or r.norm_value == 0:
                    continue
                curves.append(analysis.linearity_probe(net, im, r))
            result.curves[kind] = curves
            for c in curves:
                for i, cv in enumerate(c.c_values):
                    out.append((kind, c.image_id, _fmt(cv), _fmt(c.score_full[i]),
                                _fmt(c.score_pert_alone[i]), _fmt(c.score_secant[i]),
                                _fmt(c.slope)))
        path = outdir / "fig4b_curves.csv"
        _write_csv(path, "true-class score along x + c*eps vs the perturbation "
                         "alone vs the secant-line prediction (pre-softmax, "
                         "no pixel re-clamping)",
                   ["attack", "image_id", "c", "score_full", "score_pert_alone",
                    "score_secant", "slope"], out)
        result.csv_paths["fig4b_curves.csv"] = path

    def s_fig4c():
        out = []
        for kind in ATTACK_FNS:
            hyp1, naive = analysis.secant_errors(result.curves[kind])
            result.secant[kind] = (hyp1, naive)
            for name, errs in (("hyp1", hyp1), ("naive", naive)):
                hist = analysis.cumulative_histogram(errs, ERROR_THRESHOLDS)
                for t, cnt in zip(hist.thresholds, hist.counts):
                    out.append((kind, name, _fmt(t), int(cnt), hist.population))
        path = outdir / "fig4c_cumhist.csv"
        _write_csv(path, "images whose secant-line (hyp1) or f(eps) (naive) "
                         "score-change error at c=1 is below each threshold",
                   ["attack", "error_kind", "threshold", "count", "population"], out)
        result.csv_paths["fig4c_cumhist.csv"] = path

    if "fig4b" in cfg.analyses or "fig4c" in cfg.analyses:
        stage("fig4b", s_fig4b, "attacks")
    if "fig4c" in cfg.analyses:
        stage("fig4c", s_fig4c, "fig4b")

    # ---- hyp2: score decomposition under foveation --------------------------

    def s_hyp2():
        out = []
        jobs = [("mp", "object_crop", result.subset, result.mp_records)]
        jobs.append(("mp_object", "embed", result.crop_subset, result.mpo_records))
        for set_name, spec_name, imgs, records in jobs:
            for kind in ATTACK_FNS:
                recs = []
                for im, full, r in zip(imgs, result.subset, records[kind]):
                    if not r.misclassified or r.norm_value == 0:
                        continue
                    base = full if spec_name == "embed" else im
                    fov = build_foveation(_spec_for(spec_name, input_hw, cfg.seed),
                                          base, net, input_hw)
                    recs.append(analysis.foveation_decomposition(net, im, r, fov))
                result.hyp2[(set_name, spec_name, kind)] = recs
                for d in recs:
                    out.append((set_name, spec_name, kind, d.image_id,
                                _fmt(d.clean_shift), _fmt(d.pert_shift)))
        path = outdir / "hyp2_decomposition.csv"
        _write_csv(path, "true-class score shift caused by the foveation, for "
                         "the clean image and for the perturbation term",
                   ["set", "foveation", "attack", "image_id", "clean_shift",
                    "pert_shift"], out)
        result.csv_paths["hyp2_decomposition.csv"] = path

    if "hyp2" in cfg.analyses:
        stage("hyp2", s_hyp2, "attacks")

    # ---- table3: norm-increase ratios ---------------------------------------

    def s_table3():
        out = []
        sample = result.subset[:cfg.ratio_count]
        for spec_name in ("identity", "object_crop"):
            for kind in ATTACK_FNS:
                ratios = []
                for i, im in enumerate(sample):
                    fov = build_foveation(_spec_for(spec_name, input_hw, cfg.seed),
                                          im, net, input_hw)
                    raw = result.mp_records[kind][i]
                    ratios.append(analysis.norm_ratio(net, im, acfg, fov, kind,
                                                      raw_record=raw))
                result.ratios[(spec_name, kind)] = ratios
                for r in ratios:
                    out.append((spec_name, kind, r.image_id, _fmt(r.ratio),
                                _fmt(r.raw_norm), _fmt(r.foveated_norm),
                                r.excluded or "-"))
        path = outdir / "table3_ratios.csv"
        _write_csv(path, "factor by which the minimum misclassifying norm grows "
                         "when the attack must go through the foveation",
                   ["foveation", "attack", "image_id", "ratio", "raw_norm",
                    "foveated_norm", "excluded"], out)
        result.csv_paths["table3_ratios.csv"] = path

    if "table3" in cfg.analyses:
        stage("table3", s_table3, "attacks")

    # ---- manifest ------------------------------------------------------------

    manifest = {
        "config": {"model": cfg.model_path, "model_b": cfg.model_b_path,
                   "data": cfg.data_dir, "k_top": cfg.k_top, "seed": cfg.seed,
                   "attack_count": cfg.attack_count,
                   "transfer_count": cfg.transfer_count,
                   "ratio_count": cfg.ratio_count, "workers": cfg.workers,
                   "analyses": list(cfg.analyses)},
        "substitutions": {"k_top": f"{cfg.k_top} (stand-in for top-5)",
                          "saliency": "in-model gradient-magnitude maps"},
        "clean_accuracy": round(result.clean_accuracy, 6),
        "stages": stages,
        "wall_clock_seconds": round(time.perf_counter() - t_start, 3),
    }
    result.manifest = manifest
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return result
