"""Command-line entry points: dataset generation, training, attacks,
foveation checks, analyses, the full pipeline, and report formatting."""

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attack, foveation, harness
from .dataset import SyntheticSpec, generate_synthetic, ingest_dataset
from .model import (TrainConfig, desk_model_spec, load_checkpoint,
                    save_checkpoint, top_k_error, train)


def _add_run_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--model")
    p.add_argument("--model-b", default=None)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--ktop", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--attack-count", type=int, default=None)
    p.add_argument("--transfer-count", type=int, default=None)
    p.add_argument("--ratio-count", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--analyses", default=None,
                   help="comma-separated subset of fig3,fig4a,fig4b,fig4c,hyp2,table3")


def _experiment_config(args) -> harness.ExperimentConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {"model_path": args.model, "model_b_path": args.model_b,
                 "data_dir": args.data, "outdir": args.out, "k_top": args.ktop,
                 "seed": args.seed, "attack_count": args.attack_count,
                 "transfer_count": args.transfer_count,
                 "ratio_count": args.ratio_count, "workers": args.workers}
    if args.analyses is not None:
        overrides["analyses"] = tuple(args.analyses.split(","))
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    for required in ("model_path", "data_dir", "outdir"):
        if not base.get(required):
            raise SystemExit(f"missing required setting {required}")
    return harness.ExperimentConfig.from_json(json.dumps(base))


def cmd_gen_data(args):
    spec = SyntheticSpec(num_images=args.num_images, size=args.size,
                         num_classes=args.classes, scale_lo=args.scale_lo,
                         scale_hi=args.scale_hi, clutter_density=args.clutter,
                         seed=args.seed)
    generate_synthetic(spec, args.out)
    print(f"wrote {spec.num_images} images to {args.out}")


def cmd_train(args):
    ds = ingest_dataset(args.data)
    holdout = max(1, int(len(ds.images) * args.holdout))
    # class labels cycle through the id order, so a trailing block is balanced
    tr, val = ds.images[:-holdout], ds.images[-holdout:]
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                      batch=args.batch, seed=args.seed, augment=not args.no_augment)
    ckpt = train(desk_model_spec(ds.num_classes, tr[0].image.shape[1]), tr, val, cfg,
                 accuracy_target=args.target, max_attempts=args.attempts)
    save_checkpoint(ckpt, args.out)
    print(f"held-out top-1 accuracy {ckpt.metadata['final_accuracy']:.4f}; "
          f"saved {args.out}")


def cmd_attack(args):
    net = load_checkpoint(args.model).network
    ds = ingest_dataset(args.data)
    cfg = replace(attack.AttackConfig(), k_top=args.ktop, eta=args.eta,
                  max_iters=args.max_iters)
    subset = [im for im in ds.images
              if top_k_error(net.scores(im.image), im.label, args.ktop) == 0]
    subset = subset[:args.count]
    kinds = [args.kind] if args.kind != "both" else [attack.KIND_BFGS, attack.KIND_SIGN]
    for kind in kinds:
        fn = harness.ATTACK_FNS[kind]
        records = [fn(net, im, cfg) for im in subset]
        attack.save_records(records, Path(args.out) / kind)
        ok = sum(r.misclassified for r in records)
        print(f"{kind}: {ok}/{len(records)} misclassified; records in {args.out}/{kind}")


def cmd_foveate(args):
    net = load_checkpoint(args.model).network
    ds = ingest_dataset(args.data)
    input_hw = tuple(net.spec.input_shape[1:])
    subset = ds.images[:args.count]
    for text in args.spec:
        spec = foveation.FoveationSpec.from_text(text)
        errs = []
        for im in subset:
            fov = foveation.build_foveation(spec, im, net, input_hw)
            scores = foveation.FoveatedModel(net, fov).scores(im.image)
            errs.append(top_k_error(scores, im.label, args.ktop))
        print(f"{text}: clean accuracy {1.0 - float(np.mean(errs)):.4f} "
              f"over {len(errs)} images")


def cmd_analyze(args):
    cfg = _experiment_config(args)
    result = harness.run_experiment(cfg)
    for name, path in sorted(result.csv_paths.items()):
        print(f"wrote {path}")
    print(f"stages: {json.dumps(result.manifest['stages'])}")


def cmd_run(args):
    cfg = _experiment_config(args)
    result = harness.run_experiment(cfg)
    print(f"clean accuracy {result.clean_accuracy:.4f}")
    for row in result.rows:
        print(f"{row.condition:<22} {row.attack:<6} {row.accuracy:.4f}")
    print(f"outputs in {result.outdir}")


def cmd_report(args):
    rows = []
    with open(args.rows, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            rows.append(line.rstrip("\n").split(","))
    header, body = rows[0], rows[1:]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fovlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--scale-lo", type=float, default=0.3)
    p.add_argument("--scale-hi", type=float, default=0.8)
    p.add_argument("--clutter", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the desk model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--target", type=float, default=0.85)
    p.add_argument("--attempts", type=int, default=3)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="generate minimum perturbations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["bfgs", "sign", "both"], default="both")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--ktop", type=int, default=1)
    p.add_argument("--eta", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=60)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("foveate", help="report clean accuracy under foveations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", action="append", required=True,
                   help="e.g. object_crop or shift_crops(n=10)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--ktop", type=int, default=1)
    p.set_defaults(fn=cmd_foveate)

    p = sub.add_parser("analyze", help="run selected analyses")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("run", help="full pipeline: attacks, foveations, analyses")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="pretty-print a report CSV")
    p.add_argument("--rows", required=True)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
