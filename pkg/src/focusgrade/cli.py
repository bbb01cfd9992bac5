"""Command-line entry point: gen-data, train, eval, cam, embed, ablate.

Config resolution is layered: dataclass defaults, then a flat JSON config
file (--config), then explicit flags / --set overrides. The resolved config
is echoed to config.json in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from typing import Optional

import numpy as np

from . import frl, mca
from .autodiff import Tensor
from .data import GeneratorConfig, Sample, generate, load
from .model import ModelConfig
from .train import (
    ABLATIONS,
    TrainConfig,
    cross_validate,
    evaluate,
    load_trainer_checkpoint,
    predict_scores,
    write_config_json,
)


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise SystemExit(f"error: cannot read config {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise SystemExit(f"error: malformed config {path}: {e}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"error: config {path} must hold a JSON object")
    return cfg


def _parse_sets(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"error: --set wants KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = json.loads(value) if value and value[0] in "-0123456789.[tf" else value
    return out


def _build(dc_type, flat: dict, overrides: dict):
    names = {f.name for f in fields(dc_type)}
    kwargs = {k: v for k, v in flat.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items() if k in names and v is not None})
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as e:
        raise SystemExit(f"error: bad {dc_type.__name__}: {e}")


def _load_dataset(path: str) -> list[Sample]:
    try:
        return load(path)
    except (OSError, ValueError) as e:
        raise SystemExit(f"error: {e}")


def _model_config(flat: dict, samples: list[Sample]) -> ModelConfig:
    h, w, c = samples[0].image.shape
    defaults = {"image_h": h, "image_w": w, "channels": c}
    return _build(ModelConfig, {**defaults, **flat}, {})


def _load_ckpt(path):
    try:
        return load_trainer_checkpoint(path)
    except (OSError, ValueError) as e:
        raise SystemExit(f"error: {e}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    flat = _load_config_file(args.config)
    flat.update(_parse_sets(args.set))
    cfg = _build(GeneratorConfig, flat, {"seed": args.seed})
    samples = generate(cfg, args.out)
    grades = np.bincount([s.grade for s in samples], minlength=3)
    print(
        f"wrote {len(samples)} samples ({cfg.n_patients} patients) to {args.out}; "
        f"grades II/III/IV = {grades[0]}/{grades[1]}/{grades[2]}"
    )
    return 0


def cmd_train(args) -> int:
    flat = _load_config_file(args.config)
    flat.update(_parse_sets(args.set))
    samples = _load_dataset(args.data)
    model_cfg = _model_config(flat, samples)
    cfg = _build(
        TrainConfig,
        flat,
        {
            "seed": args.seed,
            "epochs": args.epochs,
            "folds": args.folds,
            "ablation": args.ablation,
        },
    )
    results, aggregate = cross_validate(samples, model_cfg, cfg, out_dir=args.out, log=print)
    for key, stats in aggregate.items():
        print(f"{key}: {100 * stats['mean']:.2f} +/- {100 * stats['std']:.2f}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = _load_ckpt(args.ckpt)
    samples = _load_dataset(args.data)
    report = evaluate(model, samples)
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            json.dump(report.as_dict(), f, indent=2)
    return 0


def cmd_cam(args) -> int:
    model, _, _ = _load_ckpt(args.ckpt)
    samples = _load_dataset(args.data)
    if args.samples:
        wanted = set(args.samples.split(","))
        samples = [s for s in samples if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in samples}
        if missing:
            raise SystemExit(f"error: sample ids not in dataset: {sorted(missing)}")
    os.makedirs(args.out, exist_ok=True)
    threshold = args.threshold
    for s in samples:
        pred = int(predict_scores(model, s.image[None]).argmax())
        cam = frl.contribution_map(model, s.image, pred)
        mask = frl.patch_mask(cam.scores, model.config.patch_size, threshold)
        frl.save_cam_pgm(os.path.join(args.out, f"{s.sample_id}_cam.pgm"), cam.scores)
        frl.save_mask_overlay_ppm(
            os.path.join(args.out, f"{s.sample_id}_overlay.ppm"), s.image, mask
        )
    print(f"wrote {len(samples)} contribution maps to {args.out}")
    return 0


def cmd_embed(args) -> int:
    model, projectors, config = _load_ckpt(args.ckpt)
    if projectors is None:
        raise SystemExit("error: checkpoint has no projector parameters; train with alignment on")
    samples = _load_dataset(args.data)
    if any(s.panel is None for s in samples):
        raise SystemExit("error: dataset has no biomarker columns; embeddings need labels")
    threshold = float(config.get("train", {}).get("threshold", 0.5))

    ids, views, label_cols, feats = [], [], [], []
    for s in samples:
        pred = int(predict_scores(model, s.image[None]).argmax())
        cam = frl.contribution_map(model, s.image, pred)
        mask = frl.patch_mask(cam.scores, model.config.patch_size, threshold)
        trip = frl.split_regions(s.image, mask)
        pooled = model.forward(np.stack([trip.x_glb, trip.x_pos, trip.x_neg])).pooled.data
        values = s.panel.values()
        for view, f in zip(mca.VIEW_NAMES, pooled):
            ids.append(s.sample_id)
            views.append(view)
            label_cols.append(values if view != "neg" else mca.NORMAL_STATUS)
            feats.append(f)
    labels = np.array(label_cols, np.int64).T  # [N, rows]
    features = np.stack(feats)
    embeddings = {
        name: projectors.project(name, Tensor(features)).data
        for name in mca.BIOMARKER_NAMES
    }
    written = mca.export_embeddings(args.out, ids, views, labels, embeddings)
    print(f"wrote {len(written)} embedding tables to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    flat = _load_config_file(args.config)
    flat.update(_parse_sets(args.set))
    samples = _load_dataset(args.data)
    model_cfg = _model_config(flat, samples)
    os.makedirs(args.out, exist_ok=True)

    table = []
    for ablation in ("baseline", "no_frl", "no_mca", "full"):
        cfg = _build(
            TrainConfig,
            flat,
            {
                "seed": args.seed,
                "epochs": args.epochs,
                "folds": args.folds,
                "ablation": ablation,
            },
        )
        run_dir = os.path.join(args.out, ablation)
        print(f"== {ablation}")
        _, aggregate = cross_validate(samples, model_cfg, cfg, out_dir=run_dir, log=print)
        table.append((ablation, aggregate))

    path = os.path.join(args.out, "comparison.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "auc", "ap", "accuracy", "kappa"])
        for ablation, agg in table:
            writer.writerow(
                [ablation]
                + [
                    f"{100 * agg[m]['mean']:.2f}±{100 * agg[m]['std']:.2f}"
                    for m in ("auc", "ap", "accuracy", "kappa")
                ]
            )
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="focusgrade",
        description="Focus-guided transformer training on planted-region grading datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out_required=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train with cross-validation or one split")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cam", help="export contribution maps and mask overlays")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", help="comma-separated sample ids (default: all)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_cam)

    p = sub.add_parser("embed", help="export per-biomarker view embeddings as TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("ablate", help="run all four configurations on shared folds")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
