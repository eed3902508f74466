"""Command-line entry point: per-stage subcommands and the ``pipeline`` orchestrator.

Every subcommand accepts ``--config``, ``--seed``, ``--out-dir``, ``--no-cache``
and one flag per :class:`PipelineConfig` field (``--train_steps`` or
``--train-steps``). Manifests on disk always carry original class ids; the
head-first reindexing is internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import diffusion
from .checkpoint import load_container, save_container
from .classifier import load_classifier, predict, save_classifier, train_classifier
from .config import PipelineConfig, config_field_types
from .datamodel import LongTailDataset, compute_budget, load_aligned_samples, load_manifest
from .errors import LesionAugError
from .harness import RunManifest, StageCache, run_cv, run_fold, sweep_gamma
from .io import read_image, read_jsonl, write_image, write_json, write_jsonl, write_mask
from .metrics import aggregate, evaluate
from .oodfilter import filter_class
from .seeding import stage_seed
from .segmentation import SegmenterParams, segment
from .selection import AnomalyScorer, build_finetune_multiset, build_weight_table, train_scorers, weight_table_from_rows
from .toydata import TOY_COUNTS, toy_dataset, write_toy_dataset

logger = logging.getLogger("lesionaug")

STANDALONE_FOLD = -1  # seed namespace for stage commands run outside a fold


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _global_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", type=Path, help="YAML file of PipelineConfig fields")
    g.add_argument("--seed", type=int, help="run seed (overrides rng_seed)")
    g.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    g.add_argument("--no-cache", action="store_true", help="recompute every stage")
    g.add_argument("-v", "--verbose", action="store_true")
    c = p.add_argument_group("config overrides")
    for name, typ in config_field_types().items():
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        c.add_argument(*flags, dest=f"cfg_{name}", type=_parse_bool if typ is bool else typ, default=argparse.SUPPRESS)
    return p


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _dataset(args: argparse.Namespace, cfg: PipelineConfig) -> LongTailDataset:
    seg = SegmenterParams.from_config(cfg)
    if getattr(args, "toy", False):
        return toy_dataset(TOY_COUNTS, cfg.image_size, args.toy_seed, seg)
    if not args.manifest:
        raise LesionAugError("either --manifest or --toy is required")
    return load_manifest(args.manifest, segmenter=seg)


def _add_data_args(p: argparse.ArgumentParser, toy: bool = False) -> None:
    p.add_argument("--manifest", type=Path, required=not toy)
    if toy:
        p.add_argument("--toy", action="store_true", help="use the built-in procedural long-tail dataset")
        p.add_argument("--toy-seed", type=int, default=0)


def _out(args: argparse.Namespace) -> Path:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


# ---------------------------------------------------------------- stage commands


def cmd_make_toy(args, cfg):
    path = write_toy_dataset(_out(args), args.counts, cfg.image_size, args.toy_seed)
    print(path)


def cmd_segment(args, cfg):
    out = _out(args)
    (out / "masks").mkdir(exist_ok=True)
    params = SegmenterParams.from_config(cfg)
    records = read_jsonl(args.manifest)
    base = args.manifest.parent
    updated = []
    for i, rec in enumerate(records):
        if "classes" in rec:
            updated.append(rec)
            continue
        image_path = (base / rec["image_path"]).resolve()
        mask = segment(read_image(image_path), params)
        sid = str(rec.get("sample_id", i))
        mask_rel = f"masks/{sid}.png"
        write_mask(out / mask_rel, mask)
        updated.append({**rec, "image_path": str(image_path), "mask_path": mask_rel})
    write_jsonl(out / "manifest.jsonl", updated)
    print(out / "manifest.jsonl")


def cmd_budget(args, cfg):
    ds = _dataset(args, cfg)
    budget = compute_budget(ds, cfg.gamma)
    data = budget.to_dict()
    data["class_ids"] = list(ds.class_ids)
    write_json(_out(args) / "budget.json", data)
    print(json.dumps(data, indent=2))


def cmd_pretrain_codec(args, cfg):
    ds = _dataset(args, cfg)
    st = ds.stack()
    codec = diffusion.pretrain_codec(
        torch.cat([st["image"], st["background"]]), cfg.codec_steps, cfg.codec_lr, cfg.batch_size, cfg.codec_width,
        cfg.latent_channels, cfg.latent_downscale_factor, stage_seed(cfg.rng_seed, STANDALONE_FOLD, "codec"),
    )
    path = _out(args) / "codec.pt"
    diffusion.save_codec(path, codec)
    print(f"{path} reconstruction mse {diffusion.reconstruction_error(codec, st['image']):.6f}")


def cmd_weights(args, cfg):
    ds = _dataset(args, cfg)
    scorer = train_scorers(
        ds, cfg.scorer_steps, cfg.scorer_lr, cfg.scorer_latent_dim, stage_seed(cfg.rng_seed, STANDALONE_FOLD, "scorers")
    )
    table = build_weight_table(ds, scorer, cfg.standardize_scores)
    out = _out(args)
    rows = [{**r, "class": ds.class_ids[r["class"]]} for r in table.rows(ds)]
    write_jsonl(out / "weights.jsonl", rows)
    save_container(out / "scorers.pt", "scorers", {"class_ids": list(ds.class_ids), "state": scorer.state()})
    print(out / "weights.jsonl")


def _load_scorer(path: Path) -> tuple[AnomalyScorer, list[int]]:
    payload = load_container(path, "scorers")
    return AnomalyScorer.from_state(payload["state"]), list(payload["class_ids"])


def cmd_finetune(args, cfg):
    ds = _dataset(args, cfg)
    codec = diffusion.load_codec(args.codec)
    index = {cid: k for k, cid in enumerate(ds.class_ids)}
    rows = [{**r, "class": index[r["class"]]} for r in read_jsonl(args.weights)]
    table = weight_table_from_rows(ds, rows)
    multiset = build_finetune_multiset(table, np.random.default_rng(stage_seed(cfg.rng_seed, STANDALONE_FOLD, "oversample")))
    ckpt = diffusion.finetune(ds, multiset, codec, cfg, stage_seed(cfg.rng_seed, STANDALONE_FOLD, "finetune"))
    ckpt.config["class_ids"] = list(ds.class_ids)
    path = _out(args) / "diffusion.pt"
    diffusion.save_checkpoint(path, ckpt)
    print(f"{path} final smoothed loss {ckpt.final_smoothed_loss:.4f}")


def cmd_generate(args, cfg):
    ds = _dataset(args, cfg)
    ckpt = diffusion.load_checkpoint(args.checkpoint)
    if ckpt.config.get("class_ids", list(ds.class_ids)) != list(ds.class_ids):
        raise LesionAugError("checkpoint was trained on a different class set")
    if args.budget:
        raw = json.loads(Path(args.budget).read_text())["per_class_raw"]
        counts = {int(k): int(v) for k, v in raw.items()}
    else:
        counts = {j: args.count for j in range(ds.num_classes)}
    scorer = _load_scorer(args.scorers)[0] if args.scorers else None

    out = _out(args)
    (out / "generated").mkdir(exist_ok=True)
    gen = torch.Generator().manual_seed(stage_seed(cfg.rng_seed, STANDALONE_FOLD, "generate"))
    records: list[dict] = [{"classes": list(ds.class_names) if ds.class_names else list(ds.class_ids)}]
    for j in range(ds.num_classes):
        members = ds.indices_of_class(j)
        n = counts.get(j, 0)
        if n == 0 or not members:
            continue
        src = [members[k % len(members)] for k in range(n)]
        imgs = []
        for start in range(0, n, cfg.generation_batch_size):
            chunk = src[start : start + cfg.generation_batch_size]
            bgs = torch.stack([ds.samples[i].background for i in chunk])
            masks = torch.stack([ds.samples[i].mask for i in chunk])
            imgs.append(diffusion.generate_batch(bgs, masks, torch.full((len(chunk),), j), ckpt, gen))
        imgs = torch.cat(imgs)
        scores = scorer.score(j, imgs) if scorer is not None else [None] * n
        for k, (img, i, score) in enumerate(zip(imgs, src, scores)):
            sid = f"syn-c{ds.class_ids[j]}-{k:05d}"
            write_image(out / "generated" / f"{sid}.png", img)
            write_mask(out / "generated" / f"{sid}_mask.png", ds.samples[i].mask)
            rec = {
                "sample_id": sid, "image_path": f"generated/{sid}.png", "mask_path": f"generated/{sid}_mask.png",
                "label": ds.class_ids[j], "source": "synthetic", "background_id": ds.samples[i].sample_id,
            }
            if score is not None:
                rec["score"] = float(score)
            records.append(rec)
    write_jsonl(out / "generated.jsonl", records)
    print(out / "generated.jsonl")


def cmd_filter(args, cfg):
    records = [r for r in read_jsonl(args.generated) if "classes" not in r]
    base = args.generated.parent.resolve()
    if any("score" not in r for r in records):
        if not args.scorers:
            raise LesionAugError("generated manifest has no scores; pass --scorers")
        scorer, class_ids = _load_scorer(args.scorers)
        index = {cid: k for k, cid in enumerate(class_ids)}
        for r in records:
            r["score"] = float(scorer.score(index[r["label"]], read_image(base / r["image_path"])[None])[0])
    kept_records, report = [], []
    for label in sorted({r["label"] for r in records}):
        group = [r for r in records if r["label"] == label]
        kept, row = filter_class([r["sample_id"] for r in group], [r["score"] for r in group], cfg.gamma, label)
        keep = set(kept)
        kept_records.extend(r for r in group if r["sample_id"] in keep)
        report.append(row.to_dict())
    out = _out(args)
    for r in kept_records:
        for key in ("image_path", "mask_path"):
            r[key] = str(base / r[key])
    write_jsonl(out / "clean.jsonl", kept_records)
    write_json(out / "filter_report.json", report)
    print(json.dumps(report, indent=2))


def cmd_train_classifier(args, cfg):
    ds = _dataset(args, cfg)
    synthetic = []
    for path in args.synthetic or []:
        synthetic.extend(load_aligned_samples(path, ds.class_ids))
    ckpt = train_classifier(
        list(ds.samples), ds.num_classes, cfg.classifier_steps, cfg.classifier_lr, cfg.classifier_batch_size,
        cfg.classifier_width, stage_seed(cfg.rng_seed, STANDALONE_FOLD, "classifier"), synthetic,
    )
    ckpt.config["class_ids"] = list(ds.class_ids)
    path = _out(args) / "classifier.pt"
    save_classifier(path, ckpt)
    print(f"{path} trained on {len(ds)} real + {len(synthetic)} synthetic samples")


def cmd_predict(args, cfg):
    ckpt = load_classifier(args.classifier)
    class_ids = ckpt.config.get("class_ids", list(range(ckpt.num_classes)))
    records = [r for r in read_jsonl(args.manifest) if "classes" not in r]
    base = args.manifest.parent
    images = torch.stack([read_image(base / r["image_path"]) for r in records])
    pred = predict(ckpt, images)
    out_rows: list[dict] = [{"class_ids": class_ids}]
    for r, p in zip(records, pred):
        out_rows.append({"sample_id": str(r.get("sample_id")), "label": r.get("label"), "pred": class_ids[int(p)]})
    path = _out(args) / args.name
    write_jsonl(path, out_rows)
    print(path)


def cmd_evaluate(args, cfg):
    reports = []
    for fold, path in enumerate(args.predictions):
        rows = read_jsonl(path)
        class_ids = rows[0]["class_ids"] if rows and "class_ids" in rows[0] else None
        rows = [r for r in rows if "class_ids" not in r]
        if class_ids is None:
            class_ids = sorted({r["label"] for r in rows} | {r["pred"] for r in rows})
        index = {cid: k for k, cid in enumerate(class_ids)}
        y = [index[r["label"]] for r in rows]
        p = [index[r["pred"]] for r in rows]
        reports.append(evaluate(y, p, len(class_ids), fold))
    data = {"folds": [r.to_dict() for r in reports], "mean": aggregate(reports), "class_ids": class_ids}
    write_json(_out(args) / "evaluation.json", data)
    print(json.dumps(data["mean"], indent=2))


# ---------------------------------------------------------------- pipeline


def _summary(manifest: RunManifest) -> dict:
    return {
        "run_id": manifest.run_id,
        **{v: {k: a[k] for k in ("bma", "macro_f1", "macro_sensitivity", "macro_specificity", "per_class_recall")}
           for v, a in manifest.aggregate.items()},
    }


def cmd_pipeline(args, cfg):
    ds = _dataset(args, cfg)
    out = _out(args)
    cfg.dump(out / "config.yaml")
    if args.mode == "cv":
        manifest, _ = run_cv(ds, cfg, out, not args.no_cache, args.gammas or ())
        print(json.dumps(_summary(manifest), indent=2))
    elif args.mode == "fold":
        cache = StageCache(out / "cache", not args.no_cache)
        result = run_fold(ds, args.fold, cfg, args.gammas or (), cache)
        data = {
            "fold": result.fold,
            "reports": {v: r.to_dict() for v, r in result.reports.items()},
            "sweep": {f"{g:g}": r.to_dict() for g, r in result.sweep.items()},
            "kept_counts": {f"{g:g}": n for g, n in result.kept_counts.items()},
            "filter": [row.to_dict() for row in result.filter_rows],
            "stages": result.stages,
            "leakage_checked": result.leakage_checked,
        }
        write_json(out / f"fold{result.fold}_report.json", data)
        print(json.dumps(data["reports"], indent=2))
    else:
        rows = sweep_gamma(ds, args.gammas or [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], cfg, out, not args.no_cache)
        for row in rows:
            print(f"gamma={row['gamma']:g} bma={row['bma']:.4f} specificity={row['macro_specificity']:.4f} kept={row['kept']}")


def build_parser() -> argparse.ArgumentParser:
    common = _global_parser()
    parser = argparse.ArgumentParser(prog="lesionaug", description="Long-tail lesion augmentation with latent diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, toy=False, data=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if data:
            _add_data_args(p, toy)
        p.set_defaults(func=fn)
        return p

    p = add("make-toy", cmd_make_toy, "write the procedural long-tail toy dataset", data=False)
    p.add_argument("--counts", type=int, nargs="+", default=list(TOY_COUNTS))
    p.add_argument("--toy-seed", type=int, default=0)
    add("segment", cmd_segment, "segment lesions and write mask PNGs")
    add("budget", cmd_budget, "per-class raw and clean synthetic budgets", toy=True)
    add("pretrain-codec", cmd_pretrain_codec, "train and freeze the latent codec", toy=True)
    add("weights", cmd_weights, "train anomaly scorers and emit sampling weights", toy=True)
    p = add("finetune", cmd_finetune, "fine-tune the conditional denoiser", toy=True)
    p.add_argument("--codec", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p = add("generate", cmd_generate, "generate class-conditioned samples", toy=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--count", type=int, default=16, help="samples per class when no budget file is given")
    p.add_argument("--budget", type=Path, help="budget.json from the budget command (uses raw counts)")
    p.add_argument("--scorers", type=Path, help="scorers.pt; attaches anomaly scores to the manifest")
    p = add("filter", cmd_filter, "keep the lowest-scoring fraction gamma per class", data=False)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--scorers", type=Path)
    p = add("train-classifier", cmd_train_classifier, "train the lesion classifier", toy=True)
    p.add_argument("--synthetic", type=Path, nargs="*", help="clean generated manifests to add")
    p = add("predict", cmd_predict, "predict classes for a manifest")
    p.add_argument("--classifier", type=Path, required=True)
    p.add_argument("--name", default="predictions.jsonl")
    p = add("evaluate", cmd_evaluate, "metrics per prediction file plus their mean", data=False)
    p.add_argument("--predictions", type=Path, nargs="+", required=True)
    p = add("pipeline", cmd_pipeline, "end-to-end cross-validation", toy=True)
    p.add_argument("mode", choices=("cv", "fold", "sweep-gamma"))
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--gammas", type=float, nargs="*")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except LesionAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
