"""End-to-end orchestration: per-fold stages, cross-validation and gamma sweeps.

Stage order within a fold::

    segment -> pretrain codec -> train scorers -> weights -> finetune diffusion
            -> generate raw budget -> score generated -> filter at gamma
            -> train classifiers (baseline / augmented) -> evaluate on held-out fold

Every training stage sees only the training folds; a runtime guard checks that
no held-out sample id reaches any of them.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import diffusion
from .checkpoint import load_container, save_container
from .classifier import predict, train_classifier
from .config import PipelineConfig
from .datamodel import LabeledSample, LongTailDataset, compute_budget, stratified_kfold
from .errors import LesionAugError, StageError
from .io import hash_json, hash_tensors, write_image, write_json
from .metrics import METRIC_NAMES, EvaluationReport, aggregate, evaluate
from .oodfilter import FilterRow, filter_class
from .seeding import stage_seed
from .selection import AnomalyScorer, build_finetune_multiset, build_weight_table, train_scorers

logger = logging.getLogger(__name__)

VARIANTS = ("baseline", "unfiltered", "augmented")


class LeakageError(AssertionError):
    pass


def assert_no_leakage(test_ids: Iterable[str], stage_inputs: dict[str, Iterable[str]]) -> None:
    test = set(test_ids)
    for stage, ids in stage_inputs.items():
        leaked = test.intersection(ids)
        if leaked:
            raise LeakageError(f"stage '{stage}' consumed {len(leaked)} held-out samples, e.g. {sorted(leaked)[:3]}")


class StageCache:
    """Content-addressed store for stage outputs; ``root=None`` disables caching."""

    def __init__(self, root: str | Path | None, enabled: bool = True):
        self.root = Path(root) if root is not None else None
        self.enabled = enabled and root is not None
        if self.enabled:
            self.root.mkdir(parents=True, exist_ok=True)

    def fetch(self, stage: str, key: str, compute: Callable[[], dict]) -> dict:
        if not self.enabled:
            return compute()
        path = self.root / f"{stage}-{key[:24]}.pt"
        if path.exists():
            logger.info("cache hit: %s", path.name)
            return load_container(path, f"stage:{stage}")
        payload = compute()
        save_container(path, f"stage:{stage}", payload)
        return payload


@dataclass
class GeneratedPool:
    samples: list[LabeledSample]
    scores: np.ndarray
    background_ids: list[str]

    def of_class(self, label: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.label == label]


@dataclass
class FoldResult:
    fold: int
    reports: dict[str, EvaluationReport]
    sweep: dict[float, EvaluationReport] = field(default_factory=dict)
    kept_counts: dict[float, int] = field(default_factory=dict)
    kept_ids: dict[float, list[str]] = field(default_factory=dict)
    filter_rows: list[FilterRow] = field(default_factory=list)
    stages: dict[str, dict[str, str]] = field(default_factory=dict)
    leakage_checked: bool = False
    pool: GeneratedPool | None = None
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    @property
    def baseline(self) -> EvaluationReport:
        return self.reports["baseline"]

    @property
    def augmented(self) -> EvaluationReport:
        return self.reports["augmented"]


def _generate_pool(
    train: LongTailDataset, ckpt: diffusion.DiffusionCheckpoint, cfg: PipelineConfig, fold: int, seed: int
) -> tuple[list[torch.Tensor], list[int], list[str]]:
    """Raw budget per class; backgrounds cycle over same-class training images."""
    budget = compute_budget(train, cfg.gamma)
    jobs = []
    for j in range(train.num_classes):
        members = train.indices_of_class(j)
        for k in range(budget.per_class_raw[j]):
            jobs.append((j, members[k % len(members)]))
    gen = torch.Generator().manual_seed(seed)
    images: list[torch.Tensor] = []
    for start in range(0, len(jobs), cfg.generation_batch_size):
        chunk = jobs[start : start + cfg.generation_batch_size]
        bgs = torch.stack([train.samples[i].background for _, i in chunk])
        masks = torch.stack([train.samples[i].mask for _, i in chunk])
        labels = torch.tensor([j for j, _ in chunk])
        images.extend(diffusion.generate_batch(bgs, masks, labels, ckpt, gen))
    return images, [j for j, _ in jobs], [train.samples[i].sample_id for _, i in jobs]


class FoldRunner:
    """Runs the generative stages of one fold once, then evaluates any number of gammas."""

    def __init__(
        self,
        dataset: LongTailDataset,
        fold: int,
        train_idx: Sequence[int],
        test_idx: Sequence[int],
        cfg: PipelineConfig,
        cache: StageCache | None = None,
    ):
        self.dataset = dataset
        self.fold = fold
        self.cfg = cfg
        self.cache = cache or StageCache(None)
        self.train = dataset.subset(train_idx)
        self.test = dataset.subset(test_idx)
        self.stages: dict[str, dict[str, str]] = {}
        self.stage_inputs: dict[str, set[str]] = {}
        self.pool: GeneratedPool | None = None
        self._reports: dict[tuple[str, ...], EvaluationReport] = {}
        self._clf_hashes: dict[tuple[str, ...], str] = {}

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg.rng_seed, self.fold, stage)

    def _run_stage(self, stage: str, fn: Callable):
        t0 = time.perf_counter()
        try:
            out = fn()
        except LeakageError:
            raise
        except (LesionAugError, ValueError, RuntimeError) as exc:
            raise StageError(stage, self.fold, exc) from exc
        logger.info("fold %d: %s done in %.1fs", self.fold, stage, time.perf_counter() - t0)
        return out

    def prepare(self) -> GeneratedPool:
        cfg, train = self.cfg, self.train
        train_ids = train.sample_ids
        data_hash = hash_tensors(train.stack()) + ":" + hash_json(train_ids)
        cfg_hash = cfg.fingerprint()

        def key(stage: str, *parts: str) -> str:
            return hash_json([stage, self.fold, cfg_hash, data_hash, *parts])

        stacked = train.stack()

        # latent codec
        codec_key = key("codec")

        def _codec() -> dict:
            codec = diffusion.pretrain_codec(
                torch.cat([stacked["image"], stacked["background"]]),
                cfg.codec_steps, cfg.codec_lr, cfg.batch_size, cfg.codec_width, cfg.latent_channels,
                cfg.latent_downscale_factor, self.seed("codec"),
            )
            return {"config": codec.config, "state": codec.state_dict()}

        payload = self._run_stage("pretrain-codec", lambda: self.cache.fetch("codec", codec_key, _codec))
        codec = diffusion.codec_from_payload(payload)
        self.stage_inputs["pretrain-codec"] = set(train_ids)
        self.stages["pretrain-codec"] = {"input": data_hash, "output": hash_tensors(codec.state_dict())}

        # anomaly scorers
        scorer_key = key("scorers")

        def _scorers() -> dict:
            return train_scorers(train, cfg.scorer_steps, cfg.scorer_lr, cfg.scorer_latent_dim, self.seed("scorers")).state()

        scorer = AnomalyScorer.from_state(self._run_stage("train-scorers", lambda: self.cache.fetch("scorers", scorer_key, _scorers)))
        self.scorer = scorer
        self.stage_inputs["train-scorers"] = {sid for ids in scorer.trained_on.values() for sid in ids}
        scorer_hash = hash_tensors({f"{j}.{k}": v for j, m in sorted(scorer.models.items()) for k, v in m.state_dict().items()})
        self.stages["train-scorers"] = {"input": data_hash, "output": scorer_hash}

        # weights + oversampled multiset
        table = self._run_stage("weights", lambda: build_weight_table(train, scorer, cfg.standardize_scores))
        multiset = build_finetune_multiset(table, np.random.default_rng(self.seed("oversample")))
        self.weight_table = table
        self.stage_inputs["weights"] = {train.samples[i].sample_id for i in multiset}
        self.stages["weights"] = {
            "input": scorer_hash,
            "output": hash_json([table.rows(train), multiset.tolist()]),
        }

        # diffusion fine-tuning
        diff_key = key("diffusion", self.stages["pretrain-codec"]["output"], self.stages["weights"]["output"])

        def _diffusion() -> dict:
            ckpt = diffusion.finetune(train, multiset, codec, cfg, self.seed("finetune"))
            return {
                "denoiser": ckpt.denoiser.state_dict(),
                "embedder": ckpt.embedder.state_dict(),
                "final_smoothed_loss": ckpt.final_smoothed_loss,
                "loss_history": ckpt.loss_history,
            }

        payload = self._run_stage("finetune", lambda: self.cache.fetch("diffusion", diff_key, _diffusion))
        denoiser, embedder = diffusion.build_models(cfg, train.num_classes, 0)
        denoiser.load_state_dict(payload["denoiser"])
        embedder.load_state_dict(payload["embedder"])
        ckpt = diffusion.DiffusionCheckpoint(
            denoiser.eval(), embedder.eval(), codec,
            diffusion.build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end),
            cfg.to_dict(), payload["final_smoothed_loss"], payload["loss_history"],
        )
        self.checkpoint = ckpt
        self.stage_inputs["finetune"] = self.stage_inputs["weights"]
        self.stages["finetune"] = {"input": diff_key, "output": hash_tensors(ckpt.parameter_tensors())}

        # generation + scoring of the generated pool
        pool_key = key("pool", self.stages["finetune"]["output"], scorer_hash)

        def _pool() -> dict:
            images, labels, bg_ids = _generate_pool(train, ckpt, cfg, self.fold, self.seed("generate"))
            x = torch.stack(images) if images else torch.zeros(0, *stacked["image"].shape[1:])
            lab = np.asarray(labels, dtype=np.int64)
            scores = np.zeros(len(lab))
            for j in np.unique(lab):
                sel = np.flatnonzero(lab == j)
                scores[sel] = scorer.score(int(j), x[torch.from_numpy(sel)])
            return {"images": x, "labels": torch.from_numpy(lab), "scores": torch.from_numpy(scores), "background_ids": bg_ids}

        payload = self._run_stage("generate", lambda: self.cache.fetch("pool", pool_key, _pool))
        by_id = {s.sample_id: s for s in train.samples}
        samples = []
        for k, (img, lab, bg) in enumerate(zip(payload["images"], payload["labels"].tolist(), payload["background_ids"])):
            mask = by_id[bg].mask
            samples.append(
                LabeledSample(img, lab, mask, by_id[bg].background, f"syn-f{self.fold}-c{lab}-{k:05d}", "synthetic")
            )
        self.pool = GeneratedPool(samples, payload["scores"].numpy(), list(payload["background_ids"]))
        self.stage_inputs["generate"] = set(self.pool.background_ids)
        self.stages["generate"] = {
            "input": pool_key,
            "output": hash_tensors({"images": payload["images"], "scores": payload["scores"]}),
        }
        return self.pool

    def filter(self, gamma: float) -> tuple[list[LabeledSample], list[FilterRow]]:
        assert self.pool is not None, "prepare() first"
        kept_samples, rows = [], []
        for j in range(self.train.num_classes):
            pos = self.pool.of_class(j)
            if not pos:
                continue
            ids = [self.pool.samples[i].sample_id for i in pos]
            kept, row = filter_class(ids, self.pool.scores[pos], gamma, j)
            kept_set = set(kept)
            kept_samples.extend(self.pool.samples[i] for i in pos if self.pool.samples[i].sample_id in kept_set)
            rows.append(row)
        return kept_samples, rows

    def evaluate_with(self, synthetic: Sequence[LabeledSample]) -> EvaluationReport:
        key = tuple(s.sample_id for s in synthetic)
        if key not in self._reports:
            cfg = self.cfg
            real = list(self.train.samples)
            self.stage_inputs.setdefault("classifier", set()).update(s.sample_id for s in real)
            ckpt = train_classifier(
                real, self.train.num_classes, cfg.classifier_steps, cfg.classifier_lr, cfg.classifier_batch_size,
                cfg.classifier_width, self.seed("classifier"), synthetic,
            )
            test = self.test.stack()
            pred = predict(ckpt, test["image"])
            self._reports[key] = evaluate(test["label"].numpy(), pred, self.train.num_classes, self.fold)
            self._clf_hashes[key] = hash_tensors(ckpt.model.state_dict())
        return self._reports[key]

    def check_leakage(self) -> None:
        assert_no_leakage(self.test.sample_ids, self.stage_inputs)

    def run(self, gammas: Sequence[float] = ()) -> FoldResult:
        self.prepare()
        result = FoldResult(self.fold, {}, train_ids=self.train.sample_ids, test_ids=self.test.sample_ids)
        wanted = sorted({0.0, 1.0, self.cfg.gamma, *map(float, gammas)})
        for gamma in wanted:
            kept, rows = self._run_stage(f"filter@{gamma:g}", lambda g=gamma: self.filter(g))
            report = self._run_stage(f"classify@{gamma:g}", lambda k=kept: self.evaluate_with(k))
            result.sweep[gamma] = report
            result.kept_counts[gamma] = len(kept)
            result.kept_ids[gamma] = [s.sample_id for s in kept]
            if gamma == self.cfg.gamma:
                result.filter_rows = rows
            key = tuple(s.sample_id for s in kept)
            self.stages[f"classifier@{gamma:g}"] = {"input": hash_json(key), "output": self._clf_hashes[key]}
        result.reports = {
            "baseline": self.evaluate_with(()),
            "unfiltered": result.sweep[1.0],
            "augmented": result.sweep[self.cfg.gamma],
        }
        self.check_leakage()
        result.leakage_checked = True
        result.stages = dict(self.stages)
        result.pool = self.pool
        return result


def run_fold(
    dataset: LongTailDataset,
    fold: int,
    cfg: PipelineConfig,
    gammas: Sequence[float] = (),
    cache: StageCache | None = None,
) -> FoldResult:
    """Run one cross-validation round; ``fold`` indexes the held-out fold."""
    folds = stratified_kfold(dataset, cfg.folds, cfg.rng_seed)
    if not 0 <= fold < len(folds):
        raise StageError("fold-split", fold, ValueError(f"fold index must lie in 0..{len(folds) - 1}"))
    train_idx, test_idx = folds[fold]
    return FoldRunner(dataset, fold, train_idx, test_idx, cfg, cache).run(gammas)


@dataclass
class RunManifest:
    run_id: str
    config: dict
    class_ids: list[int]
    folds: list[dict]
    aggregate: dict[str, dict]
    sweep: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "class_ids": self.class_ids,
            "folds": self.folds,
            "aggregate": self.aggregate,
            "sweep": self.sweep,
        }

    def artifact_hashes(self) -> dict[str, dict]:
        return {f"fold{f['fold']}": f["stages"] for f in self.folds}


def aggregate_folds(results: Sequence[FoldResult]) -> dict[str, dict]:
    return {v: aggregate([r.reports[v] for r in results]) for v in VARIANTS}


def sweep_table(results: Sequence[FoldResult]) -> list[dict]:
    """One row per gamma: fold-mean metrics, mean per-class recall and total kept count."""
    gammas = sorted(set.intersection(*(set(r.sweep) for r in results)))
    rows = []
    for g in gammas:
        agg = aggregate([r.sweep[g] for r in results])
        row = {"gamma": g, **{m: agg[m] for m in METRIC_NAMES}, "kept": int(sum(r.kept_counts[g] for r in results))}
        for j, rec in enumerate(agg["per_class_recall"]):
            row[f"recall_c{j}"] = rec
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def sample_grid(real: Sequence[torch.Tensor], synthetic: Sequence[torch.Tensor], per_row: int = 8, scale: int = 4) -> torch.Tensor:
    """Two rows per class (real above synthetic), blank cells where images run out."""
    ref = (real or synthetic)[0]
    c, h, w = ref.shape
    blank = torch.ones(c, h, w)
    rows = []
    for imgs in (real, synthetic):
        cells = list(imgs[:per_row]) + [blank] * (per_row - min(per_row, len(imgs)))
        rows.append(torch.cat(cells, dim=2))
    grid = torch.cat(rows, dim=1)
    return grid.repeat_interleave(scale, 1).repeat_interleave(scale, 2)


def write_outputs(out_dir: Path, manifest: RunManifest, results: Sequence[FoldResult], dataset: LongTailDataset) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "run_manifest.json", manifest.to_dict())
    write_json(out_dir / "aggregate_report.json", manifest.aggregate)
    labels = {"baseline": "baseline (real only)", "unfiltered": "augmented without filtering", "augmented": "augmented"}
    table1 = [
        {"method": labels[v], "BMA": a["bma"], "F1": a["macro_f1"], "sensitivity": a["macro_sensitivity"],
         "specificity": a["macro_specificity"]}
        for v, a in manifest.aggregate.items()
    ]
    _write_csv(out_dir / "table1.csv", table1)
    table2 = []
    for j, cid in enumerate(manifest.class_ids):
        name = dataset.class_names[j] if dataset.class_names else str(cid)
        table2.append({"class": name, **{v: manifest.aggregate[v]["per_class_recall"][j] for v in VARIANTS}})
    _write_csv(out_dir / "table2.csv", table2)
    fold_rows = [
        {"fold": r.fold, "variant": v, **{m: getattr(r.reports[v], m) for m in METRIC_NAMES}}
        for r in results for v in VARIANTS
    ]
    _write_csv(out_dir / "fold_metrics.csv", fold_rows)
    _write_csv(out_dir / "sweep_gamma.csv", manifest.sweep)
    for r in results:
        if r.pool is None:
            continue
        fold_dir = out_dir / f"fold{r.fold}"
        fold_dir.mkdir(exist_ok=True)
        kept = set(r.kept_ids.get(manifest.config["gamma"], []))
        by_id = {s.sample_id: s for s in dataset.samples}
        for j in range(dataset.num_classes):
            real = [by_id[i].image for i in r.train_ids if by_id[i].label == j]
            syn = [s.image for s in r.pool.samples if s.label == j and s.sample_id in kept]
            if real or syn:
                write_image(fold_dir / f"grid_class{j}.png", sample_grid(real, syn))
        _write_csv(fold_dir / "filter_report.csv", [row.to_dict() for row in r.filter_rows])


def run_cv(
    dataset: LongTailDataset,
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    use_cache: bool = True,
    gammas: Sequence[float] = (),
    keep_pools: bool = False,
) -> tuple[RunManifest, list[FoldResult]]:
    """k-fold cross-validation of baseline vs augmented classifiers."""
    folds = stratified_kfold(dataset, cfg.folds, cfg.rng_seed)
    cache = StageCache(Path(out_dir) / "cache" if out_dir is not None else None, use_cache)
    results = []
    for fold, (train_idx, test_idx) in enumerate(folds):
        logger.info("fold %d/%d", fold + 1, len(folds))
        results.append(FoldRunner(dataset, fold, train_idx, test_idx, cfg, cache).run(gammas))
    agg = aggregate_folds(results)
    fold_entries = [
        {
            "fold": r.fold,
            "test_ids": r.test_ids,
            "stages": r.stages,
            "reports": {v: rep.to_dict() for v, rep in r.reports.items()},
            "filter": [row.to_dict() for row in r.filter_rows],
            "kept_counts": {f"{g:g}": n for g, n in r.kept_counts.items()},
            "leakage_checked": r.leakage_checked,
        }
        for r in results
    ]
    data_hash = hash_json(dataset.sample_ids)
    manifest = RunManifest(
        run_id=hash_json([cfg.to_dict(), data_hash])[:16],
        config=cfg.to_dict(),
        class_ids=list(dataset.class_ids),
        folds=fold_entries,
        aggregate=agg,
        sweep=sweep_table(results) if gammas else [],
    )
    if out_dir is not None:
        write_outputs(Path(out_dir), manifest, results, dataset)
    if not keep_pools:
        for r in results:
            r.pool = None
    return manifest, results


def sweep_gamma(
    dataset: LongTailDataset,
    gammas: Sequence[float],
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    use_cache: bool = True,
) -> list[dict]:
    """Metric curves over gamma; each fold's pool is generated once and re-filtered per gamma."""
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise StageError("sweep-gamma", None, ValueError(f"gamma {g} outside [0, 1]"))
    manifest, _ = run_cv(dataset, cfg, out_dir, use_cache, gammas)
    wanted = {float(g) for g in gammas}
    return [row for row in manifest.sweep if row["gamma"] in wanted]
