"""Two-pass training protocol, optimizer, evaluation, and cross-validation.

Every optimizer step runs two backward passes. The first differentiates each
sample's ground-truth logit to score pixel contributions; its parameter
gradients are explicitly zeroed, and only the detached contribution maps
survive into the second pass, which forwards the three region views and
optimizes the weighted sum of the classification, consistency, and alignment
losses. Inference is a single forward on the global image.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import frl, mca
from .autodiff import Graph, Tensor
from .data import Sample, augment, kfold_split
from .metrics import MetricsReport, aggregate_reports, compute_report
from .model import (
    Model,
    ModelConfig,
    config_from_json,
    config_to_json,
    load_checkpoint,
    model_from_tensors,
    model_to_tensors,
    save_checkpoint,
)

ABLATIONS = ("full", "no_frl", "no_mca", "baseline")

LOSS_CURVE_COLUMNS = ("step", "total", "cls", "frl", "mca", "lr")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 4
    lambda_frl: float = 0.2
    lambda_mca: float = 0.2
    temperature: float = 0.07
    threshold: float = 0.5
    proj_dim: int = 32
    ablation: str = "full"
    folds: int = 5
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lambda_frl < 0 or self.lambda_mca < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2, got {self.batch_size}")
        if self.epochs < 1 or self.folds < 1:
            raise ValueError("epochs and folds must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation {self.ablation!r} not one of {ABLATIONS}")

    @property
    def uses_regions(self) -> bool:
        return self.ablation in ("full", "no_mca")

    @property
    def uses_mca(self) -> bool:
        return self.ablation in ("full", "no_frl")


def derive_seed(*keys) -> int:
    """Stable child seed from a tuple of ints/strings."""
    ints = [int.from_bytes(str(k).encode(), "little") % (2**32) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return float(lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))


class AdamW:
    """Decoupled weight decay, bias-corrected moments."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Trainer:
    """Owns a model (and projectors when alignment is on) plus its optimizer."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, seed: Optional[int] = None):
        seed = cfg.seed if seed is None else seed
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.model = Model.init(model_cfg, seed=derive_seed(seed, "model"))
        self.projectors = (
            mca.Projectors.init(model_cfg.embed_dim, cfg.proj_dim, seed=derive_seed(seed, "proj"))
            if cfg.uses_mca
            else None
        )
        params = self.model.parameters()
        if self.projectors is not None:
            params = params + self.projectors.parameters()
        self.optimizer = AdamW(
            params,
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
        )
        self.rng = np.random.default_rng(derive_seed(seed, "data"))
        self.total_steps = 0  # set by fit()

    # -- one optimizer step ---------------------------------------------------

    def train_step(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        panels: Optional[list],
        step_index: int,
    ) -> dict:
        """Run both passes on one batch and apply the optimizer.

        Returns the loss breakdown {total, cls, frl, mca, lr}; the reported
        total is cls + lambda_frl * frl + lambda_mca * mca by construction.
        """
        cfg = self.cfg
        b = len(labels)
        if b < 2:
            raise ValueError(f"training batch must have >= 2 samples, got {b}")
        if cfg.uses_mca and (panels is None or any(p is None for p in panels)):
            raise ValueError("alignment is enabled but the batch has no biomarker panels")
        total_steps = self.total_steps or step_index + 1
        lr = cosine_lr(step_index, total_steps, cfg.lr)
        bg = self.model_cfg.background_class

        # pass 1: contribution maps under the ground-truth class; parameter
        # gradients from this pass are discarded before the optimizer sees them
        if cfg.uses_regions:
            cmaps = frl.contribution_maps_batch(self.model, images, labels)
            self.model.zero_grad()
            masks = [
                frl.patch_mask(c.scores, self.model_cfg.patch_size, cfg.threshold)
                for c in cmaps
            ]
            triplets = [frl.split_regions(images[i], masks[i]) for i in range(b)]
            stacked = np.concatenate(
                [
                    np.stack([t.x_glb for t in triplets]),
                    np.stack([t.x_pos for t in triplets]),
                    np.stack([t.x_neg for t in triplets]),
                ]
            )

        # pass 2: the actual optimization objective
        graph = Graph()
        frl_term = mca_term = None
        with graph:
            if cfg.uses_regions:
                cache = self.model.forward(stacked)
                rows = lambda t, lo, hi: ad.slice_(t, slice(lo, hi))
                lg, lp, ln_ = (rows(cache.logits, i * b, (i + 1) * b) for i in range(3))
                vg, vp, vn = (rows(cache.pooled, i * b, (i + 1) * b) for i in range(3))
                cls_term = frl.classification_loss(lg, lp, ln_, labels, bg)
                frl_term = frl.consistency_loss(vg, vp, vn, cfg.temperature)
                if cfg.ablation == "full":
                    feats, view_labels = mca.assemble_views(vg, vp, vn, panels)
                    mca_term = mca.mca_total_loss(
                        feats, view_labels, self.projectors, cfg.temperature
                    )
            else:
                cache = self.model.forward(np.asarray(images, np.float32))
                cls_term = ad.cross_entropy(cache.logits, labels)
                if cfg.ablation == "no_frl":
                    mca_term = mca.mca_total_loss(
                        cache.pooled,
                        mca.view_labels_glb_only(panels),
                        self.projectors,
                        cfg.temperature,
                    )
            total = cls_term
            if frl_term is not None:
                total = total + frl_term * cfg.lambda_frl
            if mca_term is not None:
                total = total + mca_term * cfg.lambda_mca
            ad.backward(total, graph)

        self.optimizer.step(lr=lr)
        self.model.zero_grad()
        if self.projectors is not None:
            self.projectors.zero_grad()

        cls_v = float(cls_term.item())
        frl_v = float(frl_term.item()) if frl_term is not None else 0.0
        mca_v = float(mca_term.item()) if mca_term is not None else 0.0
        return {
            "total": cls_v + cfg.lambda_frl * frl_v + cfg.lambda_mca * mca_v,
            "cls": cls_v,
            "frl": frl_v,
            "mca": mca_v,
            "lr": lr,
        }

    # -- epoch loop -------------------------------------------------------------

    def fit(self, samples: list[Sample]) -> list[dict]:
        cfg = self.cfg
        n = len(samples)
        if n < 2:
            raise ValueError(f"need at least 2 training samples, got {n}")
        per_epoch = n // cfg.batch_size + (1 if n % cfg.batch_size >= 2 else 0)
        self.total_steps = cfg.epochs * per_epoch
        history: list[dict] = []
        step = 0
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                if len(idx) < 2:
                    continue  # a singleton tail cannot form a contrastive batch
                images, labels, panels = self._make_batch([samples[i] for i in idx])
                row = self.train_step(images, labels, panels, step)
                row["step"] = step
                history.append(row)
                step += 1
        return history

    def _make_batch(self, batch: list[Sample]):
        imgs = []
        for s in batch:
            img = s.image
            if self.cfg.augment:
                img, _ = augment(img, self.rng)
            imgs.append(img)
        images = np.stack(imgs).astype(np.float32)
        labels = np.array([s.grade for s in batch], np.int64)
        panels = [s.panel for s in batch]
        return images, labels, panels


# ---------------------------------------------------------------------------
# inference and evaluation: a single forward on the global image, grade
# probabilities renormalized over the non-background classes


def predict_scores(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images, np.float32)
    k = model.config.num_grades
    out = np.empty((len(images), k), np.float64)
    for lo in range(0, len(images), batch_size):
        logits = model.forward(images[lo : lo + batch_size]).logits.data.astype(np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        grade = probs[:, :k]
        out[lo : lo + len(grade)] = grade / grade.sum(axis=1, keepdims=True)
    return out


def evaluate(model: Model, samples: list[Sample]) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    images = np.stack([s.image for s in samples])
    y_true = np.array([s.grade for s in samples], np.int64)
    return compute_report(y_true, predict_scores(model, images))


def localization_iou(model: Model, samples: list[Sample], threshold: float = 0.5) -> float:
    """Mean IoU of the thresholded contribution map (predicted class) against
    the ground-truth focus mask, over samples that have a planted region."""
    eligible = [s for s in samples if s.grade > 0 and s.focus_mask is not None]
    if not eligible:
        raise ValueError("no graded samples with focus masks to score")
    scores = predict_scores(model, np.stack([s.image for s in eligible]))
    preds = scores.argmax(axis=1)
    ious = []
    for s, pred in zip(eligible, preds):
        cam = frl.contribution_map(model, s.image, int(pred))
        hit = cam.scores > threshold
        union = np.logical_or(hit, s.focus_mask).sum()
        inter = np.logical_and(hit, s.focus_mask).sum()
        ious.append(inter / union if union else 0.0)
    return float(np.mean(ious))


# ---------------------------------------------------------------------------
# cross-validation and run artifacts


@dataclass
class FoldResult:
    fold: int
    trainer: Trainer
    train_samples: list[Sample]
    test_samples: list[Sample]
    report: MetricsReport
    history: list[dict]


def single_holdout(samples: list[Sample], seed: int):
    """One patient-stratified 80/20 split (first fold of a 5-fold deal)."""
    return kfold_split(samples, k=5, seed=seed)[0]


def cross_validate(
    samples: list[Sample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    log=None,
) -> tuple[list[FoldResult], dict]:
    """Train one fresh model per fold and aggregate test metrics.

    With cfg.folds == 1 a single 80/20 patient split is used instead of the
    full rotation. When out_dir is given, loss curves, per-fold checkpoints,
    the resolved config, and metrics land there.
    """
    if cfg.folds == 1:
        folds = [single_holdout(samples, cfg.seed)]
    else:
        folds = kfold_split(samples, cfg.folds, cfg.seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_config_json(os.path.join(out_dir, "config.json"), model_cfg, cfg)

    results: list[FoldResult] = []
    for i, (train_s, test_s) in enumerate(folds):
        trainer = Trainer(model_cfg, cfg, seed=derive_seed(cfg.seed, "fold", i))
        history = trainer.fit(train_s)
        report = evaluate(trainer.model, test_s)
        results.append(FoldResult(i, trainer, train_s, test_s, report, history))
        if log:
            log(f"fold {i}: {report}")
        if out_dir:
            write_loss_curve(os.path.join(out_dir, f"loss_curve_fold{i}.csv"), history)
            save_trainer_checkpoint(os.path.join(out_dir, f"fold{i}.ckpt"), trainer)
    aggregate = aggregate_reports([r.report for r in results])
    if out_dir:
        write_metrics_json(os.path.join(out_dir, "metrics.json"), results, aggregate)
    return results, aggregate


def write_config_json(path, model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    with open(path, "w") as f:
        json.dump({"model": config_to_json(model_cfg), "train": asdict(cfg)}, f, indent=2)


def write_loss_curve(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CURVE_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in LOSS_CURVE_COLUMNS])


def write_metrics_json(path, results: list[FoldResult], aggregate: dict) -> None:
    payload = {
        "folds": [{"fold": r.fold, **r.report.as_dict()} for r in results],
        "aggregate": aggregate,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def save_trainer_checkpoint(path, trainer: Trainer) -> None:
    config = {
        "model": config_to_json(trainer.model_cfg),
        "train": asdict(trainer.cfg),
    }
    tensors = model_to_tensors(trainer.model)
    if trainer.projectors is not None:
        tensors.update({f"proj.{k}": v.data for k, v in trainer.projectors.params.items()})
    save_checkpoint(path, config, tensors)


def load_trainer_checkpoint(path) -> tuple[Model, Optional[mca.Projectors], dict]:
    config, tensors = load_checkpoint(path)
    model_cfg = config_from_json(config["model"])
    model = model_from_tensors(model_cfg, tensors)
    projectors = None
    proj_params = {k[len("proj.") :]: v for k, v in tensors.items() if k.startswith("proj.")}
    if proj_params:
        proj_dim = int(config.get("train", {}).get("proj_dim", 32))
        projectors = mca.Projectors(
            {k: Tensor(np.asarray(v, np.float32), requires_grad=True) for k, v in proj_params.items()},
            model_cfg.embed_dim,
            proj_dim,
        )
    return model, projectors, config
