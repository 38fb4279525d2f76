"""Optimization loop, metrics, and the evaluation paths for all ablations.

The loop is deliberately plain: Adam, cosine-decayed learning rate, a single
numpy generator driving shuffle order and augmentation draws so a seed pins
the whole run, and a JSON-lines metrics log with one train and one val line
per epoch. Inference comes in three flavors: a single forward pass, a plain
four-view flip ensemble, and the geometry-weighted consensus; the latter two
share one implementation and differ only in configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .consensus import DEFAULT_VIEWS, ConsensusConfig, ViewPrediction, aggregate_views
from .data import AugmentConfig, augment
from .dynamic_head import predict_binary
from .geometry import map_centroid_between_views
from .losses import LossWeights, geo_loss, seg_loss, sem_loss, total_loss
from .model import SegmentationModel
from .checkpoint import save_checkpoint

__all__ = [
    "TrainConfig",
    "MetricReport",
    "FitResult",
    "TrainingDivergedError",
    "dice_metric",
    "cosine_lr",
    "collate",
    "compute_losses",
    "train_step",
    "fit",
    "evaluate",
    "append_metrics",
]

INFERENCE_MODES = ("none", "tta", "geometry_aware")


class TrainingDivergedError(RuntimeError):
    """The loss went non-finite; message carries the step and components."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    max_steps: int | None = None
    augment: bool = True
    inference: str = "none"
    adam_beta1: float = 0.9     # optimizer betas/eps: library defaults
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")
        if self.inference not in INFERENCE_MODES:
            raise ValueError(
                f"inference must be one of {INFERENCE_MODES}, got {self.inference!r}"
            )


@dataclass
class MetricReport:
    mean_dice: float
    per_modality: dict[int, float]
    l_seg: float
    l_geo: float
    l_sem: float

    def losses(self) -> dict[str, float]:
        return {"l_seg": self.l_seg, "l_geo": self.l_geo, "l_sem": self.l_sem}


@dataclass
class FitResult:
    history: list[dict]
    best_val_dice: float
    best_epoch: int
    steps_run: int
    final: MetricReport


def dice_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); both-empty counts as a perfect 1.0."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to exactly 0 at step == total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class Batch:
    image: torch.Tensor         # (B, 1, H, W) float32
    mask: torch.Tensor          # (B, H, W) float32 {0,1}
    geo: torch.Tensor           # (B, 13) float32
    sem: torch.Tensor           # (B, 9, text_dim) float32
    sem_enabled: torch.Tensor   # (B,) bool
    modality_ids: list[int]


def collate(samples, text_dim: int) -> Batch:
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image, dtype=np.float32)) for s in samples]
    ).unsqueeze(1)
    masks = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.mask, dtype=np.float32)) for s in samples]
    )
    geo = torch.stack(
        [torch.from_numpy(s.geometry.to_vector().astype(np.float32)) for s in samples]
    )
    sem_rows = []
    flags = []
    for s in samples:
        if s.sem_enabled and s.semantic is not None:
            if s.semantic.shape[-1] != text_dim:
                raise ValueError(
                    f"sample {s.stem!r}: semantic width {s.semantic.shape[-1]} "
                    f"does not match the model's text_dim {text_dim}"
                )
            sem_rows.append(torch.from_numpy(np.ascontiguousarray(s.semantic, dtype=np.float32)))
            flags.append(True)
        else:
            sem_rows.append(torch.zeros(9, text_dim, dtype=torch.float32))
            flags.append(False)
    return Batch(
        image=images,
        mask=masks,
        geo=geo,
        sem=torch.stack(sem_rows),
        sem_enabled=torch.tensor(flags, dtype=torch.bool),
        modality_ids=[int(s.modality_id) for s in samples],
    )


def compute_losses(output, batch: Batch, weights: LossWeights):
    """Loss components for one forward pass; disabled families give exact 0.0."""
    l_seg = seg_loss(output.p_fg, output.p_bg, batch.mask)
    zero = torch.zeros((), dtype=l_seg.dtype)
    l_geo = geo_loss(output.geo_pred, batch.geo) if output.geo_pred is not None else zero
    l_sem = (
        sem_loss(output.sem_proj, batch.sem, batch.sem_enabled)
        if output.sem_proj is not None
        else zero
    )
    return total_loss(l_seg, l_geo, l_sem, weights), l_seg, l_geo, l_sem


def train_step(model: SegmentationModel, batch: Batch, optimizer, weights: LossWeights):
    """One forward/backward/update. Returns float loss components + train dice."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    output = model(batch.image)
    total, l_seg, l_geo, l_sem = compute_losses(output, batch, weights)
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss: total={total.item()} seg={l_seg.item()} "
            f"geo={l_geo.item()} sem={l_sem.item()}"
        )
    total.backward()
    optimizer.step()
    with torch.no_grad():
        pred = output.binary_mask().numpy()
    dice = float(
        np.mean([dice_metric(pred[i], batch.mask[i].numpy() > 0.5) for i in range(len(pred))])
    )
    return {
        "total": float(total.item()),
        "l_seg": float(l_seg.item()),
        "l_geo": float(l_geo.item()),
        "l_sem": float(l_sem.item()),
        "dice": dice,
    }


def _iter_index_batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


def append_metrics(path, epoch: int, split: str, dice: float, losses: dict) -> None:
    """Append one metrics line; the key set and order are part of the format."""
    line = {
        "epoch": int(epoch),
        "split": str(split),
        "dice": float(dice),
        "l_seg": float(losses.get("l_seg", 0.0)),
        "l_geo": float(losses.get("l_geo", 0.0)),
        "l_sem": float(losses.get("l_sem", 0.0)),
    }
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(line) + "\n")


def fit(
    model: SegmentationModel,
    train_set,
    val_set,
    config: TrainConfig,
    out_dir=None,
    augment_config: AugmentConfig | None = None,
) -> FitResult:
    """Train with per-epoch validation; persist the best-dice checkpoint.

    out_dir, when given, receives metrics.jsonl (append-only) and best.ckpt.
    epochs = 0 degenerates to a single validation pass of the initial model.
    A max_steps cap stops mid-epoch but still runs that epoch's validation.
    """
    if len(train_set) == 0 and config.epochs > 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    text_dim = model.config.text_dim
    weights = config.loss_weights
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size) if len(train_set) else 0
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    metrics_path = best_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        best_path = out / "best.ckpt"

    aug_cfg = augment_config if augment_config is not None else AugmentConfig()
    history: list[dict] = []
    best_dice, best_epoch = -1.0, 0
    step = 0

    def run_validation(epoch: int) -> MetricReport:
        report = evaluate(model, val_set, inference="none", batch_size=config.batch_size)
        entry = {"epoch": epoch, "split": "val", "dice": report.mean_dice, **report.losses()}
        history.append(entry)
        if metrics_path is not None:
            append_metrics(metrics_path, epoch, "val", report.mean_dice, report.losses())
        return report

    if config.epochs == 0 or total_steps == 0:
        report = run_validation(0)
        if best_path is not None:
            save_checkpoint(model, best_path)
        return FitResult(history, report.mean_dice, 0, 0, report)

    final_report = None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = {"l_seg": 0.0, "l_geo": 0.0, "l_sem": 0.0, "dice": 0.0}
        n_steps_this_epoch = 0
        for idx in _iter_index_batches(order, config.batch_size):
            samples = [train_set[i] for i in idx]
            if config.augment:
                samples = [augment(s, rng, aug_cfg) for s in samples]
            batch = collate(samples, text_dim)
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(step, total_steps, config.lr)
            stats = train_step(model, batch, optimizer, weights)
            step += 1
            n_steps_this_epoch += 1
            for k in sums:
                sums[k] += stats[k]
            if step >= total_steps:
                break
        means = {k: v / max(n_steps_this_epoch, 1) for k, v in sums.items()}
        history.append({"epoch": epoch, "split": "train", "dice": means["dice"],
                        "l_seg": means["l_seg"], "l_geo": means["l_geo"],
                        "l_sem": means["l_sem"]})
        if metrics_path is not None:
            append_metrics(metrics_path, epoch, "train", means["dice"], means)
        report = run_validation(epoch)
        final_report = report
        if report.mean_dice > best_dice:
            best_dice, best_epoch = report.mean_dice, epoch
            if best_path is not None:
                save_checkpoint(model, best_path)
        if step >= total_steps:
            break

    return FitResult(history, best_dice, best_epoch, step, final_report)


# --------------------------------------------------------------------------
# evaluation


def batched_view_predictions(model, image: np.ndarray) -> list[ViewPrediction]:
    """All four flip views in one forward pass, mapped back to the input frame."""
    stack = np.stack([view.apply(image) for view in DEFAULT_VIEWS])
    x = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32)).unsqueeze(1)
    with torch.no_grad():
        out = model(x)
        p_fg = out.p_fg.double().numpy()
        geo = out.geo_pred.double().numpy() if out.geo_pred is not None else None
    preds = []
    for i, view in enumerate(DEFAULT_VIEWS):
        if geo is not None:
            a_reg = float(geo[i, 0])
            c_view = (float(geo[i, 1]), float(geo[i, 2]))
        else:
            a_reg, c_view = 0.0, (0.5, 0.5)
        preds.append(
            ViewPrediction(
                transform=view,
                prob=view.inverse.apply(p_fg[i]),
                a_reg=a_reg,
                c_reg=map_centroid_between_views(c_view, view.inverse),
            )
        )
    return preds


def evaluate(
    model: SegmentationModel,
    dataset,
    inference: str = "none",
    consensus_config: ConsensusConfig | None = None,
    batch_size: int = 8,
) -> MetricReport:
    """Dice under the chosen inference path plus loss components.

    Loss components always come from the plain batched forward pass so the
    metrics schema is identical across inference modes. "tta" is the consensus
    path with lam = 0 and suppression off; "geometry_aware" is the full
    consensus and requires geometry tokens.
    """
    if inference not in INFERENCE_MODES:
        raise ValueError(f"inference must be one of {INFERENCE_MODES}, got {inference!r}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if inference == "geometry_aware" and not model.config.use_geo_tokens:
        raise ValueError("geometry-aware inference requires geometry tokens")

    if inference == "tta":
        cons_cfg = ConsensusConfig(lam=0.0, fp_area_eps=0.0)
    elif inference == "geometry_aware":
        cons_cfg = consensus_config if consensus_config is not None else ConsensusConfig()
    else:
        cons_cfg = None

    model.eval()
    text_dim = model.config.text_dim
    dices: list[float] = []
    per_mod: dict[int, list[float]] = {}
    loss_sums = {"l_seg": 0.0, "l_geo": 0.0, "l_sem": 0.0}
    n_batches = 0

    indices = list(range(len(dataset)))
    for idx in _iter_index_batches(indices, batch_size):
        samples = [dataset[i] for i in idx]
        batch = collate(samples, text_dim)
        with torch.no_grad():
            output = model(batch.image)
            _, l_seg, l_geo, l_sem = compute_losses(output, batch, LossWeights())
        loss_sums["l_seg"] += float(l_seg.item())
        loss_sums["l_geo"] += float(l_geo.item())
        loss_sums["l_sem"] += float(l_sem.item())
        n_batches += 1

        if cons_cfg is None:
            pred = predict_binary(output.p_fg, output.p_bg).numpy()
            batch_masks = [pred[j] for j in range(len(samples))]
        else:
            batch_masks = []
            for s in samples:
                views = batched_view_predictions(model, np.asarray(s.image, dtype=np.float64))
                final, _ = aggregate_views(views, cons_cfg)
                batch_masks.append((final >= cons_cfg.binarize_threshold).astype(np.uint8))

        for s, pred_mask in zip(samples, batch_masks):
            d = dice_metric(pred_mask, s.mask)
            dices.append(d)
            per_mod.setdefault(int(s.modality_id), []).append(d)

    return MetricReport(
        mean_dice=float(np.mean(dices)),
        per_modality={k: float(np.mean(v)) for k, v in sorted(per_mod.items())},
        l_seg=loss_sums["l_seg"] / n_batches,
        l_geo=loss_sums["l_geo"] / n_batches,
        l_sem=loss_sums["l_sem"] / n_batches,
    )
