"""Geometry-aware test-time consensus over flip views.

Each flip view of the input is predicted independently and mapped back to the
original frame. A view's vote is weighted by how well its own regressed
geometry agrees with the geometry measured from its binarized mask:
w = exp(-lam * (10*|da| + ||dc||)), where da is the area discrepancy and dc
the centroid discrepancy. Views whose regressed area says "nothing there"
while the pixel mask says otherwise are treated as false positives and
dropped from the vote entirely.

With lam = 0 and fp_area_eps = 0 every weight is exactly 1 and the result is
the plain test-time-augmentation mean, so the plain and geometry-aware paths
share this one implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ViewTransform,
    area_centroid,
    map_centroid_between_views,
)

__all__ = [
    "ConsensusConfig",
    "ViewPrediction",
    "DEFAULT_VIEWS",
    "view_weight",
    "collect_views",
    "aggregate_views",
    "infer_consensus",
]

DEFAULT_VIEWS = (
    ViewTransform.IDENTITY,
    ViewTransform.HFLIP,
    ViewTransform.VFLIP,
    ViewTransform.HVFLIP,
)


@dataclass
class ConsensusConfig:
    """Knobs for the view-voting stage.

    lam: disagreement sharpness; 0 reduces to a uniform mean.
    fp_area_eps: regressed-area floor for false-positive suppression; a view
        is dropped when a_reg < fp_area_eps while its pixel-measured area
        exceeds 10 * fp_area_eps. 0 disables suppression.
    binarize_threshold: probability cut used to measure a_px / c_px.
    """

    lam: float = 5.0
    fp_area_eps: float = 1e-3
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.fp_area_eps < 0:
            raise ValueError("fp_area_eps must be >= 0")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must be in (0, 1)")


@dataclass
class ViewPrediction:
    """One view's vote, everything already mapped back to the original frame."""

    transform: ViewTransform
    prob: np.ndarray                    # (H, W) float64 foreground probability
    a_reg: float                        # regressed area fraction
    c_reg: tuple[float, float]          # regressed centroid
    a_px: float = field(init=False, default=0.0)
    c_px: tuple[float, float] = field(init=False, default=(0.5, 0.5))

    def measure(self, threshold: float) -> None:
        mask = (self.prob >= threshold).astype(np.uint8)
        self.a_px, self.c_px = area_centroid(mask)


def view_weight(pred: ViewPrediction, config: ConsensusConfig) -> float:
    """Agreement weight for one view; 0.0 when suppressed as a false positive."""
    eps = config.fp_area_eps
    if eps > 0 and pred.a_reg < eps and pred.a_px > 10 * eps:
        return 0.0
    da = abs(pred.a_reg - pred.a_px)
    dc = math.hypot(pred.c_reg[0] - pred.c_px[0], pred.c_reg[1] - pred.c_px[1])
    return math.exp(-config.lam * (10.0 * da + dc))


def collect_views(predict_fn, image: np.ndarray, views=DEFAULT_VIEWS):
    """Predict every view and map probabilities and centroids back.

    predict_fn takes an (H, W) float image and returns
    (prob_map float64 (H, W), area_fraction, (cx, cy)) in the view's frame.
    """
    if np.asarray(image).ndim != 2:
        raise ValueError("consensus expects a single-channel (H, W) image")
    preds = []
    for view in views:
        prob, a_reg, c_reg = predict_fn(view.apply(image))
        prob = np.asarray(prob, dtype=np.float64)
        if prob.shape != image.shape:
            raise ValueError(
                f"predict_fn returned grid {prob.shape} for input {image.shape}"
            )
        preds.append(
            ViewPrediction(
                transform=view,
                prob=view.inverse.apply(prob),
                a_reg=float(a_reg),
                c_reg=map_centroid_between_views(c_reg, view.inverse),
            )
        )
    return preds


def aggregate_views(
    preds: list[ViewPrediction], config: ConsensusConfig
) -> tuple[np.ndarray, dict]:
    """Weighted mean of the view probability maps plus a diagnostics record.

    All-suppressed batches fall back to the unweighted mean rather than
    dividing by zero. Returns (consensus_prob, diagnostics).
    """
    if not preds:
        raise ValueError("no view predictions to aggregate")
    for p in preds:
        p.measure(config.binarize_threshold)
    weights = [view_weight(p, config) for p in preds]
    total = sum(weights)
    if total <= 0.0:
        weights = [1.0] * len(preds)
        total = float(len(preds))
    acc = np.zeros_like(preds[0].prob)
    for w, p in zip(weights, preds):
        acc += w * p.prob
    final = acc / total
    diagnostics = {
        "views": [
            {
                "transform": p.transform.value,
                "w": w,
                "a_reg": p.a_reg,
                "a_px": p.a_px,
                "c_reg": list(p.c_reg),
                "c_px": list(p.c_px),
            }
            for w, p in zip(weights, preds)
        ],
        "final_area": float(
            (final >= config.binarize_threshold).sum() / final.size
        ),
    }
    return final, diagnostics


def infer_consensus(
    predict_fn, image: np.ndarray, config: ConsensusConfig | None = None
) -> tuple[np.ndarray, dict]:
    """Run the four flip views through predict_fn and fuse the votes."""
    cfg = config if config is not None else ConsensusConfig()
    return aggregate_views(collect_views(predict_fn, image), cfg)
