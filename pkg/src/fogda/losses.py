"""The loss stack: detection, transmission-based domain adaptation, depth
estimation, transmission/depth consistency, reconstruction, and the weighted
total. All losses return taped scalars so one backward covers everything.

Squared-norm terms use mean reduction throughout, keeping magnitudes
comparable across map sizes so the default weights stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import encode_box
from .tensor import (
    Tensor,
    add,
    bce_with_logits,
    gather_cells,
    log,
    mse,
    normalize_minmax,
    reshape,
    scale,
    smooth_l1,
    softmax_cross_entropy,
)


@dataclass
class LossWeights:
    """Weights (lambda, a, b, c) for the da/depth/consistency/reconstruction
    terms; detection and pseudo-label detection enter unweighted."""

    lam: float = 0.1
    a: float = 10.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("lam", "a", "b", "c"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBundle:
    det: Tensor
    da: Tensor
    depth: Tensor
    cst: Tensor
    rec: Tensor
    det_pl: Tensor
    total: Tensor

    def values(self) -> dict:
        return {name: float(getattr(self, name).data)
                for name in ("det", "da", "depth", "cst", "rec", "det_pl", "total")}


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def _as_chw(x: Tensor) -> Tensor:
    """Drop a leading batch axis of size 1 if present."""
    if x.data.ndim == 4 and x.data.shape[0] == 1:
        return reshape(x, x.data.shape[1:])
    return x


def _as_map(x: Tensor) -> Tensor:
    """Squeeze (1, 1, G, G) or (1, G, G) head output down to (G, G)."""
    shape = x.data.shape
    while len(shape) > 2 and shape[0] == 1:
        shape = shape[1:]
    if len(shape) != 2:
        raise ValueError(f"expected a 2-d map, got shape {x.data.shape}")
    return reshape(x, shape)


def resize_to_feature(values: np.ndarray, target_hw) -> np.ndarray:
    """Non-overlapping block average of a full-resolution map."""
    v = np.asarray(values, dtype=np.float64)
    th, tw = int(target_hw[0]), int(target_hw[1])
    if v.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {v.shape}")
    h, w = v.shape
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ValueError(f"map size {h}x{w} not divisible into {th}x{tw} blocks")
    return v.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3))


def assign_cells(labels, image_size: int, grid: int):
    """Map labels to grid cells, first label winning a contested cell.

    Returns (rows, cols, class_ids, encoded_deltas) for the assigned labels.
    """
    taken = {}
    for lab in labels:
        row, col, deltas = encode_box(lab.box, image_size, grid)
        if (row, col) not in taken:
            taken[(row, col)] = (lab.class_id, deltas)
    rows = np.array([rc[0] for rc in taken], dtype=np.int64)
    cols = np.array([rc[1] for rc in taken], dtype=np.int64)
    classes = np.array([v[0] for v in taken.values()], dtype=np.int64)
    deltas = (np.stack([v[1] for v in taken.values()])
              if taken else np.zeros((0, 4)))
    return rows, cols, classes, deltas


def detection_loss(raw, labels, image_size: int):
    """Three-term detection loss on the grid head.

    Returns (l_rpn, l_cls, l_bbox, total): balanced binary cross-entropy on
    objectness, softmax cross-entropy and smooth-L1 on the labeled cells.
    Object cells are outnumbered roughly 1:8 on this grid, so the objectness
    term averages the positive and background cells separately and weights
    the halves equally; a plain mean leaves the positive logits crawling for
    thousands of iterations. With no labels the objectness term falls back
    to the plain mean and the other two are exactly zero.
    """
    grid = raw.objectness.data.shape[0]
    rows, cols, classes, deltas = assign_cells(labels or [], image_size, grid)

    if len(rows) == 0:
        l_rpn = bce_with_logits(raw.objectness, Tensor(np.zeros((grid, grid))))
    else:
        mask = np.zeros((grid, grid), dtype=bool)
        mask[rows, cols] = True
        neg_r, neg_c = np.nonzero(~mask)
        obj_chw = reshape(raw.objectness, (1, grid, grid))
        pos = bce_with_logits(gather_cells(obj_chw, rows, cols),
                              Tensor(np.ones((len(rows), 1))))
        neg = bce_with_logits(gather_cells(obj_chw, neg_r, neg_c),
                              Tensor(np.zeros((len(neg_r), 1))))
        l_rpn = scale(add(pos, neg), 0.5)

    if len(rows) == 0:
        l_cls = _zero()
        l_bbox = _zero()
    else:
        cell_logits = gather_cells(raw.class_logits, rows, cols)
        l_cls = softmax_cross_entropy(cell_logits, classes)
        cell_deltas = gather_cells(raw.box_deltas, rows, cols)
        l_bbox = smooth_l1(cell_deltas, Tensor(deltas))
    return l_rpn, l_cls, l_bbox, add(add(l_rpn, l_cls), l_bbox)


def da_loss(src_pred: Tensor, tgt_pred: Tensor, t_gt_resized) -> Tensor:
    """Discriminator target: blank map for source, transmission for target."""
    src = _as_map(src_pred)
    tgt = _as_map(tgt_pred)
    t = np.asarray(t_gt_resized, dtype=np.float64)
    if tgt.data.shape != t.shape:
        raise ValueError(f"transmission shape {t.shape} does not match "
                         f"prediction shape {tgt.data.shape}")
    src_term = mse(src, Tensor(np.zeros(src.data.shape)))
    tgt_term = mse(tgt, Tensor(t))
    return add(src_term, tgt_term)


def depth_loss(deb_out: Tensor, depth_gt, d_max: float = 1.0) -> Tensor:
    """MSE between predicted depth and the pooled, d_max-scaled ground truth.

    Source samples only; the caller enforces the domain rule.
    """
    pred = _as_map(deb_out)
    gt = np.asarray(depth_gt, dtype=np.float64)
    if gt.shape != pred.data.shape:
        gt = resize_to_feature(gt, pred.data.shape)
    if d_max <= 0:
        raise ValueError(f"d_max must be > 0, got {d_max}")
    return mse(pred, Tensor(gt / d_max))


def consistency_loss(tgt_trans_pred: Tensor, tgt_deb_out: Tensor) -> Tensor:
    """MSE between Norm(-log t_pred) and Norm(depth_pred) on target samples.

    The log is floored so a zero transmission stays finite; min-max
    normalization cancels any uniform attenuation factor.
    """
    trans = _as_map(tgt_trans_pred)
    deb = _as_map(tgt_deb_out)
    neg_log_t = scale(log(trans), -1.0)
    return mse(normalize_minmax(neg_log_t), normalize_minmax(deb))


def reconstruction_loss(recon: Tensor, i_de) -> Tensor:
    """MSE between the decoder output and the defogged target image."""
    rec = _as_chw(recon)
    target = np.asarray(i_de, dtype=np.float64)
    if rec.data.shape != target.shape:
        raise ValueError(f"reconstruction shape {rec.data.shape} does not match "
                         f"target shape {target.shape}")
    return mse(rec, Tensor(target))


def total_loss(det: Tensor, da: Tensor, depth: Tensor, cst: Tensor, rec: Tensor,
               det_pl: Tensor, weights: LossWeights | None = None) -> Tensor:
    """det + lambda*da + a*depth + b*cst + c*rec + det_pl."""
    w = weights or LossWeights()
    out = add(det, scale(da, w.lam))
    out = add(out, scale(depth, w.a))
    out = add(out, scale(cst, w.b))
    out = add(out, scale(rec, w.c))
    return add(out, det_pl)


def bundle(det=None, da=None, depth=None, cst=None, rec=None, det_pl=None,
           weights: LossWeights | None = None) -> LossBundle:
    """Assemble a LossBundle, treating absent components as zero."""
    det = det if det is not None else _zero()
    da = da if da is not None else _zero()
    depth = depth if depth is not None else _zero()
    cst = cst if cst is not None else _zero()
    rec = rec if rec is not None else _zero()
    det_pl = det_pl if det_pl is not None else _zero()
    total = total_loss(det, da, depth, cst, rec, det_pl, weights)
    return LossBundle(det=det, da=da, depth=depth, cst=cst, rec=rec,
                      det_pl=det_pl, total=total)
