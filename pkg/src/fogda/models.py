"""Network components: backbone, grid detection head, transmission-predicting
discriminator behind a gradient-reversal layer, depth estimation block, and
reconstruction decoder, plus box encoding/decoding, NMS, and checkpoints.

Parameters live in a flat name -> float64 array mapping with a canonical
insertion order. Forward functions take a mapping of name -> Tensor, produced
by `bind` (taped leaves, for training) or `bind_const` (plain constants, for
inference), so one parameter set can serve several forwards on one tape with
accumulated gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import (
    Tape,
    Tensor,
    conv2d,
    grl,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    upsample2x,
)

GRID = 4
IMAGE_SIZE = 64
IMAGE_CHANNELS = 3
OFFSET_EPS = 1e-4

# (name, in_ch, out_ch, kernel, stride, pad) per layer, channel plan per head
_BACKBONE_PLAN = [
    ("backbone.conv0", IMAGE_CHANNELS, 16, 3, 2, 1),
    ("backbone.conv1", 16, 32, 3, 2, 1),
    ("backbone.conv2", 32, 64, 3, 2, 1),
    ("backbone.conv3", 64, 64, 3, 2, 1),
]
_DISC_PLAN = [
    ("disc.conv0", 64, 32, 3, 1, 1),
    ("disc.conv1", 32, 16, 3, 1, 1),
    ("disc.conv2", 16, 1, 1, 1, 0),
]
_DEB_PLAN = [
    ("deb.conv0", 64, 32, 3, 1, 1),
    ("deb.conv1", 32, 1, 1, 1, 0),
]
_DECODER_PLAN = [
    ("decoder.conv0", 64, 32, 3, 1, 1),
    ("decoder.conv1", 32, 16, 3, 1, 1),
    ("decoder.conv2", 16, 8, 3, 1, 1),
    ("decoder.conv3", 8, IMAGE_CHANNELS, 3, 1, 1),
]


def _det_plan(num_classes: int):
    return [
        ("det.conv0", 64, 64, 3, 1, 1),
        ("det.conv1", 64, 1 + num_classes + 4, 1, 1, 0),
    ]


def _full_plan(num_classes: int):
    return _BACKBONE_PLAN + _det_plan(num_classes) + _DISC_PLAN + _DEB_PLAN + _DECODER_PLAN


class ModelParams:
    """Flat named parameter store with a canonical order."""

    def __init__(self, arrays: dict, num_classes: int, image_size: int = IMAGE_SIZE):
        self.arrays = arrays
        self.num_classes = int(num_classes)
        self.image_size = int(image_size)
        expected = self._expected_shapes(num_classes)
        if list(arrays) != list(expected):
            raise ValueError("parameter names do not match the canonical plan")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ValueError(
                    f"parameter {name!r} has shape {arrays[name].shape}, expected {shape}")

    @staticmethod
    def _expected_shapes(num_classes: int) -> dict:
        shapes = {}
        for name, cin, cout, k, _s, _p in _full_plan(num_classes):
            shapes[f"{name}.w"] = (cout, cin, k, k)
            shapes[f"{name}.b"] = (cout,)
        return shapes

    @classmethod
    def init(cls, num_classes: int, seed: int, image_size: int = IMAGE_SIZE) -> "ModelParams":
        """Kaiming-style fan-in init for weights, zero biases, seeded.

        Two biases start off-zero: the final depth layer at 0.5 (mid-range
        normalized depth) so its ReLU output starts alive instead of mostly
        clamped at zero, and the objectness channel at the logit of a rough
        positive-cell prior so background cells start near their target and
        early gradients go into the positives.
        """
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF06]))
        arrays = {}
        for name, cin, cout, k, _s, _p in _full_plan(num_classes):
            fan_in = cin * k * k
            arrays[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
            arrays[f"{name}.b"] = np.zeros(cout)
        arrays["deb.conv1.b"] = np.full(1, 0.5)
        arrays["det.conv1.b"][0] = _logit(0.125)
        return cls(arrays, num_classes, image_size)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()},
                           self.num_classes, self.image_size)

    def names(self) -> list:
        return list(self.arrays)


def bind(params: ModelParams, tape: Tape) -> dict:
    """Register every parameter as a taped leaf; gradients accumulate here."""
    return {name: tape.tensor(arr) for name, arr in params.arrays.items()}


def bind_const(params: ModelParams) -> dict:
    """Wrap parameters as constants for inference (no tape, no gradients)."""
    return {name: Tensor(arr) for name, arr in params.arrays.items()}


def _run_plan(p: Mapping, plan, x: Tensor, relu_last: bool) -> Tensor:
    for i, (name, _cin, _cout, _k, stride, pad) in enumerate(plan):
        x = conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)
        if relu_last or i + 1 < len(plan):
            x = relu(x)
    return x


def backbone_forward(p: Mapping, image, image_size: int = IMAGE_SIZE) -> Tensor:
    """Features F(I): (3, S, S) image -> (1, 64, S/16, S/16) map."""
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.data.shape != (IMAGE_CHANNELS, image_size, image_size):
        raise ValueError(
            f"backbone expects shape {(IMAGE_CHANNELS, image_size, image_size)}, "
            f"got {img.data.shape}")
    x = reshape(img, (1,) + img.data.shape)
    return _run_plan(p, _BACKBONE_PLAN, x, relu_last=True)


@dataclass
class RawGridPrediction:
    """Per-cell detection outputs at feature resolution G x G."""

    objectness: Tensor  # (G, G) logits
    class_logits: Tensor  # (K, G, G)
    box_deltas: Tensor  # (4, G, G): sigmoid-space cx, cy offsets; log w, h


def det_head_forward(p: Mapping, feat: Tensor, num_classes: int) -> RawGridPrediction:
    out = _run_plan(p, _det_plan(num_classes), feat, relu_last=False)
    g = out.data.shape[-1]
    chw = reshape(out, out.data.shape[1:])
    return RawGridPrediction(
        objectness=reshape(slice_channels(chw, 0, 1), (g, g)),
        class_logits=slice_channels(chw, 1, 1 + num_classes),
        box_deltas=slice_channels(chw, 1 + num_classes, 1 + num_classes + 4),
    )


def discriminator_forward(p: Mapping, feat: Tensor, grl_coeff: float = 1.0,
                          use_grl: bool = True) -> Tensor:
    """Predicted transmission map (1, 1, G, G) in (0, 1), behind the GRL."""
    x = grl(feat, grl_coeff) if use_grl else feat
    return sigmoid(_run_plan(p, _DISC_PLAN, x, relu_last=False))


def deb_forward(p: Mapping, feat: Tensor) -> Tensor:
    """Predicted depth map (1, 1, G, G), nonnegative."""
    return relu(_run_plan(p, _DEB_PLAN, feat, relu_last=False))


def decoder_forward(p: Mapping, feat: Tensor) -> Tensor:
    """Reconstructed image (1, 3, S, S) with values in (0, 1)."""
    x = feat
    for i, (name, _cin, _cout, _k, stride, pad) in enumerate(_DECODER_PLAN):
        x = upsample2x(x)
        x = conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)
        if i + 1 < len(_DECODER_PLAN):
            x = relu(x)
    return sigmoid(x)


# ---------------------------------------------------------------------------
# box parameterization
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(z):
    out = np.empty_like(np.asarray(z, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logit(v: float) -> float:
    return float(np.log(v) - np.log1p(-v))


def cell_of_box(box, image_size: int = IMAGE_SIZE, grid: int = GRID) -> tuple:
    """(row, col) of the grid cell containing the box center."""
    x1, y1, x2, y2 = box
    cell = image_size / grid
    col = min(grid - 1, max(0, int((x1 + x2) / 2.0 / cell)))
    row = min(grid - 1, max(0, int((y1 + y2) / 2.0 / cell)))
    return row, col


def encode_box(box, image_size: int = IMAGE_SIZE, grid: int = GRID) -> tuple:
    """Box -> (row, col, deltas[4]): cell plus logit offsets and log sizes."""
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= image_size and 0 <= y1 < y2 <= image_size):
        raise ValueError(f"box {box} out of bounds for image size {image_size}")
    cell = image_size / grid
    row, col = cell_of_box(box, image_size, grid)
    ox = np.clip((x1 + x2) / 2.0 / cell - col, OFFSET_EPS, 1.0 - OFFSET_EPS)
    oy = np.clip((y1 + y2) / 2.0 / cell - row, OFFSET_EPS, 1.0 - OFFSET_EPS)
    deltas = np.array([
        _logit(ox),
        _logit(oy),
        np.log((x2 - x1) / cell),
        np.log((y2 - y1) / cell),
    ])
    return row, col, deltas


def decode_box(row: int, col: int, deltas, image_size: int = IMAGE_SIZE,
               grid: int = GRID) -> tuple:
    """Inverse of encode_box; output clipped to the image."""
    cell = image_size / grid
    tx, ty, tw, th = np.asarray(deltas, dtype=np.float64)
    cx = (col + _sigmoid_np(np.array(tx))) * cell
    cy = (row + _sigmoid_np(np.array(ty))) * cell
    w = np.exp(tw) * cell
    h = np.exp(th) * cell
    x1 = float(np.clip(cx - w / 2.0, 0, image_size))
    x2 = float(np.clip(cx + w / 2.0, 0, image_size))
    y1 = float(np.clip(cy - h / 2.0, 0, image_size))
    y2 = float(np.clip(cy + h / 2.0, 0, image_size))
    return x1, y1, x2, y2


@dataclass
class Detection:
    class_id: int
    box: tuple
    score: float


def box_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(dets, iou_thresh: float):
    """Greedy score-descending suppression, per class."""
    kept = []
    by_class = {}
    for i, d in enumerate(dets):
        by_class.setdefault(d.class_id, []).append((i, d))
    for class_id in sorted(by_class):
        pool = sorted(by_class[class_id], key=lambda item: (-item[1].score, item[0]))
        chosen = []
        for _i, d in pool:
            if all(box_iou(d.box, k.box) <= iou_thresh for k in chosen):
                chosen.append(d)
        kept.extend(chosen)
    kept.sort(key=lambda d: -d.score)
    return kept


def decode_detections(raw: RawGridPrediction, conf_thresh: float, nms_iou: float = 0.5,
                      image_size: int = IMAGE_SIZE):
    """Grid outputs -> thresholded, NMS-filtered Detection list."""
    if not (0.0 <= conf_thresh <= 1.0):
        raise ValueError(f"conf_thresh must be in [0, 1], got {conf_thresh}")
    obj = _sigmoid_np(raw.objectness.data)
    probs = _softmax(raw.class_logits.data, axis=0)
    deltas = raw.box_deltas.data
    grid = obj.shape[0]
    dets = []
    for row in range(grid):
        for col in range(grid):
            p = probs[:, row, col]
            class_id = int(np.argmax(p))
            score = float(obj[row, col] * p[class_id])
            if score < conf_thresh:
                continue
            box = decode_box(row, col, deltas[:, row, col], image_size, grid)
            if box[0] >= box[2] or box[1] >= box[3]:
                continue
            dets.append(Detection(class_id, box, score))
    return nms(dets, nms_iou)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FCKP"


def save_checkpoint(path, params: ModelParams, iteration: int, ema: bool,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 header length, JSON header, f64 payload
    in canonical parameter order."""
    header = {
        "names": params.names(),
        "shapes": {k: list(v.shape) for k, v in params.arrays.items()},
        "dtype": "<f8",
        "iteration": int(iteration),
        "ema": bool(ema),
        "num_classes": params.num_classes,
        "image_size": params.image_size,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in params.names():
            f.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelParams, header dict)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"corrupt checkpoint (bad magic): {path}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise ValueError(f"corrupt checkpoint (truncated header): {path}")
    header = json.loads(raw[8 : 8 + hlen].decode())
    offset = 8 + hlen
    arrays = {}
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"corrupt checkpoint (truncated payload): {path}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"corrupt checkpoint (trailing bytes): {path}")
    params = ModelParams(arrays, header["num_classes"], header["image_size"])
    return params, header
