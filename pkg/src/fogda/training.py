"""Two-stage-per-iteration adaptive training with an EMA teacher.

Each iteration: stage 1 runs the EMA teacher on the defogged target image
and keeps detections scoring at least tau as pseudo-labels (no gradients
anywhere); stage 2 runs source and raw target through the student on one
tape, combines the detection, adaptation, depth, consistency,
reconstruction, and pseudo-label losses, and applies exactly one SGD step,
followed by the EMA update.

Source images are clear and labeled; target images are foggy and unlabeled.
The target transmission that supervises the discriminator comes from DCP
(or ground truth under the oracle flag), never from sealed annotations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .evaluation import evaluate
from .fog import dcp_defog
from .models import (
    GRID,
    ModelParams,
    backbone_forward,
    bind,
    bind_const,
    deb_forward,
    decode_detections,
    decoder_forward,
    det_head_forward,
    discriminator_forward,
    save_checkpoint,
)
from .tensor import NumericalAbort, Tape, add, backward, scale, sgd_step

CHECKPOINT_DIR = "checkpoints"
LOG_NAME = "log.jsonl"
_SAMPLER_STREAM = 0x5A3
PROTOCOLS = ("da", "source_only")


def protocol_tag(train_protocol: str, split: str) -> str:
    """Report tag for a (training protocol, evaluation split) pair.

    A source-only model tested on clear images is the upper bound, on foggy
    images the lower bound; any adapted model reports as "da".
    """
    if train_protocol == "source_only":
        return "upperbound" if split == "test_clear" else "lowerbound"
    return "da"


@dataclass
class TrainConfig:
    iterations: int = 6000
    lr0: float = 0.002
    tau: float = 0.8
    ema_decay: float = 0.999
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    da: bool = True
    deb: bool = True
    cst: bool = True
    rec: bool = True
    pl: bool = True
    seed: int = 0
    pl_warmup: int = 1000
    batch_size: int = 1
    depth_max: float = 80.0
    oracle_t: bool = False
    oracle_clear: bool = False
    protocol: str = "da"
    checkpoint_every: int = 500
    eval_every: int = 500
    eval_split: str | None = None  # default depends on protocol

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.depth_max <= 0:
            raise ValueError(f"depth_max must be > 0, got {self.depth_max}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")

    def uses_target(self) -> bool:
        return self.da or self.cst or self.rec or self.pl

    def default_eval_split(self) -> str:
        if self.eval_split:
            return self.eval_split
        return "test_clear" if self.protocol == "source_only" else "test_target"

    @classmethod
    def for_protocol(cls, protocol: str, **kw) -> "TrainConfig":
        """source_only turns every adaptation component off."""
        if protocol == "source_only":
            kw.update(da=False, deb=False, cst=False, rec=False, pl=False)
        return cls(protocol=protocol, **kw)


@dataclass
class EmaState:
    shadow: ModelParams
    decay: float


def ema_update(ema: EmaState, params: ModelParams) -> EmaState:
    """shadow <- decay*shadow + (1-decay)*params, elementwise, in place."""
    d = ema.decay
    for name, p in params.arrays.items():
        s = ema.shadow.arrays[name]
        s *= d
        s += (1.0 - d) * p
    return ema


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """lr0 scaled by 0.1 at each third of the run."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if config.iterations <= 0:
        return config.lr0
    return config.lr0 * 10.0 ** (-math.floor(iteration / (config.iterations / 3)))


@dataclass
class TargetItem:
    """A target sample with its stage-inputs resolved (DCP or oracle)."""

    sample: object
    i_de: np.ndarray       # defogged (or oracle clear) image, decoder target
    t_feature: np.ndarray  # transmission at feature resolution, da target


@dataclass
class TrainState:
    params: ModelParams
    ema: EmaState | None
    iteration: int = 0


def prepare_target(sample, config: TrainConfig) -> TargetItem:
    """Resolve the defogged image and feature-level transmission for a
    target sample, honoring the oracle flags. One DCP pass covers both."""
    i_de = t_full = None
    if not (config.oracle_clear and config.oracle_t):
        i_de, t_full, _ = dcp_defog(sample.foggy)
    if config.oracle_clear:
        i_de = sample.clear
    if config.oracle_t:
        t_full = sample.t_gt
    grid = sample.foggy.shape[1] // 16  # backbone stride
    return TargetItem(sample=sample, i_de=i_de,
                      t_feature=losses.resize_to_feature(t_full, (grid, grid)))


def generate_pseudo_labels(ema: EmaState, target_foggy: np.ndarray, tau: float,
                           defogged: np.ndarray | None = None):
    """Stage 1: EMA teacher detections on the defogged target become labels.

    Runs entirely without a tape; an empty result is valid. `defogged`
    short-circuits the DCP pass when the caller already has it.
    """
    if defogged is None:
        defogged, _, _ = dcp_defog(target_foggy)
    p = bind_const(ema.shadow)
    feat = backbone_forward(p, defogged, ema.shadow.image_size)
    raw = det_head_forward(p, feat, ema.shadow.num_classes)
    return decode_detections(raw, conf_thresh=tau, nms_iou=0.5,
                             image_size=ema.shadow.image_size)


def _mean(terms):
    if len(terms) == 1:
        return terms[0]
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


def train_iteration(state: TrainState, source_batch, target_batch,
                    config: TrainConfig) -> dict:
    """One two-stage iteration; exactly one parameter update."""
    i = state.iteration

    # ---- stage 1: pseudo-labels from the frozen EMA teacher, no gradients
    pl_active = config.pl and i >= config.pl_warmup and state.ema is not None
    pseudo = []
    if pl_active:
        for item in target_batch:
            pseudo.append(generate_pseudo_labels(state.ema, item.sample.foggy,
                                                 config.tau, defogged=item.i_de))
    n_pseudo = sum(len(p) for p in pseudo)

    # ---- stage 2: one tape over source and raw target, one update
    tape = Tape()
    p = bind(state.params, tape)
    image_size = state.params.image_size
    k = state.params.num_classes

    det_terms, da_src, depth_terms = [], [], []
    for sample in source_batch:
        feat = backbone_forward(p, sample.clear, image_size)
        raw = det_head_forward(p, feat, k)
        det_terms.append(losses.detection_loss(raw, sample.labels, image_size)[3])
        if config.da:
            da_src.append(discriminator_forward(p, feat))
        if config.deb:
            depth_terms.append(losses.depth_loss(deb_forward(p, feat),
                                                 sample.depth, d_max=config.depth_max))

    da_terms, cst_terms, rec_terms, det_pl_terms = [], [], [], []
    if config.uses_target():
        if config.da and len(target_batch) != len(source_batch):
            raise ValueError("da loss pairs each target sample with a source sample")
        for bi, item in enumerate(target_batch):
            sample = item.sample
            feat = backbone_forward(p, sample.foggy, image_size)
            disc_out = discriminator_forward(p, feat) if (config.da or config.cst) else None
            if config.da:
                da_terms.append(losses.da_loss(da_src[bi], disc_out, item.t_feature))
            if config.cst:
                cst_terms.append(losses.consistency_loss(disc_out, deb_forward(p, feat)))
            if config.rec:
                rec_terms.append(losses.reconstruction_loss(decoder_forward(p, feat),
                                                            item.i_de))
            if pl_active and pseudo[bi]:
                raw_t = det_head_forward(p, feat, k)
                det_pl_terms.append(losses.detection_loss(raw_t, pseudo[bi],
                                                          image_size)[3])

    bundle = losses.bundle(
        det=_mean(det_terms) if det_terms else None,
        da=_mean(da_terms) if da_terms else None,
        depth=_mean(depth_terms) if depth_terms else None,
        cst=_mean(cst_terms) if cst_terms else None,
        rec=_mean(rec_terms) if rec_terms else None,
        det_pl=_mean(det_pl_terms) if det_pl_terms else None,
        weights=config.weights,
    )
    values = bundle.values()
    for name, value in values.items():
        if not math.isfinite(value):
            raise NumericalAbort(f"non-finite {name} loss at iteration {i}")

    backward(tape, bundle.total)
    grads = {name: t.grad for name, t in p.items()}
    lr = lr_schedule(i, config)
    sgd_step(state.params.arrays, grads, lr)
    if config.pl and state.ema is not None:
        ema_update(state.ema, state.params)

    state.iteration = i + 1
    report = {"iter": i, "lr": lr}
    report.update(values)
    report["n_pseudo_labels"] = n_pseudo
    return report


def train(config: TrainConfig, dataset, run_dir=None, params: ModelParams | None = None):
    """Full run: returns (params, ema, log records).

    Writes log.jsonl and periodic checkpoints (ckpt_{iter}.bin plus
    ema_{iter}.bin) under run_dir when given. A numerical abort still
    writes a checkpoint of the last good state before propagating.
    """
    image_size = dataset.manifest.image_size
    num_classes = len(dataset.class_names)
    if params is None:
        params = ModelParams.init(num_classes, config.seed, image_size)
    ema = EmaState(shadow=params.copy(), decay=config.ema_decay) if config.pl else None
    state = TrainState(params=params, ema=ema)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / CHECKPOINT_DIR).mkdir(exist_ok=True)
        log_file = open(run_dir / LOG_NAME, "w")

    src_ids = dataset.ids("train_source")
    tgt_ids = dataset.ids("train_target")
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), _SAMPLER_STREAM]))
    target_cache: dict = {}
    eval_split = config.default_eval_split()
    log: list = []

    def write_checkpoint(iteration: int) -> None:
        if run_dir is None:
            return
        extra = {"protocol": config.protocol}
        save_checkpoint(run_dir / CHECKPOINT_DIR / f"ckpt_{iteration}.bin",
                        state.params, iteration, ema=False, extra=extra)
        shadow = state.ema.shadow if state.ema is not None else state.params
        save_checkpoint(run_dir / CHECKPOINT_DIR / f"ema_{iteration}.bin",
                        shadow, iteration, ema=True, extra=extra)

    def emit(record: dict) -> None:
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    try:
        for i in range(config.iterations):
            batch_src = []
            for _ in range(config.batch_size):
                batch_src.append(dataset.load(src_ids[int(rng.integers(len(src_ids)))]))
            batch_tgt = []
            for _ in range(config.batch_size):
                tid = tgt_ids[int(rng.integers(len(tgt_ids)))]
                if config.uses_target():
                    item = target_cache.get(tid)
                    if item is None:
                        item = prepare_target(dataset.load(tid), config)
                        target_cache[tid] = item
                    batch_tgt.append(item)

            try:
                report = train_iteration(state, batch_src, batch_tgt, config)
            except NumericalAbort:
                write_checkpoint(i)
                raise
            done = i + 1
            if config.eval_every and (done % config.eval_every == 0
                                      or done == config.iterations):
                metrics = evaluate(state.params, dataset, eval_split,
                                   protocol=protocol_tag(config.protocol, eval_split))
                report["map"] = metrics.map
                report["per_class_ap"] = metrics.per_class_ap
            emit(report)
            if done % config.checkpoint_every == 0 or done == config.iterations:
                write_checkpoint(done)
        if config.iterations == 0:
            write_checkpoint(0)
    finally:
        if log_file is not None:
            log_file.close()

    return state.params, state.ema, log
