"""Training loop, evaluation, and single-image prediction.

The trainer is deliberately plain: one process, one optimizer, batches
streamed from packed shards by a single prefetch thread.  Everything an
epoch logs or writes is a pure function of (seed, config, shard bytes);
wall-clock time is recorded but carries no determinism guarantee.

Checkpoints are numbered files plus a small JSON manifest naming the
latest one.  A crash mid-write can only corrupt the newest numbered
file; the manifest still points at the previous good checkpoint, so no
symlink tricks are needed.

The metrics CSV appends one row per epoch under the fixed header
``epoch,step,loss,binary_accuracy,f1,lr,wall_ms``.  ``step`` is the
cumulative optimizer step count, so (epoch, step) is strictly ordered.
"""

import json
import math
import os
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import losses
from .data import load_image, resize
from .errors import DataError, DomainError, TrainingDiverged
from .metrics import ConfusionCounts, binary_accuracy, confusion, precision_recall_f1
from .model import (Checkpoint, ModelGraph, backward, build_model,
                    check_params_match, forward, load_checkpoint,
                    save_checkpoint)
from .optim import AdamState, LrSchedule, adam_step, schedule_lr
from .rng import STREAM_DROPOUT, derive_rng
from .shards import ShardReader, batch_iterator, find_shards
from .tensor import Tensor

METRICS_CSV_HEADER = "epoch,step,loss,binary_accuracy,f1,lr,wall_ms"
MANIFEST_NAME = "manifest.json"
EVAL_THRESHOLD = 0.5

LOSS_FNS = {
    "dice": losses.dice_loss,
    "bce": losses.bce_loss,
    "mse": losses.mse_loss,
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; validated on construction."""

    shards: Union[str, Sequence[str]]
    out_dir: str
    epochs: int = 600
    batch: int = 128
    loss: str = "dice"
    lr: float = 1e-4
    lr_factor: float = 1.0
    lr_interval: int = 1
    lr_floor: float = 1e-4
    seed: int = 0
    ckpt_interval: int = 50
    prefetch_depth: int = 2
    augment_intensity: float = 0.0
    target_loss: Optional[float] = None
    # When set, each epoch ends with a dropout-off pass over the training
    # shards and logs those numbers instead of the running train-pass ones,
    # making the logged row reproducible by evaluate() on the same shards.
    epoch_eval: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise DomainError(f"batch must be >= 1, got {self.batch}")
        if self.loss not in LOSS_FNS:
            raise DomainError(f"loss must be one of {sorted(LOSS_FNS)}, got {self.loss!r}")
        if self.lr <= 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.lr_factor <= 1.0:
            raise DomainError(f"lr decay factor must be in (0,1], got {self.lr_factor}")
        if self.lr_interval < 1:
            raise DomainError(f"lr decay interval must be >= 1, got {self.lr_interval}")
        if self.ckpt_interval < 1:
            raise DomainError(f"ckpt_interval must be >= 1, got {self.ckpt_interval}")
        if self.prefetch_depth < 1:
            raise DomainError(f"prefetch_depth must be >= 1, got {self.prefetch_depth}")
        if self.augment_intensity < 0:
            raise DomainError(f"augment intensity must be >= 0, got {self.augment_intensity}")
        if self.target_loss is not None and not math.isfinite(self.target_loss):
            raise DomainError(f"target_loss must be finite, got {self.target_loss}")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    step: int
    loss: float
    binary_accuracy: float
    f1: float
    lr: float
    wall_ms: float

    def csv_row(self) -> str:
        # repr keeps full float precision and round-trips exactly
        return ",".join((str(self.epoch), str(self.step), repr(self.loss),
                         repr(self.binary_accuracy), repr(self.f1),
                         repr(self.lr), repr(self.wall_ms)))


@dataclass
class TrainResult:
    checkpoint_path: Optional[str]
    metrics_path: str
    records: List[MetricsRecord]
    graph: ModelGraph
    params: Dict[str, np.ndarray]


def _shard_geometry(paths: Sequence[str]) -> Tuple[int, int]:
    r = ShardReader(paths[0])
    return r.h, r.w


def _checkpoint_name(epoch: int) -> str:
    return f"ckpt-{epoch:05d}.ldfcn"


def _update_manifest(out_dir: str, name: str):
    path = os.path.join(out_dir, MANIFEST_NAME)
    entries: List[str] = []
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                entries = list(json.load(f).get("checkpoints", []))
        except (json.JSONDecodeError, OSError):
            entries = []   # manifest is advisory; rebuild from here
    if name not in entries:
        entries.append(name)
    body = json.dumps({"latest": name, "checkpoints": entries},
                      indent=2, sort_keys=True) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(body)
    os.replace(tmp, path)


def _save(out_dir: str, epoch: int, params, state: AdamState, seed: int) -> str:
    path = os.path.join(out_dir, _checkpoint_name(epoch))
    save_checkpoint(path, Checkpoint(params=params, adam=state, epoch=epoch, seed=seed))
    _update_manifest(out_dir, os.path.basename(path))
    return path


def _eval_pass(graph: ModelGraph, params, shard_paths, batch_size: int,
               loss_fn, threshold: float = EVAL_THRESHOLD,
               prefetch_depth: int = 2) -> Tuple[float, float, float]:
    """Dropout-off pass in shard order; returns (mean loss, accuracy, f1).

    Shared by evaluate() and the trainer's end-of-epoch eval so both
    produce bit-identical numbers for the same parameters and shards.
    """
    counts = ConfusionCounts()
    total_loss = 0.0
    total_n = 0
    for x, y in batch_iterator(shard_paths, batch_size, seed=0, epoch=0,
                               prefetch_depth=prefetch_depth, shuffle=False):
        out, _ = forward(graph, params, x, training=False)
        n = x.data.shape[0]
        total_loss += loss_fn(y, out).value * n
        total_n += n
        counts = counts.add(confusion(y, out, threshold))
    if total_n == 0:
        raise DataError("evaluation set is empty")
    _, _, f1 = precision_recall_f1(counts)
    return total_loss / total_n, binary_accuracy(counts), f1


def train(config: TrainConfig, resume: Optional[str] = None,
          progress=None) -> TrainResult:
    """Run the configured number of epochs; returns the final state.

    Appends one MetricsRecord per epoch to <out_dir>/metrics.csv and
    writes a checkpoint every ckpt_interval epochs, at the final epoch,
    and when target_loss is reached.  With `resume`, picks up after the
    checkpoint's epoch, reusing its seed so the shuffle/dropout streams
    continue where that run would have gone.

    A non-finite loss or gradient aborts with TrainingDiverged; the last
    written checkpoint is left on disk untouched.  `progress`, if given,
    is called with each epoch's MetricsRecord after it is logged.
    """
    paths = find_shards(config.shards)
    os.makedirs(config.out_dir, exist_ok=True)
    h, w = _shard_geometry(paths)
    loss_fn = LOSS_FNS[config.loss]

    if resume is not None:
        ckpt = load_checkpoint(resume)
        seed = ckpt.seed
        graph, _ = build_model(seed, input_hw=(h, w))
        params = ckpt.params
        check_params_match(graph, params)
        state = ckpt.adam if ckpt.adam is not None else AdamState.init(params, lr=config.lr)
        start_epoch = ckpt.epoch + 1
    else:
        seed = config.seed
        graph, params = build_model(seed, input_hw=(h, w))
        state = AdamState.init(params, lr=config.lr)
        start_epoch = 1

    sched = LrSchedule(initial=config.lr, factor=config.lr_factor,
                       interval=config.lr_interval,
                       floor=min(config.lr_floor, config.lr))

    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    append = resume is not None and os.path.exists(metrics_path)
    records: List[MetricsRecord] = []
    last_ckpt: Optional[str] = resume

    with open(metrics_path, "a" if append else "w", encoding="utf-8") as log:
        if not append:
            log.write(METRICS_CSV_HEADER + "\n")
        for epoch in range(start_epoch, config.epochs + 1):
            t0 = time.monotonic()
            lr = schedule_lr(epoch - 1, sched)
            state = replace(state, lr=lr)
            drop_rng = derive_rng(seed, STREAM_DROPOUT, epoch)
            counts = ConfusionCounts()
            run_loss = 0.0
            run_n = 0
            for x, y in batch_iterator(paths, config.batch, seed=seed,
                                       epoch=epoch,
                                       prefetch_depth=config.prefetch_depth,
                                       shuffle=True,
                                       augment_intensity=config.augment_intensity):
                out, tape = forward(graph, params, x, training=True, rng=drop_rng)
                # NaN surfaces here first: the losses reject out-of-range
                # predictions before they would ever produce a NaN value.
                if not np.isfinite(out.data).all():
                    exc = TrainingDiverged(
                        f"non-finite network output at epoch {epoch}; "
                        f"last checkpoint: {last_ckpt}")
                    exc.last_checkpoint = last_ckpt
                    raise exc
                lv = loss_fn(y, out)
                if not math.isfinite(lv.value):
                    exc = TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; "
                        f"last checkpoint: {last_ckpt}")
                    exc.last_checkpoint = last_ckpt
                    raise exc
                grads, _ = backward(graph, tape, lv.d_pred)
                try:
                    params, state = adam_step(params, grads, state)
                except DataError as e:
                    exc = TrainingDiverged(
                        f"non-finite gradient at epoch {epoch}; "
                        f"last checkpoint: {last_ckpt}")
                    exc.last_checkpoint = last_ckpt
                    raise exc from e
                n = x.data.shape[0]
                run_loss += lv.value * n
                run_n += n
                counts = counts.add(confusion(y, out, EVAL_THRESHOLD))

            if config.epoch_eval:
                ep_loss, acc, f1 = _eval_pass(graph, params, paths,
                                              config.batch, loss_fn,
                                              prefetch_depth=config.prefetch_depth)
            else:
                ep_loss = run_loss / run_n
                acc = binary_accuracy(counts)
                _, _, f1 = precision_recall_f1(counts)

            wall_ms = (time.monotonic() - t0) * 1000.0
            rec = MetricsRecord(epoch, state.t, ep_loss, acc, f1, lr, wall_ms)
            log.write(rec.csv_row() + "\n")
            log.flush()
            records.append(rec)
            if progress is not None:
                progress(rec)

            hit_target = config.target_loss is not None and ep_loss < config.target_loss
            if epoch % config.ckpt_interval == 0 or epoch == config.epochs or hit_target:
                last_ckpt = _save(config.out_dir, epoch, params, state, seed)
            if hit_target:
                break

    return TrainResult(last_ckpt, metrics_path, records, graph, params)


def evaluate(ckpt_path: str, shards, threshold: float = EVAL_THRESHOLD,
             batch_size: int = 128, loss: str = "dice",
             prefetch_depth: int = 2) -> MetricsRecord:
    """Metrics over the full shard set with dropout off."""
    if loss not in LOSS_FNS:
        raise DomainError(f"loss must be one of {sorted(LOSS_FNS)}, got {loss!r}")
    ckpt = load_checkpoint(ckpt_path)
    paths = find_shards(shards)
    h, w = _shard_geometry(paths)
    graph, _ = build_model(ckpt.seed, input_hw=(h, w))
    check_params_match(graph, ckpt.params)
    t0 = time.monotonic()
    ep_loss, acc, f1 = _eval_pass(graph, ckpt.params, paths, batch_size,
                                  LOSS_FNS[loss], threshold, prefetch_depth)
    wall_ms = (time.monotonic() - t0) * 1000.0
    step = ckpt.adam.t if ckpt.adam is not None else 0
    lr = ckpt.adam.lr if ckpt.adam is not None else 0.0
    return MetricsRecord(ckpt.epoch, step, ep_loss, acc, f1, lr, wall_ms)


@dataclass
class PredictResult:
    probabilities: np.ndarray   # (h, w) f32 in [0, 1]
    prob_map: np.ndarray        # (h, w) u8, round(255 * p)
    mask: np.ndarray            # (h, w) u8 in {0, 255}
    overlay: np.ndarray         # (h, w, 3) u8, input with lane pixels tinted


# Lane pixels are blended halfway toward this color in the overlay.
_TINT = np.array([255, 0, 0], np.uint16)


def predict(ckpt_path: str, image_path: str, out_prob: Optional[str] = None,
            out_mask: Optional[str] = None, out_overlay: Optional[str] = None,
            threshold: float = EVAL_THRESHOLD, scale: float = 0.2,
            allow_any_size: bool = False) -> PredictResult:
    """Run one image through the net; optionally write the three outputs.

    The image is resized exactly as the shard packer resizes training
    images, so a model trained at 118x328 sees the same geometry here.
    The network is fully convolutional: any scaled size whose width is a
    multiple of 8 works with the same weights.
    """
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0,1), got {threshold}")
    ckpt = load_checkpoint(ckpt_path)
    img = load_image(image_path)
    small = resize(img, scale=scale, allow_any_size=allow_any_size)

    graph, _ = build_model(ckpt.seed, input_hw=small.shape[:2])
    check_params_match(graph, ckpt.params)
    x = np.ascontiguousarray(
        small.astype(np.float32).transpose(2, 0, 1)[None]) * np.float32(1.0 / 255.0)
    y, _ = forward(graph, ckpt.params, Tensor(x, copy=False, check=False))
    p = y.data[0, 0]

    prob_map = np.round(255.0 * p).astype(np.uint8)
    sel = p > threshold
    mask = np.where(sel, np.uint8(255), np.uint8(0))
    overlay = small.copy()
    if sel.any():
        overlay[sel] = ((overlay[sel].astype(np.uint16) + _TINT) // 2).astype(np.uint8)

    from PIL import Image
    if out_prob is not None:
        Image.fromarray(prob_map, mode="L").save(out_prob)
    if out_mask is not None:
        Image.fromarray(mask, mode="L").save(out_mask)
    if out_overlay is not None:
        Image.fromarray(overlay, mode="RGB").save(out_overlay)
    return PredictResult(p, prob_map, mask, overlay)
