"""Multi-scale training loop with per-epoch re-augmentation and validation."""

from __future__ import annotations

import csv
import logging
import queue
import threading
import time
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .augment import AugmentConfig, SamplePair, augment, sample_rng
from .autodiff import AdamState, adam_step
from .crf import CrfParams, refine
from .errors import ConfigError, TrainingDivergedError
from .imaging import resize_bilinear, resize_nearest, to_uint8
from .losses import combined_loss
from .metrics import MetricReport, dataset_mean, evaluate, threshold_mask
from .model import Model, ModelConfig, admissible, build_model, nearest_admissible, pad_and_crop_infer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "stage", "mean_train_loss", "entropy_term", "jaccard_term",
               "val_jaccard_baseline", "val_jaccard_crf", "wall_seconds")


@dataclass(frozen=True)
class ScaleStage:
    height: int
    width: int
    batch_size: int
    epochs: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.height < 1 or self.width < 1:
            raise ConfigError(f"invalid stage {self}")

    def snapped(self, num_blocks: int) -> "ScaleStage":
        h, w = nearest_admissible(self.height, self.width, num_blocks)
        return ScaleStage(h, w, self.batch_size, self.epochs)


def paper_stages(total_epochs: int = 25) -> tuple[ScaleStage, ...]:
    """Small, middle and large scales with batch sizes 8, 4, 2; epochs split in thirds."""
    base, extra = divmod(total_epochs, 3)
    epochs = [base + (1 if i >= 3 - extra else 0) for i in range(3)]
    sizes = ((252, 380, 8), (444, 688, 4), (636, 956, 2))
    return tuple(ScaleStage(h, w, b, e) for (h, w, b), e in zip(sizes, epochs))


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[ScaleStage, ...] = field(default_factory=paper_stages)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    eps: float = 1e-8
    seed: int = 0
    val_size: int = 200
    checkpoint_every: int = 1
    jaccard_mode: str = "soft"
    k: float = 1.1
    jaccard_weight: float = 1.0
    threshold: float = 0.8
    validate_crf: bool = True
    precision: str = "float64"
    prefetch: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("at least one scale stage is required")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.jaccard_mode not in ("soft", "literal"):
            raise ConfigError(f"jaccard_mode must be soft or literal, got {self.jaccard_mode!r}")
        if self.val_size < 0:
            raise ConfigError("val_size must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    mean_train_loss: float
    entropy_term: float
    jaccard_term: float
    val_jaccard_baseline: float
    val_jaccard_crf: float
    wall_seconds: float

    def deterministic_part(self) -> tuple:
        """Every field except wall time; NaN (metric not computed) becomes None."""
        return tuple(None if isinstance(v, float) and v != v else v for v in astuple(self)[:-1])


@dataclass
class TrainResult:
    model: Model
    log: list[EpochRecord]
    train_ids: list[str]
    val_ids: list[str]


def to_network_input(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """N×H×W×3 (or H×W×3) uint8 to N×3×H×W (or 3×H×W) in [-1, 1]."""
    a = np.asarray(images, dtype=dtype)
    a = (a - 127.5) / 127.5
    return np.moveaxis(a, -1, -3)


def resize_pair(pair: SamplePair, height: int, width: int) -> SamplePair:
    if pair.mask.shape == (height, width):
        return pair
    img = to_uint8(resize_bilinear(pair.image, height, width))
    mask = np.where(resize_nearest(pair.mask, height, width) >= 128, 255, 0).astype(np.uint8)
    return SamplePair(img, mask, pair.id)


def split_dataset(dataset: Sequence[SamplePair], val_size: int, seed: int):
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if len(dataset) <= val_size:
        raise ConfigError(
            f"dataset has {len(dataset)} samples, not enough for a validation split of {val_size}"
        )
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(len(dataset))
    val = sorted(order[:val_size].tolist())
    train = sorted(order[val_size:].tolist())
    return train, val


def validate(model: Model, samples: Sequence[SamplePair], threshold: float = 0.8,
             with_crf: bool = False, crf_params: CrfParams = CrfParams(),
             batch_size: int = 8) -> MetricReport:
    """Mean metrics over ``samples`` at the given probability threshold.

    With ``with_crf`` the CRF-refined mask replaces the thresholded one.
    """
    reports = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        same = len({s.mask.shape for s in chunk}) == 1
        if same:
            probs = pad_and_crop_infer(model, to_network_input(np.stack([s.image for s in chunk]), model.dtype))
        else:
            probs = [pad_and_crop_infer(model, to_network_input(s.image, model.dtype)) for s in chunk]
        for s, prob in zip(chunk, probs):
            if with_crf:
                pred = refine(s.image.transpose(2, 0, 1), prob, crf_params)
            else:
                pred = threshold_mask(prob[1], threshold)
            reports.append(evaluate(pred, s.mask))
    return dataset_mean(reports)


def _prefetched(it: Iterator, depth: int) -> Iterator:
    """Produce items from ``it`` on a background thread, ``depth`` ahead."""
    if depth <= 0:
        yield from it
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def write_log(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.epoch, r.stage] + [f"{v:.10g}" for v in astuple(r)[2:]])


def train(dataset: Sequence[SamplePair], config: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(),
          augment_config: AugmentConfig = AugmentConfig(),
          crf_params: CrfParams = CrfParams(),
          out_dir=None, model: Model | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train from scratch (or continue ``model``) following ``config.stages``.

    Writes ``epochs.csv`` and checkpoints into ``out_dir`` when given.
    """
    from .checkpoint import save_checkpoint

    dtype = np.float64 if config.precision == "float64" else np.float32
    train_idx, val_idx = split_dataset(dataset, config.val_size, config.seed)
    if model is None:
        model = build_model(model_config, config.seed, dtype)
    else:
        model.astype(dtype)
    B = model.config.num_blocks
    stages = [s.snapped(B) for s in config.stages]
    for s, orig in zip(stages, config.stages):
        if (s.height, s.width) != (orig.height, orig.width):
            log.info("stage %dx%d snapped to admissible %dx%d", orig.height, orig.width, s.height, s.width)
        assert admissible(s.height, s.width, B)
    state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    params = model.parameters()
    val_samples = [dataset[i] for i in val_idx]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[EpochRecord] = []
    epoch = 0
    model.zero_grad()
    for stage_no, stage in enumerate(stages):
        for _ in range(stage.epochs):
            epoch += 1
            t0 = time.perf_counter()
            order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(train_idx)

            def batches(order=order, stage=stage, epoch=epoch):
                for lo in range(0, len(order), stage.batch_size):
                    idx = order[lo:lo + stage.batch_size]
                    pairs = [resize_pair(augment(dataset[i], augment_config, sample_rng(config.seed, int(i), epoch)),
                                         stage.height, stage.width) for i in idx]
                    yield idx, np.stack([p.image for p in pairs]), np.stack([p.mask for p in pairs])

            totals = np.zeros(3)
            seen = 0
            for b, (idx, images, masks) in enumerate(_prefetched(batches(), config.prefetch)):
                prob = model.forward(to_network_input(images, dtype))
                terms = combined_loss(prob, masks, k=config.k, mode=config.jaccard_mode,
                                      jaccard_weight=config.jaccard_weight)
                value = float(terms.total.data)
                if not np.isfinite(value):
                    ids = [dataset[i].id for i in idx]
                    raise TrainingDivergedError(
                        f"non-finite loss {value} at stage {stage_no}, epoch {epoch}, batch {b} (samples {ids})"
                    )
                terms.total.backward()
                adam_step(params, state)
                model.zero_grad()
                n = len(idx)
                totals += n * np.array([value, float(terms.entropy.data), float(terms.jaccard.data)])
                seen += n
            means = totals / max(seen, 1)
            val_base = val_crf = float("nan")
            if val_samples:
                val_base = validate(model, val_samples, config.threshold).jaccard
                if config.validate_crf:
                    val_crf = validate(model, val_samples, config.threshold, True, crf_params).jaccard
            rec = EpochRecord(epoch, stage_no, *means.tolist(), val_base, val_crf,
                              time.perf_counter() - t0)
            records.append(rec)
            log.info("epoch %d stage %d loss %.5f (entropy %.5f, jaccard %.5f) val J %.4f / crf %.4f",
                     rec.epoch, rec.stage, rec.mean_train_loss, rec.entropy_term, rec.jaccard_term,
                     rec.val_jaccard_baseline, rec.val_jaccard_crf)
            if on_epoch is not None:
                on_epoch(rec)
            if out is not None:
                write_log(records, out / "epochs.csv")
                if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                    save_checkpoint(model, out / f"epoch{epoch:03d}.iifcn")
    if out is not None:
        write_log(records, out / "epochs.csv")
        save_checkpoint(model, out / "final.iifcn")
    return TrainResult(model, records,
                       [dataset[i].id for i in train_idx], [dataset[i].id for i in val_idx])
