"""Metric-learning training: place-balanced batches, multi-similarity loss
over mined descriptor pairs, decoupled-weight-decay Adam, and a
warmup-then-step-decay learning-rate schedule.

Reductions inside the loss use exactly rounded summation, so reordering a
batch (rows and labels together) cannot change the loss value even at the
bit level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DatasetManifest, ManifestRecord, PlaceDataset
from .errors import (
    ContractError,
    DatasetError,
    DimensionError,
    DivergenceError,
    NumericsError,
)
from .model import (
    INPUT_MODE_IMAGE,
    BoQModelParams,
    ModelConfig,
    init_model_params,
    model_forward_batch,
)
from .retrieval import DescriptorIndex, build_ground_truth, evaluate
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    exact_sum,
    exp,
    log,
    matmul,
    mul,
    reshape,
    take,
    transpose,
)


@dataclass
class BatchSpec:
    """P places per batch, K images per place (batch size P*K)."""

    places_per_batch: int = 16
    images_per_place: int = 4
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.places_per_batch * self.images_per_place


@dataclass
class MSLossParams:
    """Multi-similarity loss constants.

    alpha weights positive pairs, beta negative pairs, threshold is the
    similarity offset, margin widens the pair-mining window.
    """

    alpha: float = 1.0
    beta: float = 50.0
    threshold: float = 0.5
    margin: float = 0.1

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError("alpha and beta must be positive")
        if not -1.0 < self.threshold < 1.0:
            raise ContractError(f"threshold must lie in (-1, 1), got {self.threshold}")
        if self.margin < 0:
            raise ContractError(f"margin must be >= 0, got {self.margin}")


@dataclass
class LRSchedule:
    """Linear warmup to base_lr, then multiply by decay_factor every
    decay_interval_epochs."""

    base_lr: float = 2e-4
    warmup_epochs: int = 3
    decay_factor: float = 0.3
    decay_interval_epochs: int = 5
    max_epochs: int = 40

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.warmup_epochs < 0 or self.decay_interval_epochs < 1:
            raise ContractError("bad warmup/interval settings")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must lie in (0, 1]")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")


def lr_at(epoch: int, schedule: LRSchedule) -> float:
    """Learning rate for a zero-based epoch index."""
    schedule.validate()
    if not 0 <= epoch < schedule.max_epochs:
        raise ContractError(
            f"epoch {epoch} outside [0, {schedule.max_epochs})"
        )
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    steps = (epoch - schedule.warmup_epochs) // schedule.decay_interval_epochs
    return schedule.base_lr * schedule.decay_factor**steps


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


def sample_batch(
    manifest: DatasetManifest,
    spec: BatchSpec,
    rng: np.random.Generator,
    role: str = "train",
) -> list[ManifestRecord]:
    """Sample P distinct places, then K distinct images from each.

    Places and images are drawn without replacement within the batch;
    everything is deterministic given the generator state. Records come
    back grouped by place.
    """
    groups = manifest.places(role)
    eligible = sorted(
        pid for pid, recs in groups.items() if len(recs) >= spec.images_per_place
    )
    if len(eligible) < spec.places_per_batch:
        raise DatasetError(
            f"need {spec.places_per_batch} places with >= {spec.images_per_place} "
            f"'{role}' images, found {len(eligible)}"
        )
    place_idx = rng.choice(len(eligible), size=spec.places_per_batch, replace=False)
    batch: list[ManifestRecord] = []
    for pi in place_idx:
        recs = sorted(groups[eligible[pi]], key=lambda r: r.id)
        img_idx = rng.choice(len(recs), size=spec.images_per_place, replace=False)
        batch.extend(recs[i] for i in img_idx)
    return batch


# ---------------------------------------------------------------------------
# Multi-similarity loss
# ---------------------------------------------------------------------------


def multi_similarity_loss(
    descriptors: Tensor, place_ids: Sequence[str], p: MSLossParams
) -> Tensor:
    """Pair-based loss over the batch cosine-similarity matrix.

    For each anchor, positives (same place) and negatives (other places)
    are mined relative to the opposing set: a positive survives if it is
    not already clearly easier than the hardest negative, and vice versa.
    An anchor with no negatives keeps all its positives; one with no
    positives keeps all its negatives; an anchor whose mined sets are both
    empty contributes zero.
    """
    p.validate()
    if descriptors.ndim != 2:
        raise DimensionError(f"descriptors must be [B, D], got {descriptors.shape}")
    b = descriptors.shape[0]
    if b < 2:
        raise ContractError(f"need a batch of >= 2 descriptors, got {b}")
    if len(place_ids) != b:
        raise DimensionError(f"{len(place_ids)} labels for {b} descriptors")
    norms = np.linalg.norm(descriptors.data, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > 1e-4:
        raise ContractError(
            f"descriptor rows must be unit norm within 1e-4 (off by {worst:.2e})"
        )

    sims = matmul(descriptors, transpose(descriptors))  # [B, B]
    s = sims.data
    labels = np.asarray(place_ids)
    anchor_terms: list[Tensor] = []
    for i in range(b):
        same = labels == labels[i]
        same[i] = False
        pos_idx = np.flatnonzero(same)
        neg_idx = np.flatnonzero(labels != labels[i])
        if pos_idx.size and neg_idx.size:
            hardest_neg = s[i, neg_idx].max()
            easiest_pos = s[i, pos_idx].min()
            pos_idx = pos_idx[s[i, pos_idx] < hardest_neg + p.margin]
            neg_idx = neg_idx[s[i, neg_idx] > easiest_pos - p.margin]
        parts: list[Tensor] = []
        if pos_idx.size:
            vals = take(sims, i * b + pos_idx)
            summed = exact_sum(exp(mul(add(vals, -p.threshold), -p.alpha)))
            parts.append(mul(log(add(summed, 1.0)), 1.0 / p.alpha))
        if neg_idx.size:
            vals = take(sims, i * b + neg_idx)
            summed = exact_sum(exp(mul(add(vals, -p.threshold), p.beta)))
            parts.append(mul(log(add(summed, 1.0)), 1.0 / p.beta))
        if len(parts) == 2:
            anchor_terms.append(add(parts[0], parts[1]))
        elif parts:
            anchor_terms.append(parts[0])
    if not anchor_terms:
        return Tensor(0.0)
    stacked = concat([reshape(t, (1,)) for t in anchor_terms], axis=0)
    return mul(exact_sum(stacked), 1.0 / b)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam state (first/second moments per param)."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001

    @classmethod
    def create(
        cls, params: dict[str, Tensor], weight_decay: float = 0.001
    ) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            weight_decay=weight_decay,
        )


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One in-place update. Weight decay is applied directly to the
    parameters before the adaptive step (decoupled)."""
    if lr <= 0:
        raise ContractError(f"lr must be positive, got {lr}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        g = param.grad
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {param.data.shape} for {name}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter '{name}'")
        if state.weight_decay:
            param.data -= lr * state.weight_decay * param.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mild crop-shift, brightness/contrast jitter, and additive noise."""
    c, h, w = img.shape
    dy, dx = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    out = np.zeros_like(img)
    ys = slice(max(0, dy), min(h, h + dy))
    yd = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, dx), min(w, w + dx))
    xd = slice(max(0, -dx), min(w, w - dx))
    out[:, yd, xd] = img[:, ys, xs]
    out = out * rng.uniform(0.9, 1.1)
    m = out.mean()
    out = (out - m) * rng.uniform(0.9, 1.1) + m
    out = out + rng.normal(0.0, 0.01, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_recall1: float

    def format_line(self) -> str:
        return f"{self.epoch},{self.lr:.8f},{self.train_loss:.6f},{self.val_recall1:.4f}"


@dataclass
class TrainResult:
    params: BoQModelParams
    metrics: list[EpochMetrics]
    best_epoch: int
    best_recall: float


def embed_records(
    records: Sequence[ManifestRecord],
    dataset: PlaceDataset,
    params: BoQModelParams,
    cfg: Optional[ModelConfig] = None,
    cache=None,
    chunk: int = 32,
) -> DescriptorIndex:
    """Descriptor index over the given records (no gradient recording)."""
    cfg = cfg or params.config
    rows = []
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        stacked = Tensor(np.stack([dataset.load(r) for r in part]))
        rows.append(model_forward_batch(stacked, params, cfg, cache=cache).data)
    return DescriptorIndex(
        matrix=np.concatenate(rows) if rows else np.zeros((0, cfg.descriptor_dim)),
        ids=[r.id for r in records],
        positions={r.id: r.gt for r in records},
    )


def validation_recall1(
    dataset: PlaceDataset,
    params: BoQModelParams,
    cfg: ModelConfig,
    match_threshold: float,
) -> float:
    """Recall@1 of held-out queries against held-out references."""
    queries = dataset.manifest.by_role("query")
    refs = dataset.manifest.by_role("reference")
    if not queries or not refs:
        return 0.0
    q_index = embed_records(queries, dataset, params, cfg)
    r_index = embed_records(refs, dataset, params, cfg)
    gt = build_ground_truth(
        q_index.positions, r_index.positions, dataset.manifest.gt_kind, match_threshold
    )
    return evaluate(q_index, r_index, gt, ks=[1]).recalls[1]


def train(
    model_cfg: ModelConfig,
    dataset: PlaceDataset,
    batch_spec: BatchSpec,
    loss_params: MSLossParams,
    schedule: LRSchedule,
    seed: int,
    weight_decay: float = 0.001,
    augment: bool = True,
    freeze_stem: bool = False,
    steps_per_epoch: int = 0,
    match_threshold: float = 25.0,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Run the full training loop; fully deterministic given ``seed``.

    Returns the parameters that scored the best validation recall@1. A
    non-finite loss or gradient aborts with ``DivergenceError`` carrying
    the best state reached so far.
    """
    model_cfg.validate()
    schedule.validate()
    loss_params.validate()
    rng = np.random.default_rng(seed)
    params = init_model_params(model_cfg, rng)
    params.training = True

    train_groups = dataset.manifest.places("train")
    usable = [
        pid
        for pid, recs in train_groups.items()
        if len(recs) >= batch_spec.images_per_place
    ]
    if len(usable) < batch_spec.places_per_batch:
        raise DatasetError(
            f"training needs {batch_spec.places_per_batch} places with >= "
            f"{batch_spec.images_per_place} images, dataset has {len(usable)}"
        )
    total_train = sum(len(train_groups[pid]) for pid in usable)
    spe = steps_per_epoch or max(1, math.ceil(total_train / batch_spec.batch_size))

    trainable = params.named_parameters()
    if freeze_stem:
        trainable = {k: v for k, v in trainable.items() if not k.startswith("stem.")}
    state = OptimizerState.create(trainable, weight_decay)

    metrics: list[EpochMetrics] = []
    best: Optional[BoQModelParams] = None
    best_epoch, best_recall = -1, -1.0

    def _snapshot() -> BoQModelParams:
        snap = params.clone()
        snap.training = False
        return snap

    for epoch in range(schedule.max_epochs):
        lr = lr_at(epoch, schedule)
        losses = []
        try:
            for _ in range(spe):
                batch = sample_batch(dataset.manifest, batch_spec, rng)
                arrays = []
                for rec in batch:
                    arr = dataset.load(rec)
                    if augment and model_cfg.input_mode == INPUT_MODE_IMAGE:
                        arr = augment_image(arr, rng)
                    arrays.append(arr)
                with Tape() as tape:
                    descriptors = model_forward_batch(
                        Tensor(np.stack(arrays)), params, model_cfg
                    )
                    loss = multi_similarity_loss(
                        descriptors, [r.place_id for r in batch], loss_params
                    )
                if loss.requires_grad:
                    for t in trainable.values():
                        t.zero_grad()
                    backward(loss, tape)
                    adamw_step(trainable, state, lr)
                    params.version += 1
                losses.append(loss.item())
        except NumericsError as e:
            last_good = TrainResult(
                params=best if best is not None else _snapshot(),
                metrics=metrics,
                best_epoch=best_epoch,
                best_recall=best_recall,
            )
            raise DivergenceError(
                f"training diverged in epoch {epoch}: {e}", result=last_good
            ) from e

        train_loss = float(np.mean(losses))
        val = validation_recall1(dataset, params, model_cfg, match_threshold)
        entry = EpochMetrics(epoch, lr, train_loss, val)
        metrics.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if val >= best_recall:
            best = _snapshot()
            best_epoch, best_recall = epoch, val

    params.training = False
    return TrainResult(
        params=best if best is not None else params,
        metrics=metrics,
        best_epoch=best_epoch,
        best_recall=best_recall,
    )
