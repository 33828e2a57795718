"""Contrastive pre-training of the quality encoder.

Anchors go through the query encoder; both parents and every negative go
through the momentum key encoder. Distortion-wise negatives come from the
same batch item (same content, other distortions) and content-wise
negatives from a FIFO queue of past key features filtered by content.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .anchor import mix, sample_mask
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    optimizer_arrays,
    restore_optimizer,
    save_checkpoint,
)
from .config import ExperimentConfig, PretrainConfig
from .encoders import QualityEncoder, build_quality_encoder, encode_quality, images_to_tensor, is_normalized, resolve_dtype
from .errors import ConfigError, DatasetError, DivergenceError, ShapeError, UsageError
from .geometry_render import ProjectedImage
from .pointcloud_io import DatasetManifest, ManifestEntry
from .render_cache import RenderCache, derive_seed
from .utils.logger import append_jsonl

logger = logging.getLogger(__name__)

# Content id carried by the random unit vectors that seed the queue
RANDOM_CONTENT_ID = -1

Features = Union[torch.Tensor, Sequence[torch.Tensor]]


def _check_temperature(tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"must be > 0, got {tau}", field="pretrain.temperature")


def _weighted_log_ratio(
    s1: torch.Tensor,
    s2: torch.Tensor,
    neg_logits: torch.Tensor,
    neg_mask: torch.Tensor,
    r: torch.Tensor,
    include_positive: bool,
) -> torch.Tensor:
    """Per-item ``-r log(e^s1 / Σ e^sn) - (1-r) log(e^s2 / Σ e^sn)``.

    Masked-out negatives are excluded from the log-sum-exp.
    """
    neg_logits = neg_logits.masked_fill(~neg_mask, float("-inf"))
    if include_positive:
        denom1 = torch.logsumexp(torch.cat([s1[:, None], neg_logits], dim=1), dim=1)
        denom2 = torch.logsumexp(torch.cat([s2[:, None], neg_logits], dim=1), dim=1)
    else:
        denom1 = denom2 = torch.logsumexp(neg_logits, dim=1)
    return -r * (s1 - denom1) - (1.0 - r) * (s2 - denom2)


def batch_distortion_loss(
    anchor: torch.Tensor,
    pos1: torch.Tensor,
    pos2: torch.Tensor,
    negatives: torch.Tensor,
    neg_mask: torch.Tensor,
    r: torch.Tensor,
    tau: float,
    include_positive: bool = False,
) -> torch.Tensor:
    """Distortion-wise loss for a batch.

    Args:
        anchor: B×D anchor features
        pos1: B×D features of the first parent
        pos2: B×D features of the second parent
        negatives: B×K×D same-content negatives (padded)
        neg_mask: B×K boolean, True for real negatives
        r: B masking ratios
        tau: Temperature
        include_positive: Add the positive term to each denominator

    Returns:
        B per-item losses

    Raises:
        ConfigError: If tau <= 0
        UsageError: If an item has no negatives
    """
    _check_temperature(tau)
    if negatives.shape[1] == 0 or not bool(neg_mask.any(dim=1).all()):
        raise UsageError("distortion-wise loss needs at least one negative per item")
    s1 = (anchor * pos1).sum(-1) / tau
    s2 = (anchor * pos2).sum(-1) / tau
    neg_logits = torch.einsum("bd,bkd->bk", anchor, negatives) / tau
    return _weighted_log_ratio(s1, s2, neg_logits, neg_mask, r, include_positive)


def batch_content_loss(
    anchor: torch.Tensor,
    pos1: torch.Tensor,
    pos2: torch.Tensor,
    queue_features: torch.Tensor,
    eligible: torch.Tensor,
    r: torch.Tensor,
    tau: float,
    include_positive: bool = False,
) -> torch.Tensor:
    """Content-wise loss for a batch against a shared Q×D queue.

    ``eligible`` is B×Q, True where the queue entry's content differs from
    the item's.
    """
    _check_temperature(tau)
    if queue_features.shape[0] == 0 or not bool(eligible.any(dim=1).all()):
        raise UsageError("content-wise loss needs an eligible queue negative for every item")
    s1 = (anchor * pos1).sum(-1) / tau
    s2 = (anchor * pos2).sum(-1) / tau
    neg_logits = anchor @ queue_features.T / tau
    return _weighted_log_ratio(s1, s2, neg_logits, eligible, r, include_positive)


def _as_matrix(features: Features, like: torch.Tensor) -> torch.Tensor:
    if torch.is_tensor(features):
        return features.reshape(-1, like.shape[-1])
    if len(features) == 0:
        return like.new_zeros((0, like.shape[-1]))
    return torch.stack(list(features))


def distortion_loss(
    anchor_f: torch.Tensor,
    pos1: torch.Tensor,
    pos2: torch.Tensor,
    negs: Features,
    r: float,
    tau: float,
    include_positive: bool = False,
) -> torch.Tensor:
    """Distortion-wise contrastive loss of a single anchor.

    The denominator holds the negatives only unless ``include_positive``.
    """
    negatives = _as_matrix(negs, anchor_f)
    mask = torch.ones(1, negatives.shape[0], dtype=torch.bool)
    ratio = torch.as_tensor([r], dtype=anchor_f.dtype)
    return batch_distortion_loss(
        anchor_f[None], pos1[None], pos2[None], negatives[None], mask, ratio, tau, include_positive
    )[0]


def content_loss(
    anchor_f: torch.Tensor,
    pos1: torch.Tensor,
    pos2: torch.Tensor,
    queue: "NegativeQueue",
    anchor_content: int,
    r: float,
    tau: float,
    include_positive: bool = False,
) -> torch.Tensor:
    """Content-wise contrastive loss of a single anchor against the queue.

    Raises:
        UsageError: If the queue holds no entry of another content
    """
    eligible = queue.eligibility(torch.as_tensor([anchor_content]))
    if not bool(eligible.any()):
        raise UsageError(f"queue has no negatives from a content other than {anchor_content}")
    ratio = torch.as_tensor([r], dtype=anchor_f.dtype)
    return batch_content_loss(
        anchor_f[None], pos1[None], pos2[None], queue.features.to(anchor_f.dtype), eligible, ratio, tau,
        include_positive,
    )[0]


def pretrain_loss(ld: torch.Tensor, lc: torch.Tensor, lambda_weight: float) -> torch.Tensor:
    """λ·Ld + (1 − λ)·Lc."""
    return lambda_weight * ld + (1.0 - lambda_weight) * lc


@torch.no_grad()
def momentum_update(key: nn.Module, query: nn.Module, m: float) -> nn.Module:
    """θ_k ← m·θ_k + (1 − m)·θ_q for every parameter, in place.

    Raises:
        ShapeError: If the two modules do not share parameter names and shapes
    """
    key_params = list(key.named_parameters())
    query_params = list(query.named_parameters())
    if [(n, p.shape) for n, p in key_params] != [(n, p.shape) for n, p in query_params]:
        raise ShapeError("key and query encoders have different parameter structures")
    for (_, pk), (_, pq) in zip(key_params, query_params):
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
    return key


class NegativeQueue:
    """FIFO of normalised key features tagged with their content id."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ConfigError("must be >= 1", field="pretrain.queue_capacity")
        self.capacity = capacity
        self.dim = dim
        self.features = torch.empty(0, dim, dtype=dtype)
        self.content_ids = torch.empty(0, dtype=torch.long)

    def __len__(self) -> int:
        return self.features.shape[0]

    def enqueue(self, features: torch.Tensor, content_ids: Union[torch.Tensor, Sequence[int]]) -> None:
        """Append features, evicting the oldest beyond capacity.

        Raises:
            UsageError: If a feature is not unit-norm
            ShapeError: If counts or dimensions disagree
        """
        features = features.detach().to(self.features.dtype)
        content_ids = torch.as_tensor(content_ids, dtype=torch.long)
        if features.ndim != 2 or features.shape[1] != self.dim or features.shape[0] != content_ids.shape[0]:
            raise ShapeError(
                f"expected N×{self.dim} features with N content ids, got {tuple(features.shape)} "
                f"and {tuple(content_ids.shape)}"
            )
        if features.shape[0] and not is_normalized(features, atol=1e-5):
            raise UsageError("queue only accepts L2-normalised features")
        self.features = torch.cat([self.features, features])[-self.capacity:]
        self.content_ids = torch.cat([self.content_ids, content_ids])[-self.capacity:]

    def init_random(self, seed: int) -> None:
        """Fill to capacity with random unit vectors of the reserved content id."""
        generator = torch.Generator().manual_seed(seed)
        noise = torch.randn(self.capacity, self.dim, generator=generator, dtype=torch.float64)
        noise = noise / torch.linalg.vector_norm(noise, dim=1, keepdim=True)
        self.features = noise.to(self.features.dtype)
        self.content_ids = torch.full((self.capacity,), RANDOM_CONTENT_ID, dtype=torch.long)

    def eligibility(self, content_ids: torch.Tensor) -> torch.Tensor:
        """B×Q mask of queue entries whose content differs from each item's."""
        return self.content_ids[None, :] != torch.as_tensor(content_ids, dtype=torch.long)[:, None]

    def eligible(self, content_id: int) -> torch.Tensor:
        """Features usable as content-wise negatives for ``content_id``."""
        return self.features[self.content_ids != content_id]

    def arrays(self, prefix: str = "queue") -> Dict[str, np.ndarray]:
        return {f"{prefix}/features": self.features.numpy(), f"{prefix}/content_ids": self.content_ids.numpy()}

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "queue") -> None:
        self.features = torch.as_tensor(arrays[f"{prefix}/features"], dtype=self.features.dtype)
        self.content_ids = torch.as_tensor(arrays[f"{prefix}/content_ids"], dtype=torch.long)


@dataclass(frozen=True)
class PlannedItem:
    """Ids behind one batch item; images are rendered by :func:`sample_batch`."""

    content_id: int
    rotation_index: int
    first: ManifestEntry
    second: ManifestEntry
    negatives: Tuple[ManifestEntry, ...]
    mask_seed: int


@dataclass
class PretrainBatch:
    anchors: List[ProjectedImage]
    positives1: np.ndarray  # B×H×W×C
    positives2: np.ndarray
    negatives: np.ndarray  # B×K×H×W×C, zero-padded
    negative_mask: np.ndarray  # B×K
    ratios: np.ndarray
    content_ids: np.ndarray
    items: List[PlannedItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.anchors)


def check_pretrain_manifest(manifest: DatasetManifest) -> Dict[int, List[ManifestEntry]]:
    """Group by content and require ≥ 2 contents with ≥ 3 distortions each.

    Raises:
        DatasetError: If the manifest cannot provide both kinds of negatives
    """
    groups = manifest.by_content()
    if len(groups) < 2:
        raise DatasetError(f"pre-training needs at least 2 contents, manifest has {len(groups)}")
    short = [cid for cid, entries in groups.items() if len(entries) < 3]
    if short:
        raise DatasetError(f"contents {sorted(short)} have fewer than 3 distortions")
    return groups


def plan_batch(manifest: DatasetManifest, config: PretrainConfig, step_seed: int) -> List[PlannedItem]:
    """Choose content, rotation, the two parents and the negatives of every item."""
    groups = check_pretrain_manifest(manifest)
    contents = sorted(groups)
    rng = np.random.default_rng(step_seed)
    items = []
    for _ in range(config.batch_size):
        content_id = contents[int(rng.integers(len(contents)))]
        group = groups[content_id]
        rotation_index = int(rng.integers(config.rotations_per_cloud))
        i, j = (int(k) for k in rng.choice(len(group), size=2, replace=False))
        rest = [entry for k, entry in enumerate(group) if k not in (i, j)]
        cap = config.max_distortion_negatives
        if cap is not None and len(rest) > cap:
            keep = np.sort(rng.choice(len(rest), size=cap, replace=False))
            rest = [rest[k] for k in keep]
        items.append(PlannedItem(
            content_id=content_id,
            rotation_index=rotation_index,
            first=group[i],
            second=group[j],
            negatives=tuple(rest),
            mask_seed=int(rng.integers(2 ** 32)),
        ))
    return items


def sample_batch(
    manifest: DatasetManifest,
    cache: RenderCache,
    config: PretrainConfig,
    step_seed: int,
) -> PretrainBatch:
    """Render and mix one pre-training batch; identical for a fixed ``step_seed``.

    Raises:
        DatasetError: If some content has fewer than 3 distortions
    """
    items = plan_batch(manifest, config, step_seed)
    height, width = cache.config.image_height, cache.config.image_width
    k_max = max(len(item.negatives) for item in items)

    anchors, pos1, pos2, ratios = [], [], [], []
    shape = (height, width, cache.config.channels)
    negatives = np.zeros((len(items), k_max) + shape, dtype=np.float32)
    negative_mask = np.zeros((len(items), k_max), dtype=bool)
    for b, item in enumerate(items):
        x1 = cache.rotated_view(manifest, item.first, item.rotation_index)
        x2 = cache.rotated_view(manifest, item.second, item.rotation_index)
        mask = sample_mask(height, width, config.mask_ratio_min, config.mask_ratio_max, item.mask_seed)
        anchors.append(mix(x1, x2, mask))
        pos1.append(x1.pixels)
        pos2.append(x2.pixels)
        ratios.append(mask.ratio)
        for k, entry in enumerate(item.negatives):
            negatives[b, k] = cache.rotated_view(manifest, entry, item.rotation_index).pixels
            negative_mask[b, k] = True

    return PretrainBatch(
        anchors=anchors,
        positives1=np.stack(pos1),
        positives2=np.stack(pos2),
        negatives=negatives,
        negative_mask=negative_mask,
        ratios=np.asarray(ratios),
        content_ids=np.asarray([item.content_id for item in items], dtype=np.int64),
        items=items,
    )


@dataclass
class PretrainState:
    """Query and key encoders, negative queue, optimizer and counters."""

    query: QualityEncoder
    key: QualityEncoder
    queue: NegativeQueue
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.StepLR
    step: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, config: ExperimentConfig) -> "PretrainState":
        """Fresh state: seeded encoder, key copy, initialised queue."""
        dtype = resolve_dtype(config.runtime.precision)
        size = (config.render.image_height, config.render.image_width, config.render.channels)
        query = build_quality_encoder(config.encoder, size, dtype)
        key = copy.deepcopy(query)
        key.requires_grad_(False)

        pcfg = config.pretrain
        queue = NegativeQueue(pcfg.queue_capacity, config.encoder.embedding_dim, dtype)
        if pcfg.queue_init == "random":
            queue.init_random(derive_seed(config.seed, 0x51))
        optimizer = torch.optim.SGD(
            query.parameters(),
            lr=pcfg.learning_rate,
            momentum=pcfg.optimizer_momentum,
            weight_decay=pcfg.weight_decay,
        )
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=pcfg.lr_step, gamma=pcfg.lr_decay)
        return cls(query, key, queue, optimizer, scheduler)

    def save(self, path: Path, config: ExperimentConfig) -> Path:
        """Checkpoint encoders, queue, optimizer, scheduler and counters."""
        arrays = {}
        arrays.update(module_arrays(self.query, "query"))
        arrays.update(module_arrays(self.key, "key"))
        arrays.update(self.queue.arrays())
        opt_arrays, opt_meta = optimizer_arrays(self.optimizer, "optimizer")
        arrays.update(opt_arrays)
        metadata = {
            "kind": "pretrain",
            "step": self.step,
            "epoch": self.epoch,
            "seed": config.seed,
            "config": config.to_dict(),
            "optimizer": opt_meta,
            "scheduler": self.scheduler.state_dict(),
        }
        return save_checkpoint(path, arrays, metadata)

    @classmethod
    def load(cls, path: Path, config: ExperimentConfig) -> "PretrainState":
        """Resume from a checkpoint written by :meth:`save`.

        Raises:
            CheckpointError: If the file is not a pre-training checkpoint
        """
        arrays, metadata = load_checkpoint(path)
        if metadata.get("kind") != "pretrain":
            raise CheckpointError(f"{path} is a {metadata.get('kind')!r} checkpoint, expected 'pretrain'")
        state = cls.create(config)
        load_module_arrays(state.query, arrays, "query")
        load_module_arrays(state.key, arrays, "key")
        state.queue.load_arrays(arrays)
        restore_optimizer(state.optimizer, arrays, metadata["optimizer"], "optimizer")
        state.scheduler.load_state_dict(metadata["scheduler"])
        state.step = int(metadata["step"])
        state.epoch = int(metadata["epoch"])
        return state


def steps_per_epoch(manifest: DatasetManifest, config: PretrainConfig) -> int:
    """Configured steps, or enough batches to visit every entry once on average."""
    if config.steps_per_epoch:
        return config.steps_per_epoch
    return max(1, math.ceil(len(manifest) / config.batch_size))


def _key_features(batch: PretrainBatch, key: QualityEncoder, dtype: torch.dtype) -> Tuple[torch.Tensor, ...]:
    with torch.no_grad():
        k1 = encode_quality(batch.positives1, key)
        k2 = encode_quality(batch.positives2, key)
        mask = torch.from_numpy(batch.negative_mask)
        kn = k1.new_zeros(mask.shape + (k1.shape[1],))
        kn[mask] = encode_quality(batch.negatives[batch.negative_mask], key)
    return k1, k2, kn, mask


def train_step(state: PretrainState, batch: PretrainBatch, config: ExperimentConfig) -> Dict[str, float]:
    """One gradient step on the query encoder, then momentum update and enqueue.

    Raises:
        DivergenceError: If the loss is not finite
    """
    pcfg = config.pretrain
    dtype = next(state.query.parameters()).dtype
    anchors = encode_quality(images_to_tensor(batch.anchors, dtype), state.query)
    k1, k2, kn, neg_mask = _key_features(batch, state.key, dtype)
    ratios = torch.as_tensor(batch.ratios, dtype=dtype)
    content_ids = torch.from_numpy(batch.content_ids)
    incl = pcfg.include_positive_in_denominator

    ld = batch_distortion_loss(anchors, k1, k2, kn, neg_mask, ratios, pcfg.temperature, incl).mean()
    lc = anchors.new_zeros(())
    if pcfg.lambda_weight < 1.0:
        eligible = state.queue.eligibility(content_ids)
        has = eligible.any(dim=1)
        if bool(has.any()):
            lc = batch_content_loss(
                anchors[has], k1[has], k2[has], state.queue.features, eligible[has], ratios[has],
                pcfg.temperature, incl,
            ).mean()
        else:
            logger.debug(f"Step {state.step}: queue has no content-wise negatives yet, skipping content loss")
    loss = pretrain_loss(ld, lc, pcfg.lambda_weight)
    if not bool(torch.isfinite(loss)):
        raise DivergenceError(
            f"non-finite pre-training loss at epoch {state.epoch} step {state.step}: "
            f"distortion={ld.item()}, content={lc.item()}"
        )

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    momentum_update(state.key, state.query, pcfg.momentum)

    valid = neg_mask.reshape(-1)
    keys = torch.cat([k1, k2, kn.reshape(-1, kn.shape[-1])[valid]])
    key_ids = torch.cat([content_ids, content_ids, content_ids.repeat_interleave(neg_mask.shape[1])[valid]])
    state.queue.enqueue(keys, key_ids)
    state.step += 1
    return {"loss": loss.detach().item(), "distortion_loss": ld.detach().item(), "content_loss": lc.detach().item()}


def pretrain_epoch(
    state: PretrainState,
    manifest: DatasetManifest,
    cache: RenderCache,
    config: ExperimentConfig,
    log_path: Optional[Path] = None,
    anchor_sink=None,
) -> Dict[str, Any]:
    """Run one epoch and return its mean losses.

    Args:
        state: Training state, updated in place
        manifest: Pre-training manifest (labels unused)
        cache: Render cache for the rotated views
        config: Experiment configuration
        log_path: Optional JSON-lines file receiving the epoch metrics
        anchor_sink: Optional callable receiving each batch (anchor dumps)

    Returns:
        Epoch metrics
    """
    totals = {"loss": 0.0, "distortion_loss": 0.0, "content_loss": 0.0}
    n_steps = steps_per_epoch(manifest, config.pretrain)
    state.query.train()
    for _ in range(n_steps):
        batch = sample_batch(manifest, cache, config.pretrain, derive_seed(config.seed, state.step))
        if anchor_sink is not None:
            anchor_sink(batch)
        for name, value in train_step(state, batch, config).items():
            totals[name] += value

    metrics: Dict[str, Any] = {name: value / n_steps for name, value in totals.items()}
    metrics.update(
        epoch=state.epoch,
        steps=n_steps,
        lr=state.optimizer.param_groups[0]["lr"],
        queue_size=len(state.queue),
    )
    state.scheduler.step()
    state.epoch += 1
    logger.info(
        f"Pre-train epoch {metrics['epoch']}: loss={metrics['loss']:.6f} "
        f"(distortion={metrics['distortion_loss']:.6f}, content={metrics['content_loss']:.6f})"
    )
    if log_path is not None:
        append_jsonl(log_path, metrics)
    return metrics
