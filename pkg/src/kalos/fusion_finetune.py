"""Semantic-guided multi-view fusion, quality regression and fine-tuning.

The stitched six-view image gives a semantic feature g that queries the six
per-view quality features through multi-head cross-attention; the fused
feature is regressed to a score by a two-layer head trained with a blend of
MSE and a pairwise ranking hinge.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as nnf
from torch import nn

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
)
from .config import ExperimentConfig, FusionConfig
from .encoders import build_quality_encoder, build_semantic_encoder, l2_normalize, resolve_dtype
from .errors import DivergenceError, ShapeError, UsageError
from .geometry_render import VIEW_ORDER, render_six_views, stitch_views
from .pointcloud_io import DatasetManifest, load_ply
from .render_cache import RenderCache, derive_seed
from .utils.logger import append_jsonl

logger = logging.getLogger(__name__)

NUM_VIEWS = len(VIEW_ORDER)


class MultiHeadCrossAttention(nn.Module):
    """Bias-free multi-head attention with a configurable softmax scale.

    Each head attends with softmax(Q_h K_hᵀ / √d_f) V_h; heads are
    concatenated and mapped by W.
    """

    def __init__(self, dim: int, num_heads: int, d_f: Optional[float] = None, per_head_scale: bool = False):
        super().__init__()
        if num_heads < 1 or dim % num_heads:
            raise ShapeError(f"embedding dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        if per_head_scale:
            self.d_f = float(self.head_dim)
        else:
            self.d_f = float(d_f) if d_f is not None else float(dim)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, count, _ = x.shape
        return x.reshape(batch, count, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Attend B×Nq×D queries over B×Nk×D keys and values.

        Returns:
            B×Nq×D outputs and B×heads×Nq×Nk attention weights
        """
        if k.shape[:-1] != v.shape[:-1]:
            raise ShapeError(f"keys {tuple(k.shape)} and values {tuple(v.shape)} differ in count")
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ShapeError(f"features must have dimension {self.dim}")
        qh, kh, vh = self._split(self.w_q(q)), self._split(self.w_k(k)), self._split(self.w_v(v))
        weights = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(self.d_f), dim=-1)
        heads = (weights @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], self.dim)
        return self.w_o(heads), weights


def multi_head_cross_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, module: MultiHeadCrossAttention
) -> torch.Tensor:
    """Functional form; unbatched N×D inputs are accepted and returned unbatched."""
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if q.ndim == 2:
        return module(q[None], k[None], v[None])[0][0]
    return module(q, k, v)[0]


def fuse(g: torch.Tensor, view_features: torch.Tensor, attention: Optional[MultiHeadCrossAttention],
         mode: str = "semantic") -> torch.Tensor:
    """Fuse six view features, guided by the semantic feature in ``semantic`` mode.

    Args:
        g: B×D semantic features (unused by ``max``/``mean``)
        view_features: B×6×D quality features
        attention: Cross-attention module for ``semantic`` mode
        mode: ``semantic``, ``max`` or ``mean``

    Returns:
        B×D fused features

    Raises:
        ShapeError: If there are not exactly six views
    """
    if view_features.ndim != 3 or view_features.shape[1] != NUM_VIEWS:
        raise ShapeError(f"expected B×{NUM_VIEWS}×D view features, got {tuple(view_features.shape)}")
    if mode == "max":
        return view_features.max(dim=1).values
    if mode == "mean":
        return view_features.mean(dim=1)
    return attention(g[:, None, :], view_features, view_features)[0][:, 0, :]


class RegressionHead(nn.Module):
    """Two fully-connected layers mapping a fused feature to one score."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x))).squeeze(-1)


def regress_score(features: torch.Tensor, head: RegressionHead) -> torch.Tensor:
    return head(features)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1/B) Σ (q̂ − q)².

    Raises:
        ShapeError: If the lengths differ or the batch is empty
    """
    if pred.shape != target.shape or pred.numel() == 0:
        raise ShapeError(f"mse needs equal non-empty batches, got {tuple(pred.shape)} and {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def rank_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1/B²) Σ_i Σ_j max(0, |q_i − q_j| − e_ij (q̂_i − q̂_j)), e_ij = sign(q_i ≥ q_j).

    Raises:
        UsageError: If the batch has fewer than two samples
        ShapeError: If the lengths differ
    """
    if pred.shape != target.shape:
        raise ShapeError(f"rank loss needs equal batches, got {tuple(pred.shape)} and {tuple(target.shape)}")
    if pred.numel() < 2:
        raise UsageError("rank loss needs at least two samples")
    dq = target[:, None] - target[None, :]
    dp = pred[:, None] - pred[None, :]
    sign = torch.where(dq >= 0, 1.0, -1.0).to(pred.dtype)
    return nnf.relu(dq.abs() - sign * dp).sum() / pred.numel() ** 2


def finetune_loss(mse: torch.Tensor, rank: torch.Tensor, alpha: float) -> torch.Tensor:
    return alpha * mse + (1.0 - alpha) * rank


class QualityModel(nn.Module):
    """Quality encoder, semantic encoder, fusion and regression head."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        dtype = resolve_dtype(config.runtime.precision)
        size = (config.render.image_height, config.render.image_width, config.render.channels)
        self.image_size = size
        self.fusion_mode = config.fusion.mode
        self.quality = build_quality_encoder(config.encoder, size, dtype)
        self.semantic = build_semantic_encoder(config.semantic, size, dtype)
        dim = config.encoder.embedding_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(config.seed, 0xF5))
            self.attention = _build_attention(config.fusion, dim)
            self.head = RegressionHead(dim, config.finetune.head_hidden_dim)
        self.to(dtype)

    def trainable_parameters(self) -> List[nn.Parameter]:
        """Everything except the frozen semantic backbone."""
        return [p for p in self.parameters() if p.requires_grad]

    def load_pretrained(self, path: Path) -> None:
        """Initialise the quality encoder from a pre-training checkpoint's query encoder."""
        arrays, metadata = load_checkpoint(path)
        if metadata.get("kind") != "pretrain":
            raise CheckpointError(f"{path} is a {metadata.get('kind')!r} checkpoint, expected 'pretrain'")
        load_module_arrays(self.quality, arrays, "query")
        logger.info(f"Initialised quality encoder from {path} (epoch {metadata.get('epoch')})")

    def forward(self, views: torch.Tensor, composed: torch.Tensor) -> torch.Tensor:
        """Score a batch.

        Args:
            views: B×6×C×H×W axis views
            composed: B×C×2H×3W stitched images

        Returns:
            B predicted scores
        """
        if views.ndim != 5 or views.shape[1] != NUM_VIEWS:
            raise ShapeError(f"expected B×{NUM_VIEWS}×C×H×W views, got {tuple(views.shape)}")
        batch = views.shape[0]
        f = l2_normalize(self.quality(views.reshape((batch * NUM_VIEWS,) + views.shape[2:])))
        f = f.reshape(batch, NUM_VIEWS, -1)
        g = l2_normalize(self.semantic(composed)) if self.fusion_mode == "semantic" else None
        return regress_score(fuse(g, f, self.attention, self.fusion_mode), self.head)


def _build_attention(config: FusionConfig, dim: int) -> MultiHeadCrossAttention:
    return MultiHeadCrossAttention(dim, config.num_heads, config.d_f, config.per_head_scale)


@dataclass
class FinetuneData:
    """Rendered inputs of a manifest, kept as float32 arrays."""

    views: np.ndarray  # N×6×H×W×C
    composed: np.ndarray  # N×2H×3W×C
    mos: np.ndarray  # N, NaN where unlabeled

    def __len__(self) -> int:
        return self.views.shape[0]

    def tensors(self, index: Sequence[int], dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        views = torch.from_numpy(np.ascontiguousarray(self.views[index].transpose(0, 1, 4, 2, 3))).to(dtype)
        composed = torch.from_numpy(np.ascontiguousarray(self.composed[index].transpose(0, 3, 1, 2))).to(dtype)
        return views, composed, torch.as_tensor(self.mos[index], dtype=dtype)


def prepare_data(manifest: DatasetManifest, cache: RenderCache) -> FinetuneData:
    """Render the six axis views of every entry and stitch them."""
    views, composed, mos = [], [], []
    for entry in manifest.entries:
        six = cache.six_views(manifest, entry)
        views.append(np.stack([v.pixels for v in six]))
        composed.append(stitch_views(six).pixels)
        mos.append(np.nan if entry.mos is None else entry.mos)
    return FinetuneData(np.stack(views), np.stack(composed), np.asarray(mos, dtype=np.float64))


@dataclass
class FinetuneState:
    model: QualityModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.StepLR
    epoch: int = 0

    @classmethod
    def create(cls, config: ExperimentConfig, pretrained: Optional[Path] = None) -> "FinetuneState":
        """Build the model, optionally loading pre-trained quality-encoder weights."""
        model = QualityModel(config)
        if pretrained is not None and config.finetune.use_pretrained:
            model.load_pretrained(pretrained)
        fcfg = config.finetune
        optimizer = torch.optim.Adam(model.trainable_parameters(), lr=fcfg.learning_rate, weight_decay=fcfg.weight_decay)
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=fcfg.lr_step, gamma=fcfg.lr_decay)
        return cls(model, optimizer, scheduler)


def epoch_batches(n: int, batch_size: int, seed: int) -> List[np.ndarray]:
    """Shuffled batches; a trailing single sample joins the previous batch."""
    if n < 2:
        raise UsageError(f"fine-tuning needs at least two labeled samples, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def finetune_epoch(
    state: FinetuneState,
    data: FinetuneData,
    config: ExperimentConfig,
    log_path: Optional[Path] = None,
) -> Dict[str, Any]:
    """One pass over the labeled data.

    Raises:
        DivergenceError: If a batch loss is not finite
        UsageError: If fewer than two samples are available
    """
    if np.isnan(data.mos).any():
        raise UsageError("fine-tuning data contains unlabeled samples")
    fcfg = config.finetune
    dtype = next(state.model.parameters()).dtype
    state.model.train()
    totals = {"loss": 0.0, "mse": 0.0, "rank": 0.0}
    batches = epoch_batches(len(data), fcfg.batch_size, derive_seed(config.seed, 0xF7, state.epoch))
    for step, index in enumerate(batches):
        views, composed, target = data.tensors(index, dtype)
        pred = state.model(views, composed)
        mse = mse_loss(pred, target)
        rank = rank_loss(pred, target)
        loss = finetune_loss(mse, rank, fcfg.alpha)
        if not bool(torch.isfinite(loss)):
            raise DivergenceError(
                f"non-finite fine-tuning loss at epoch {state.epoch} batch {step}: mse={mse.item()}, rank={rank.item()}"
            )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        totals["loss"] += loss.detach().item()
        totals["mse"] += mse.detach().item()
        totals["rank"] += rank.detach().item()

    metrics: Dict[str, Any] = {name: value / len(batches) for name, value in totals.items()}
    metrics.update(epoch=state.epoch, batches=len(batches), lr=state.optimizer.param_groups[0]["lr"])
    state.scheduler.step()
    state.epoch += 1
    logger.info(f"Fine-tune epoch {metrics['epoch']}: loss={metrics['loss']:.6f} (mse={metrics['mse']:.6f}, rank={metrics['rank']:.6f})")
    if log_path is not None:
        append_jsonl(log_path, metrics)
    return metrics


@torch.no_grad()
def predict_scores(model: QualityModel, data: FinetuneData, batch_size: int = 16) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    model.eval()
    scores = []
    for start in range(0, len(data), batch_size):
        views, composed, _ = data.tensors(np.arange(start, min(start + batch_size, len(data))), dtype)
        scores.append(model(views, composed).double().numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


def save_model(model: QualityModel, path: Path, config: ExperimentConfig, **extra: Any) -> Path:
    """Write a fine-tuned model checkpoint carrying its own configuration."""
    metadata = dict(extra, kind="finetune", seed=config.seed, config=config.to_dict())
    return save_checkpoint(path, module_arrays(model, "model"), metadata)


def load_model(path: Path) -> Tuple[QualityModel, ExperimentConfig]:
    """Rebuild a fine-tuned model from its checkpoint.

    Raises:
        CheckpointError: If the file is not a fine-tuned model
    """
    arrays, metadata = load_checkpoint(path)
    if metadata.get("kind") != "finetune":
        raise CheckpointError(f"{path} is a {metadata.get('kind')!r} checkpoint, expected 'finetune'")
    config = ExperimentConfig.from_dict(metadata["config"])
    # every weight comes from the checkpoint
    config.semantic.weights_path = None
    model = QualityModel(config)
    load_module_arrays(model, arrays, "model")
    return model, config


class ModelPredictor:
    """Adapts a fine-tuned model to the ``predict(manifest)`` protocol."""

    def __init__(self, model: QualityModel, cache: RenderCache):
        self.model = model
        self.cache = cache

    def predict(self, manifest: DatasetManifest) -> np.ndarray:
        return predict_scores(self.model, prepare_data(manifest, self.cache))


def predict_ply(checkpoint: Path, ply_path: Path) -> float:
    """Score one PLY file with a fine-tuned checkpoint."""
    model, config = load_model(checkpoint)
    views = render_six_views(load_ply(ply_path), config.render)
    data = FinetuneData(
        views=np.stack([v.pixels for v in views])[None],
        composed=stitch_views(views).pixels[None],
        mos=np.full(1, np.nan),
    )
    return float(predict_scores(model, data)[0])
