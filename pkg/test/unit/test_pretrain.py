from __future__ import annotations

import math
import warnings
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats
from torch import nn

from kalos.checkpoint import CheckpointError, save_checkpoint
from kalos.config import EncoderConfig, ExperimentConfig, PretrainConfig
from kalos.encoders import build_quality_encoder, encode_quality
from kalos.errors import ConfigError, DatasetError, DivergenceError, ShapeError, UsageError
from kalos.pointcloud_io import DatasetManifest, ManifestEntry
from kalos.pretrain import (
    RANDOM_CONTENT_ID,
    NegativeQueue,
    PretrainState,
    batch_content_loss,
    batch_distortion_loss,
    content_loss,
    distortion_loss,
    momentum_update,
    plan_batch,
    pretrain_epoch,
    pretrain_loss,
    sample_batch,
    steps_per_epoch,
    train_step,
)
from kalos.render_cache import RenderCache, derive_seed
from kalos.utils.logger import read_jsonl

F64 = torch.float64


def _vec(*values: float) -> torch.Tensor:
    return torch.tensor(values, dtype=F64)


def _unit_rows(n: int, dim: int, seed: int) -> torch.Tensor:
    x = torch.randn(n, dim, dtype=F64, generator=torch.Generator().manual_seed(seed))
    return x / torch.linalg.vector_norm(x, dim=1, keepdim=True)


def _naive(a, p1, p2, negs, r, tau, include_positive=False) -> float:
    """Direct summation of the weighted two-positive contrastive loss."""
    a, p1, p2, negs = (t.numpy() for t in (a, p1, p2, negs))
    neg_sum = sum(math.exp(float(a @ n) / tau) for n in negs)
    e1, e2 = math.exp(float(a @ p1) / tau), math.exp(float(a @ p2) / tau)
    d1 = neg_sum + (e1 if include_positive else 0.0)
    d2 = neg_sum + (e2 if include_positive else 0.0)
    return -r * math.log(e1 / d1) - (1 - r) * math.log(e2 / d2)


def _manifest(distortions_per_content: dict[int, int]) -> DatasetManifest:
    return DatasetManifest([
        ManifestEntry(f"c{c}_d{d}.ply", c, d, 1)
        for c, count in distortions_per_content.items()
        for d in range(count)
    ])


# -- distortion-wise loss -------------------------------------------------------


def test_distortion_loss_hand_value() -> None:
    a = _vec(1, 0, 0)
    negs = [_vec(0, 1, 0), _vec(0, 0, 1)]
    loss = distortion_loss(a, a.clone(), a.clone(), negs, r=0.5, tau=0.2)
    assert float(loss) == pytest.approx(-(5 - math.log(2)), abs=1e-9)
    assert float(loss) == pytest.approx(-4.30685, abs=1e-5)


@pytest.mark.parametrize("r", [0.0, 0.3, 1.0])
def test_distortion_loss_zero_when_all_similarities_match(r: float) -> None:
    a = _vec(1, 0, 0)
    loss = distortion_loss(a, _vec(0.6, 0.8, 0), _vec(0.6, 0, 0.8), [_vec(0.6, -0.8, 0)], r=r, tau=0.2)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("include_positive", [False, True])
def test_distortion_loss_matches_direct_summation(include_positive: bool) -> None:
    rng = np.random.default_rng(0)
    for trial in range(100):
        k = int(rng.integers(1, 6))
        feats = _unit_rows(3 + k, 8, seed=trial)
        r = float(rng.uniform(0.25, 0.75))
        got = distortion_loss(feats[0], feats[1], feats[2], feats[3:], r, 0.2, include_positive)
        want = _naive(feats[0], feats[1], feats[2], feats[3:], r, 0.2, include_positive)
        assert float(got) == pytest.approx(want, abs=1e-9)


def test_distortion_loss_errors() -> None:
    a = _vec(1, 0)
    with pytest.raises(UsageError):
        distortion_loss(a, a, a, [], 0.5, 0.2)
    with pytest.raises(ConfigError):
        distortion_loss(a, a, a, [_vec(0, 1)], 0.5, 0.0)


def test_distortion_loss_ignores_negative_order() -> None:
    feats = _unit_rows(7, 5, seed=3)
    forward = distortion_loss(feats[0], feats[1], feats[2], feats[3:], 0.4, 0.2)
    backward = distortion_loss(feats[0], feats[1], feats[2], feats[3:].flip(0), 0.4, 0.2)
    assert float(forward) == pytest.approx(float(backward), abs=1e-12)


def test_distortion_loss_decreases_with_first_similarity() -> None:
    a = _vec(1, 0, 0)
    negs = [_vec(0.2, 1, 0), _vec(-0.3, 0, 1)]
    values = [float(distortion_loss(a, _vec(t, 0, 0), _vec(0.5, 0, 0), negs, 0.6, 0.2)) for t in (0.1, 0.4, 0.7, 1.0)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_padded_negatives_are_masked() -> None:
    feats = _unit_rows(6, 4, seed=5)
    negatives = torch.stack([feats[3:5], torch.stack([feats[5], torch.zeros(4, dtype=F64)])])
    mask = torch.tensor([[True, True], [True, False]])
    r = torch.tensor([0.5, 0.5], dtype=F64)
    anchors = torch.stack([feats[0], feats[0]])

    losses = batch_distortion_loss(anchors, feats[1:3], feats[1:3].flip(0), negatives, mask, r, 0.2)

    assert float(losses[1]) == pytest.approx(_naive(feats[0], feats[2], feats[1], feats[5:6], 0.5, 0.2), abs=1e-9)


def test_pretrain_loss_gradcheck() -> None:
    feats = _unit_rows(6, 4, seed=7)
    anchor = feats[:2].clone().requires_grad_(True)
    negatives = feats[4:].reshape(1, 2, 4).expand(2, 2, 4)
    mask = torch.ones(2, 2, dtype=torch.bool)
    r = torch.tensor([0.3, 0.6], dtype=F64)

    def objective(x: torch.Tensor) -> torch.Tensor:
        return batch_distortion_loss(x, feats[2:4], feats[[3, 2]], negatives, mask, r, 0.2)

    assert torch.autograd.gradcheck(objective, (anchor,))


def _full_objective_inputs(encoder, seed: int = 4):
    generator = torch.Generator().manual_seed(seed)

    def images(n: int) -> torch.Tensor:
        return torch.rand(n, 3, 16, 16, dtype=F64, generator=generator)

    with torch.no_grad():
        k1 = encode_quality(images(3), encoder)
        k2 = encode_quality(images(3), encoder)
        kn = encode_quality(images(6), encoder).reshape(3, 2, -1)
        queue = NegativeQueue(capacity=8, dim=kn.shape[-1], dtype=F64)
        queue.enqueue(encode_quality(images(8), encoder), [0, 1, 2, 3, 0, 1, 2, 3])
    eligible = queue.eligibility(torch.tensor([0, 1, 2]))
    ratios = torch.tensor([0.3, 0.5, 0.8], dtype=F64)
    mask = torch.ones(3, 2, dtype=torch.bool)

    def objective(anchor_images: torch.Tensor) -> torch.Tensor:
        anchors = encode_quality(anchor_images, encoder)
        ld = batch_distortion_loss(anchors, k1, k2, kn, mask, ratios, 0.2).mean()
        lc = batch_content_loss(anchors, k1, k2, queue.features, eligible, ratios, 0.2).mean()
        return pretrain_loss(ld, lc, 0.3)

    return images(3), objective


def test_full_pretrain_objective_gradcheck_through_encoder() -> None:
    encoder = build_quality_encoder(EncoderConfig(architecture="linear", embedding_dim=5, seed=3), (16, 16, 3), F64)
    anchor_images, objective = _full_objective_inputs(encoder)

    assert torch.autograd.gradcheck(objective, (anchor_images.requires_grad_(True),))


@pytest.mark.parametrize("index", [(0, 0), (2, 100), (4, 767)])
def test_full_pretrain_objective_weight_gradient(index) -> None:
    encoder = build_quality_encoder(EncoderConfig(architecture="linear", embedding_dim=5, seed=3), (16, 16, 3), F64)
    anchor_images, objective = _full_objective_inputs(encoder)
    weight = encoder.projection.weight

    encoder.zero_grad()
    objective(anchor_images).backward()
    analytic = weight.grad[index].item()

    eps = 1e-6
    with torch.no_grad():
        original = weight[index].item()
        weight[index] = original + eps
        plus = objective(anchor_images).item()
        weight[index] = original - eps
        minus = objective(anchor_images).item()
        weight[index] = original
    assert analytic == pytest.approx((plus - minus) / (2 * eps), rel=1e-5, abs=1e-9)


# -- content-wise loss ----------------------------------------------------------


def test_content_loss_matches_direct_summation_over_eligible_entries() -> None:
    queue = NegativeQueue(capacity=12, dim=6, dtype=F64)
    queue.enqueue(_unit_rows(12, 6, seed=11), [0, 1, 2] * 4)
    feats = _unit_rows(3, 6, seed=12)

    got = content_loss(feats[0], feats[1], feats[2], queue, anchor_content=1, r=0.35, tau=0.2)

    eligible = queue.features[queue.content_ids != 1]
    assert eligible.shape[0] == 8
    assert float(got) == pytest.approx(_naive(feats[0], feats[1], feats[2], eligible, 0.35, 0.2), abs=1e-9)


def test_content_loss_zero_for_matching_similarities() -> None:
    queue = NegativeQueue(capacity=2, dim=3, dtype=F64)
    queue.enqueue(torch.stack([_vec(0.6, -0.8, 0), _vec(0, 0, 1)]), [4, 2])
    loss = content_loss(_vec(1, 0, 0), _vec(0.6, 0.8, 0), _vec(0.6, 0, 0.8), queue, anchor_content=2, r=0.5, tau=0.2)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_content_loss_needs_another_content() -> None:
    queue = NegativeQueue(capacity=4, dim=3, dtype=F64)
    queue.enqueue(_unit_rows(4, 3, seed=1), [7, 7, 7, 7])
    a = _vec(1, 0, 0)
    with pytest.raises(UsageError):
        content_loss(a, a, a, queue, anchor_content=7, r=0.5, tau=0.2)


def test_pretrain_loss_weighting() -> None:
    ld, lc = torch.tensor(2.0), torch.tensor(-1.0)
    assert float(pretrain_loss(ld, lc, 1.0)) == 2.0
    assert float(pretrain_loss(ld, lc, 0.0)) == -1.0
    assert float(pretrain_loss(ld, lc, 0.3)) == pytest.approx(-0.1)


# -- momentum update ------------------------------------------------------------


def _scalar_module(value: float) -> nn.Module:
    module = nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        module.weight.fill_(value)
    return module


def test_momentum_update_arithmetic() -> None:
    key, query = _scalar_module(1.0), _scalar_module(0.0)
    momentum_update(key, query, 0.999)
    assert key.weight.item() == pytest.approx(0.999)

    momentum_update(key, query, 0.0)
    assert key.weight.item() == 0.0


def test_momentum_update_contracts_geometrically() -> None:
    key, query = _scalar_module(2.0), _scalar_module(-1.0)
    for step in range(1, 11):
        momentum_update(key, query, 0.9)
        assert key.weight.item() - query.weight.item() == pytest.approx(3.0 * 0.9 ** step)


def test_momentum_update_structure_mismatch() -> None:
    with pytest.raises(ShapeError):
        momentum_update(nn.Linear(2, 1), nn.Linear(3, 1), 0.5)


# -- negative queue -------------------------------------------------------------


def test_queue_evicts_oldest() -> None:
    queue = NegativeQueue(capacity=4, dim=3, dtype=F64)
    pushed = _unit_rows(5, 3, seed=2)
    for i in range(5):
        queue.enqueue(pushed[i:i + 1], [i])

    assert len(queue) == 4
    torch.testing.assert_close(queue.features, pushed[1:])
    assert queue.content_ids.tolist() == [1, 2, 3, 4]


def test_queue_full_batches_replace_contents() -> None:
    queue = NegativeQueue(capacity=4, dim=3, dtype=F64)
    first, second = _unit_rows(4, 3, seed=3), _unit_rows(4, 3, seed=4)
    queue.enqueue(first, [0] * 4)
    queue.enqueue(second, [1] * 4)
    torch.testing.assert_close(queue.features, second)


def test_queue_holds_last_keys_in_order() -> None:
    queue = NegativeQueue(capacity=6, dim=2, dtype=F64)
    keys = _unit_rows(12, 2, seed=8)
    for k in range(4):
        queue.enqueue(keys[3 * k:3 * k + 3], [k] * 3)
        expected = keys[max(0, 3 * (k + 1) - 6):3 * (k + 1)]
        torch.testing.assert_close(queue.features, expected)


def test_queue_content_filter() -> None:
    queue = NegativeQueue(capacity=8, dim=4, dtype=F64)
    keys = _unit_rows(8, 4, seed=9)
    for i in range(4):
        queue.enqueue(keys[2 * i:2 * i + 2], [i % 2, i % 2])

    others = queue.eligible(0)
    torch.testing.assert_close(others, keys[[2, 3, 6, 7]])
    eligibility = queue.eligibility(torch.tensor([0, 1]))
    assert eligibility.shape == (2, 8)
    assert eligibility[0].tolist() == [False, False, True, True, False, False, True, True]
    assert (eligibility[0] ^ eligibility[1]).all()


def test_queue_rejects_bad_features() -> None:
    queue = NegativeQueue(capacity=4, dim=3, dtype=F64)
    with pytest.raises(UsageError):
        queue.enqueue(torch.ones(1, 3, dtype=F64), [0])
    with pytest.raises(ShapeError):
        queue.enqueue(_unit_rows(2, 3, seed=0), [0])
    with pytest.raises(ShapeError):
        queue.enqueue(_unit_rows(1, 4, seed=0), [0])


def test_queue_random_initialisation() -> None:
    queue = NegativeQueue(capacity=16, dim=5, dtype=F64)
    queue.init_random(seed=3)
    assert len(queue) == 16
    torch.testing.assert_close(torch.linalg.vector_norm(queue.features, dim=1), torch.ones(16, dtype=F64))
    assert set(queue.content_ids.tolist()) == {RANDOM_CONTENT_ID}
    assert queue.eligible(0).shape == (16, 5)


# -- batch planning -------------------------------------------------------------


def test_plan_batch_with_three_distortions_has_one_negative() -> None:
    manifest = _manifest({0: 3, 1: 3})
    items = plan_batch(manifest, PretrainConfig(batch_size=8), step_seed=1)

    assert len(items) == 8
    for item in items:
        assert len(item.negatives) == 1
        assert item.first.distortion_key != item.second.distortion_key
        members = {item.first.key, item.second.key, item.negatives[0].key}
        assert len(members) == 3
        assert {key[0] for key in members} == {item.content_id}
        assert 0 <= item.rotation_index < 6


def test_plan_batch_is_deterministic() -> None:
    manifest = _manifest({0: 4, 1: 5, 2: 3})
    assert plan_batch(manifest, PretrainConfig(batch_size=6), 42) == plan_batch(manifest, PretrainConfig(batch_size=6), 42)


def test_plan_batch_caps_negatives() -> None:
    items = plan_batch(_manifest({0: 6, 1: 6}), PretrainConfig(batch_size=4, max_distortion_negatives=2), 0)
    assert all(len(item.negatives) == 2 for item in items)


def test_plan_batch_parent_pairs_are_uniform() -> None:
    manifest = _manifest({0: 4, 1: 4})
    counts = Counter()
    for step in range(125):
        for item in plan_batch(manifest, PretrainConfig(batch_size=8), derive_seed(5, step)):
            counts[frozenset((item.first.distortion_id, item.second.distortion_id))] += 1

    assert sum(counts.values()) == 1000
    assert len(counts) == 6
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_plan_batch_rejects_thin_datasets() -> None:
    with pytest.raises(DatasetError):
        plan_batch(_manifest({0: 5}), PretrainConfig(), 0)
    with pytest.raises(DatasetError):
        plan_batch(_manifest({0: 3, 1: 2}), PretrainConfig(), 0)


def test_sample_batch_shapes(tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest) -> None:
    cache = RenderCache(tiny_experiment.render, seed=tiny_experiment.seed)

    batch = sample_batch(synthetic_dataset, cache, tiny_experiment.pretrain, step_seed=3)

    assert len(batch) == 4
    assert batch.positives1.shape == (4, 32, 32, 3)
    assert batch.negatives.shape == (4, 4, 32, 32, 3)
    assert batch.negative_mask.all()
    assert np.all((batch.ratios >= 0.25) & (batch.ratios <= 0.75))
    for anchor, content_id in zip(batch.anchors, batch.content_ids):
        assert anchor.content_id == content_id
        assert anchor.mixed_with is not None


def test_steps_per_epoch(synthetic_dataset: DatasetManifest) -> None:
    assert steps_per_epoch(synthetic_dataset, PretrainConfig(batch_size=5, steps_per_epoch=3)) == 3
    assert steps_per_epoch(synthetic_dataset, PretrainConfig(batch_size=5)) == math.ceil(24 / 5)


# -- training -------------------------------------------------------------------


def test_train_step_moves_key_only_by_momentum(
    tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest
) -> None:
    state = PretrainState.create(tiny_experiment)
    cache = RenderCache(tiny_experiment.render, seed=tiny_experiment.seed)
    batch = sample_batch(synthetic_dataset, cache, tiny_experiment.pretrain, step_seed=0)
    key_before = {n: p.detach().clone() for n, p in state.key.named_parameters()}
    queue_before = len(state.queue)

    metrics = train_step(state, batch, tiny_experiment)

    m = tiny_experiment.pretrain.momentum
    for name, param in state.key.named_parameters():
        expected = m * key_before[name] + (1 - m) * dict(state.query.named_parameters())[name].detach()
        torch.testing.assert_close(param.detach(), expected)
        assert param.grad is None
    assert state.step == 1
    assert len(state.queue) == min(tiny_experiment.pretrain.queue_capacity, queue_before + 4 * (2 + 4))
    assert set(metrics) == {"loss", "distortion_loss", "content_loss"}


def test_queue_holds_the_latest_key_features_after_each_step(make_config, synthetic_dataset: DatasetManifest) -> None:
    config = make_config(pretrain={"queue_capacity": 64})
    state = PretrainState.create(config)
    cache = RenderCache(config.render, seed=config.seed)
    assert len(state.queue) == 0
    seen_features, seen_ids = [], []

    for k in range(1, 4):
        batch = sample_batch(synthetic_dataset, cache, config.pretrain, step_seed=k)
        with torch.no_grad():
            seen_features += [
                encode_quality(batch.positives1, state.key),
                encode_quality(batch.positives2, state.key),
                encode_quality(batch.negatives[batch.negative_mask], state.key),
            ]
        ids = torch.from_numpy(batch.content_ids).long()
        valid = torch.from_numpy(batch.negative_mask.reshape(-1))
        seen_ids += [ids, ids, ids.repeat_interleave(batch.negative_mask.shape[1])[valid]]

        train_step(state, batch, config)

        assert len(state.queue) == min(k * 4 * (2 + 4), 64)
        torch.testing.assert_close(state.queue.features, torch.cat(seen_features)[-64:])
        assert state.queue.content_ids.tolist() == torch.cat(seen_ids)[-64:].tolist()
    assert RANDOM_CONTENT_ID not in state.queue.content_ids.tolist()


def test_train_step_metrics_are_plain_floats_without_warnings(
    tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest
) -> None:
    state = PretrainState.create(tiny_experiment)
    cache = RenderCache(tiny_experiment.render, seed=tiny_experiment.seed)
    batch = sample_batch(synthetic_dataset, cache, tiny_experiment.pretrain, step_seed=2)

    with warnings.catch_warnings():
        warnings.simplefilter("error", UserWarning)
        metrics = train_step(state, batch, tiny_experiment)

    assert all(type(value) is float for value in metrics.values())


def test_queue_starts_empty_unless_random_init_is_requested(make_config) -> None:
    assert PretrainConfig().queue_init == "empty"
    assert len(PretrainState.create(make_config()).queue) == 0

    seeded = PretrainState.create(make_config(pretrain={"queue_init": "random"}))
    assert len(seeded.queue) == seeded.queue.capacity
    assert set(seeded.queue.content_ids.tolist()) == {RANDOM_CONTENT_ID}


def test_train_step_raises_on_divergence(
    tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest, monkeypatch: pytest.MonkeyPatch
) -> None:
    state = PretrainState.create(tiny_experiment)
    batch = sample_batch(synthetic_dataset, RenderCache(tiny_experiment.render), tiny_experiment.pretrain, 0)
    monkeypatch.setattr(
        "kalos.pretrain.batch_distortion_loss",
        lambda anchors, *args, **kwargs: anchors.sum(dim=1) * float("inf"),
    )
    with pytest.raises(DivergenceError):
        train_step(state, batch, tiny_experiment)


def test_pretrain_epochs_are_deterministic(
    tmp_path: Path, tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest
) -> None:
    def run(log: Path) -> list[dict]:
        state = PretrainState.create(tiny_experiment)
        cache = RenderCache(tiny_experiment.render, seed=tiny_experiment.seed)
        for _ in range(2):
            pretrain_epoch(state, synthetic_dataset, cache, tiny_experiment, log_path=log)
        return read_jsonl(log)

    first, second = run(tmp_path / "a.jsonl"), run(tmp_path / "b.jsonl")

    assert first == second
    assert [row["epoch"] for row in first] == [0, 1]
    assert all(math.isfinite(row["loss"]) for row in first)


def test_empty_queue_skips_content_loss(make_config, synthetic_dataset: DatasetManifest) -> None:
    config = make_config(pretrain={"queue_init": "empty", "steps_per_epoch": 1, "queue_capacity": 32})
    state = PretrainState.create(config)

    metrics = pretrain_epoch(state, synthetic_dataset, RenderCache(config.render), config)

    assert metrics["content_loss"] == 0.0
    assert metrics["queue_size"] == 4 * (2 + 4)


def test_checkpoint_resume_restores_state(
    tmp_path: Path, tiny_experiment: ExperimentConfig, synthetic_dataset: DatasetManifest
) -> None:
    state = PretrainState.create(tiny_experiment)
    pretrain_epoch(state, synthetic_dataset, RenderCache(tiny_experiment.render), tiny_experiment)
    path = state.save(tmp_path / "pretrain.npz", tiny_experiment)

    restored = PretrainState.load(path, tiny_experiment)

    assert (restored.step, restored.epoch) == (state.step, state.epoch)
    for (name, a), (_, b) in zip(state.query.named_parameters(), restored.query.named_parameters()):
        torch.testing.assert_close(a, b, msg=name)
    torch.testing.assert_close(restored.queue.features, state.queue.features)
    assert restored.queue.content_ids.tolist() == state.queue.content_ids.tolist()
    assert restored.scheduler.state_dict() == state.scheduler.state_dict()


def test_load_rejects_other_checkpoint_kinds(tmp_path: Path, tiny_experiment: ExperimentConfig) -> None:
    path = save_checkpoint(tmp_path / "other.npz", {}, {"kind": "finetune"})
    with pytest.raises(CheckpointError):
        PretrainState.load(path, tiny_experiment)


@pytest.mark.slow
def test_training_lowers_the_loss_on_a_fixed_batch(make_config, synthetic_dataset: DatasetManifest) -> None:
    config = make_config(pretrain={"lambda_weight": 1.0, "learning_rate": 0.05, "steps_per_epoch": 50, "epochs": 1})
    manifest = synthetic_dataset.subset([0, 1])
    cache = RenderCache(config.render, seed=config.seed)
    state = PretrainState.create(config)
    held_out = sample_batch(manifest, cache, config.pretrain, step_seed=999)

    def held_out_loss() -> float:
        with torch.no_grad():
            anchors = encode_quality(held_out.anchors, state.query)
            k1 = encode_quality(held_out.positives1, state.key)
            k2 = encode_quality(held_out.positives2, state.key)
            negatives = torch.stack([encode_quality(n, state.key) for n in held_out.negatives])
            mask = torch.from_numpy(held_out.negative_mask)
            r = torch.as_tensor(held_out.ratios, dtype=F64)
            return float(batch_distortion_loss(anchors, k1, k2, negatives, mask, r, config.pretrain.temperature).mean())

    before = held_out_loss()
    pretrain_epoch(state, manifest, cache, config)
    assert held_out_loss() < before
