"""Batch sampling, the multi-similarity loss against closed-form values,
optimizer semantics, the schedule, and short end-to-end training runs."""

import math

import numpy as np
import pytest

from boq.data import PlaceDataset, SyntheticPlaceConfig, generate_synthetic
from boq.errors import ContractError, DatasetError, DivergenceError, NumericsError
from boq.model import ModelConfig, load_checkpoint, save_checkpoint
from boq.tensor import Tensor, finite_difference_check
from boq.training import (
    BatchSpec,
    LRSchedule,
    MSLossParams,
    OptimizerState,
    adamw_step,
    lr_at,
    multi_similarity_loss,
    sample_batch,
    train,
)


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    cfg = SyntheticPlaceConfig(
        num_places=4,
        views_per_place=8,
        query_views=2,
        ref_views=2,
        image_size=16,
        seed=31,
    )
    manifest = generate_synthetic(cfg, tmp_path_factory.mktemp("toy"))
    return PlaceDataset(manifest)


def tiny_model_config():
    return ModelConfig(
        stem_channels=(2, 3, 4),
        model_dim=8,
        num_heads=2,
        channel_proj=4,
        row_proj=2,
        queries_per_block=2,
    )


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def test_sample_batch_contract(toy_dataset, rng):
    spec = BatchSpec(places_per_batch=2, images_per_place=4)
    batch = sample_batch(toy_dataset.manifest, spec, rng)
    assert len(batch) == 8
    by_place = {}
    for rec in batch:
        by_place.setdefault(rec.place_id, []).append(rec.id)
    assert len(by_place) == 2
    for ids in by_place.values():
        assert len(ids) == 4 and len(set(ids)) == 4


def test_sample_batch_deterministic(toy_dataset):
    spec = BatchSpec(places_per_batch=2, images_per_place=2)
    a = sample_batch(toy_dataset.manifest, spec, np.random.default_rng(5))
    b = sample_batch(toy_dataset.manifest, spec, np.random.default_rng(5))
    assert [r.id for r in a] == [r.id for r in b]


def test_sample_batch_insufficient_places(toy_dataset, rng):
    spec = BatchSpec(places_per_batch=10, images_per_place=2)
    with pytest.raises(DatasetError, match="10"):
        sample_batch(toy_dataset.manifest, spec, rng)


def test_sample_batch_place_frequency_uniform(toy_dataset):
    # Each batch draws 2 of the 4 places without replacement; over many
    # batches the per-place inclusion count is Binomial(n, 1/2).
    spec = BatchSpec(places_per_batch=2, images_per_place=2)
    rng = np.random.default_rng(123)
    n = 600
    counts = {}
    for _ in range(n):
        for rec in sample_batch(toy_dataset.manifest, spec, rng):
            counts[rec.place_id] = counts.get(rec.place_id, 0) + 1
    expected = n * 0.5 * 2  # inclusion prob 1/2, 2 images when included
    sigma = math.sqrt(n * 0.5 * 0.5) * 2
    for pid, c in counts.items():
        assert abs(c - expected) <= 3 * sigma, (pid, c, expected)


# ---------------------------------------------------------------------------
# multi-similarity loss
# ---------------------------------------------------------------------------


def test_loss_orthogonal_negatives_closed_form():
    # Two anchors from different places with orthogonal descriptors: no
    # positives exist, so each anchor keeps all its negatives, and the
    # per-anchor term is (1/beta) * log(1 + exp(beta * (0 - threshold))).
    descs = Tensor(np.eye(2, 8))
    loss = multi_similarity_loss(descs, ["a", "b"], MSLossParams())
    want = math.log(1.0 + math.exp(50.0 * (0.0 - 0.5))) / 50.0
    assert loss.item() < 1e-12  # effectively zero
    assert abs(loss.item() - want) <= 1e-4 * want


def test_loss_identical_positives_closed_form():
    # Two anchors from one place with identical descriptors: no negatives,
    # so each keeps its positive; term = log(1 + exp(-(1 - 0.5))).
    row = np.zeros(8)
    row[0] = 1.0
    descs = Tensor(np.stack([row, row]))
    loss = multi_similarity_loss(descs, ["a", "a"], MSLossParams())
    want = math.log(1.0 + math.exp(-0.5))
    assert abs(loss.item() - want) < 1e-12
    assert abs(want - 0.4741) < 5e-5


def test_loss_gradient_finite_differences(rng):
    descs = rng.normal(size=(8, 16))
    descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    places = ["a", "a", "b", "b", "c", "c", "d", "d"]
    x = Tensor(descs, requires_grad=True)
    err = finite_difference_check(
        lambda t: multi_similarity_loss(t, places, MSLossParams()), x
    )
    assert err < 1e-4


def test_loss_permutation_invariance_is_exact(rng):
    descs = rng.normal(size=(12, 8))
    descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    places = [f"p{i % 3}" for i in range(12)]
    base = multi_similarity_loss(Tensor(descs), places, MSLossParams()).item()
    for _ in range(5):
        perm = rng.permutation(12)
        shuffled = multi_similarity_loss(
            Tensor(descs[perm]), [places[i] for i in perm], MSLossParams()
        ).item()
        assert shuffled == base  # bitwise


def test_loss_zero_for_separated_margin_satisfied_batch():
    # Positives far above every negative plus the margin, negatives far
    # below every positive minus the margin: mining empties both sets for
    # every anchor and the loss is exactly zero.
    theta = 0.1
    a1 = np.array([1.0, 0.0, 0.0, 0.0])
    a2 = np.array([math.cos(theta), math.sin(theta), 0.0, 0.0])
    b1 = np.array([0.0, 0.0, 1.0, 0.0])
    b2 = np.array([0.0, 0.0, math.cos(theta), math.sin(theta)])
    descs = Tensor(np.stack([a1, a2, b1, b2]))
    loss = multi_similarity_loss(descs, ["a", "a", "b", "b"], MSLossParams())
    assert loss.item() == 0.0
    assert not loss.requires_grad  # nothing mined, nothing to train


def test_loss_all_same_place_uses_positive_terms_only(rng):
    descs = rng.normal(size=(4, 8))
    descs /= np.linalg.norm(descs, axis=1, keepdims=True)
    loss = multi_similarity_loss(Tensor(descs), ["p"] * 4, MSLossParams())
    assert loss.item() > 0.0


def test_loss_rejects_non_unit_rows(rng):
    descs = rng.normal(size=(4, 8)) * 3
    with pytest.raises(ContractError):
        multi_similarity_loss(Tensor(descs), ["a", "a", "b", "b"], MSLossParams())


def test_loss_rejects_tiny_batch():
    with pytest.raises(ContractError):
        multi_similarity_loss(Tensor(np.eye(1, 4)), ["a"], MSLossParams())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_identity(rng):
    p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    snap = p.data.copy()
    params = {"p": p}
    state = OptimizerState.create(params, weight_decay=0.0)
    p.grad = np.zeros((3, 3))
    for _ in range(5):
        adamw_step(params, state, lr=0.1)
    assert np.array_equal(p.data, snap)


def test_adamw_constant_gradient_update_approaches_lr():
    p = Tensor(0.0, requires_grad=True)
    params = {"p": p}
    state = OptimizerState.create(params, weight_decay=0.0)
    lr = 1e-3
    prev = float(p.data)
    for step in range(500):
        p.grad = np.asarray(2.5)
        adamw_step(params, state, lr)
        delta = prev - float(p.data)
        prev = float(p.data)
    # Bias-corrected m/sqrt(v) tends to 1 for a constant gradient.
    assert abs(delta - lr) < 0.01 * lr


def test_adamw_decay_only_is_exponential_shrink():
    p = Tensor(4.0, requires_grad=True)
    params = {"p": p}
    state = OptimizerState.create(params, weight_decay=0.01)
    lr = 0.1
    expected = 4.0
    for _ in range(25):
        p.grad = np.asarray(0.0)
        adamw_step(params, state, lr)
        expected = expected - lr * 0.01 * expected
        assert float(p.data) == expected


def test_adamw_nan_gradient_names_parameter(rng):
    p = Tensor(rng.normal(size=3), requires_grad=True)
    params = {"stem.conv0.w": p}
    state = OptimizerState.create(params)
    p.grad = np.array([1.0, float("nan"), 0.0])
    with pytest.raises(NumericsError, match="stem.conv0.w"):
        adamw_step(params, state, lr=1e-3)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


def test_lr_warmup_start():
    s = LRSchedule()
    assert abs(lr_at(0, s) - 2e-4 / 3) < 1e-12


def test_lr_first_post_warmup_epoch_is_base():
    s = LRSchedule()
    assert lr_at(3, s) == 2e-4


def test_lr_two_decays_at_epoch_13():
    s = LRSchedule()
    assert abs(lr_at(13, s) - 2e-4 * 0.3**2) < 1e-18


def test_lr_non_increasing_after_warmup_and_positive():
    s = LRSchedule()
    values = [lr_at(e, s) for e in range(s.max_epochs)]
    assert all(v > 0 for v in values)
    post = values[s.warmup_epochs :]
    assert all(a >= b for a, b in zip(post, post[1:]))


def test_lr_epoch_out_of_range():
    s = LRSchedule()
    with pytest.raises(ContractError):
        lr_at(40, s)
    with pytest.raises(ContractError):
        lr_at(-1, s)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_one_epoch_toy(toy_dataset, tmp_path):
    cfg = tiny_model_config()
    result = train(
        cfg,
        toy_dataset,
        BatchSpec(places_per_batch=2, images_per_place=2),
        MSLossParams(),
        LRSchedule(max_epochs=1),
        seed=0,
        steps_per_epoch=1,
    )
    assert len(result.metrics) == 1
    assert result.metrics[0].epoch == 0
    # Checkpoint round trip is bit-exact.
    path = tmp_path / "ck.boqt"
    save_checkpoint(path, result.params)
    loaded = load_checkpoint(path)
    for name, t in result.params.named_parameters().items():
        assert np.array_equal(t.data, loaded.named_parameters()[name].data)


def test_train_is_deterministic(toy_dataset):
    def run():
        result = train(
            tiny_model_config(),
            toy_dataset,
            BatchSpec(places_per_batch=2, images_per_place=2),
            MSLossParams(),
            LRSchedule(max_epochs=2),
            seed=7,
            steps_per_epoch=2,
        )
        return [m.format_line() for m in result.metrics]

    assert run() == run()


def test_train_freeze_stem(toy_dataset):
    cfg = tiny_model_config()
    result = train(
        cfg,
        toy_dataset,
        BatchSpec(places_per_batch=2, images_per_place=2),
        MSLossParams(),
        LRSchedule(max_epochs=1),
        seed=3,
        steps_per_epoch=1,
        freeze_stem=True,
    )
    import boq.model as model_mod

    fresh = model_mod.init_model_params(cfg, np.random.default_rng(3))
    for name, t in result.params.named_parameters().items():
        same = np.array_equal(t.data, fresh.named_parameters()[name].data)
        if name.startswith("stem."):
            assert same, name
        elif name.endswith((".w_q", ".queries", "feature_proj")):
            assert not same, name


def test_train_requires_enough_places(toy_dataset):
    with pytest.raises(DatasetError):
        train(
            tiny_model_config(),
            toy_dataset,
            BatchSpec(places_per_batch=16, images_per_place=2),
            MSLossParams(),
            LRSchedule(max_epochs=1),
            seed=0,
        )


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergence_keeps_last_good_state(toy_dataset):
    # An absurd learning rate drives parameters to overflow; the failure
    # must surface as DivergenceError carrying the best state so far.
    with pytest.raises(DivergenceError) as excinfo:
        train(
            tiny_model_config(),
            toy_dataset,
            BatchSpec(places_per_batch=2, images_per_place=2),
            MSLossParams(),
            LRSchedule(base_lr=1e160, warmup_epochs=0, max_epochs=3),
            seed=0,
            steps_per_epoch=2,
        )
    assert excinfo.value.result is not None
    assert excinfo.value.result.params is not None
