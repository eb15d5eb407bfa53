import numpy as np
import pytest

import oracles
from subpool.data_io import SplitSpec, split_dataset
from subpool.gradcheck import check_pipeline, toy_config
from subpool.model import ModelConfig, ParamStore, backward, compute_loss, forward, init_params
from subpool.optim import AdamState, NonFiniteGradientError, adam_step
from subpool.pooling import RankDeficientError, flatten, pool_forward, FeatureMap
from subpool.retrieval import samples_from_arrays
from subpool.model import embed
from subpool.synthetic import generate_synthetic
from subpool.training import (
    PKSampler,
    TrainingError,
    evaluate_split,
    load_checkpoint,
    save_checkpoint,
    train,
)


def pixel_dataset(num_ids=4, seed=0):
    return generate_synthetic(num_ids=num_ids, images_per_id=4, channels=2, h=16, w=16,
                              seed=seed, spectrum_decay=0.8)


def test_config_validation():
    with pytest.raises(ValueError, match="pooling"):
        ModelConfig(pooling="max")
    with pytest.raises(ValueError, match="reduced_channels"):
        ModelConfig(reduced_channels=64)
    with pytest.raises(ValueError, match="rank"):
        ModelConfig(rank=17)
    with pytest.raises(ValueError, match="num_classes"):
        ModelConfig(num_classes=1)
    cfg = ModelConfig(input_shape=(1, 32, 64), input_mode="pixels")
    assert cfg.feature_shape == (64, 4, 8)
    assert ModelConfig(metric="euclidean").embedding_dim == 64
    assert ModelConfig(pooling="average").embedding_dim == 16


def test_zero_image_raises_rank_error():
    cfg = toy_config()
    params = init_params(cfg, 0)
    with pytest.raises(RankDeficientError, match="rank 0"):
        forward(np.zeros((1, *cfg.input_shape)), cfg, params)


def test_jitter_fallback_counts():
    cfg = toy_config()
    out = forward(np.zeros((2, *cfg.input_shape)), cfg, init_params(cfg, 0),
                  jitter_rng=np.random.default_rng(0))
    assert out.cache.jitter_count == 2
    assert np.all(np.isfinite(out.logits))


def test_hand_composed_logits(rng):
    cfg = ModelConfig(input_shape=(4, 2, 3), reduced_channels=4, rank=2, num_classes=3,
                      metric="euclidean")
    params = init_params(cfg, 1)
    params["reduce.weight"][...] = np.eye(4)
    params["classifier.bias"][...] = rng.standard_normal(3)
    x = rng.standard_normal((1, 4, 2, 3))
    out = forward(x, cfg, params)
    desc, _ = pool_forward(FeatureMap.from_array(x[0]), 2)
    expected = params["classifier.weight"] @ flatten(desc) + params["classifier.bias"]
    assert np.array_equal(out.logits[0], expected)


def test_identical_images_identical_logits(rng):
    cfg = toy_config()
    img = rng.standard_normal(cfg.input_shape)
    out = forward(np.stack([img, img]), cfg, init_params(cfg, 3))
    assert np.array_equal(out.logits[0], out.logits[1])


def test_forward_shape_mismatch():
    cfg = toy_config()
    with pytest.raises(ValueError, match="does not match"):
        forward(np.zeros((1, 2, 8, 8)), cfg, init_params(cfg, 0))


def test_zero_loss_gradient_gives_zero_grads(rng):
    cfg = toy_config()
    params = init_params(cfg, 0)
    out = forward(rng.standard_normal((4, *cfg.input_shape)), cfg, params)
    params.zero_grad()
    backward(out.cache, cfg, params)
    assert all(np.all(g == 0) for g in params.grads.values())


@pytest.mark.parametrize("metric,pooling", [("euclidean", "subspace"), ("projection", "subspace"),
                                            ("euclidean", "average")])
def test_pipeline_finite_differences(metric, pooling):
    result = check_pipeline(metric=metric, pooling=pooling)
    assert result.passed, result


def test_combined_loss_is_exact_sum(rng):
    cfg = ModelConfig(loss_mode="id+tl", triplet_weight=0.7, P=2, K=2, num_classes=4)
    params = init_params(cfg, 0)
    out = forward(rng.standard_normal((4, *cfg.input_shape)), cfg, params)
    loss = compute_loss(out, [0, 0, 3, 3], cfg)
    assert loss.total == loss.loss_id + 0.7 * loss.loss_tl
    assert loss.loss_id > 0 and loss.loss_tl >= 0


def test_adam_zero_gradient():
    params = ParamStore({"w": np.array([1.0, -2.0])})
    state = AdamState.for_params(params)
    adam_step(params, state)
    assert np.array_equal(params["w"], [1.0, -2.0])
    state.m["w"][...] = 1.0
    state.v["w"][...] = 1.0
    adam_step(params, state)
    assert np.all(state.m["w"] == 0.9) and np.all(state.v["w"] == 0.999)


def test_adam_single_step_closed_form():
    params = ParamStore({"w": np.array(0.5)})
    params.grads["w"][...] = 1.0
    state = AdamState.for_params(params, lr=2e-4)
    lr = adam_step(params, state)
    # m_hat = v_hat = 1 after bias correction.
    expected = 0.5 - 2e-4 * 1.0 / (1.0 + 1e-8)
    assert abs(float(params["w"]) - expected) <= 1e-12
    assert lr == 2e-4 and state.step == 1


def test_learning_rate_schedule():
    state = AdamState(lr=2e-4, decay_start=150, decay_factor=0.1, decay_span=150)
    assert state.learning_rate(150) == 2e-4
    assert state.learning_rate(151) == 2e-4 * 0.1 ** (1 / 150)
    assert state.learning_rate(300) == pytest.approx(2e-5, rel=1e-12)


def test_adam_rejects_non_finite():
    params = ParamStore({"a": np.ones(2), "b": np.ones(2)})
    params.grads["a"][...] = 1.0
    params.grads["b"][0] = np.nan
    state = AdamState.for_params(params)
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(params, state)
    assert np.all(params["a"] == 1.0) and state.step == 0


def test_frozen_conv_bitwise_unchanged():
    ds = pixel_dataset()
    cfg = ModelConfig(input_shape=(2, 16, 16), input_mode="pixels", conv_widths=(3, 4, 6),
                      reduced_channels=4, rank=2, num_classes=4, P=2, K=2, loss_mode="id+tl",
                      frozen=("conv",))
    init = train(ds, cfg, 0, seed=5).params
    trained = train(ds, cfg, 10, seed=5, steps_per_epoch=1)
    for name in init:
        same = np.array_equal(init[name], trained.params[name])
        assert same == name.startswith("conv"), name


def test_zero_epochs_is_initialization():
    ds = generate_synthetic(num_ids=10, seed=1)
    cfg = ModelConfig()
    result = train(ds, cfg, 0, seed=3)
    expected = init_params(cfg, int(np.random.default_rng(3).integers(2**31)))
    assert all(np.array_equal(result.params[n], expected[n]) for n in expected)
    assert result.log == []


def test_training_is_deterministic():
    ds = generate_synthetic(num_ids=10, seed=1)
    cfg = ModelConfig(loss_mode="id+tl")
    a = train(ds, cfg, 3, seed=3, steps_per_epoch=2)
    b = train(ds, cfg, 3, seed=3, steps_per_epoch=2)
    assert a.log == b.log
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)


def test_training_errors():
    ds = generate_synthetic(num_ids=4, images_per_id=3, seed=1)
    with pytest.raises(TrainingError, match="num_classes"):
        train(ds, ModelConfig(), 1, seed=0)
    with pytest.raises(TrainingError, match="only 0 qualify"):
        train(ds, ModelConfig(num_classes=4), 1, seed=0)
    with pytest.raises(TrainingError):
        PKSampler(np.repeat(np.arange(3), 4), 4, 4, np.random.default_rng(0))


def test_pk_sampler_batches():
    pids = np.repeat(np.arange(6), 5)
    sampler = PKSampler(pids, 3, 4, np.random.default_rng(0))
    idx = sampler.sample()
    counts = np.unique(pids[idx], return_counts=True)[1]
    assert len(idx) == 12 and len(set(idx.tolist())) == 12 and counts.tolist() == [4, 4, 4]


def test_snapshots_and_log_fields():
    ds = generate_synthetic(num_ids=10, seed=1)
    result = train(ds, ModelConfig(), 4, seed=0, steps_per_epoch=1,
                   eval_fn=lambda params, epoch: epoch, eval_every=2)
    assert [s["report"] for s in result.snapshots] == [2, 4]
    assert set(result.log[0]) == {"epoch", "loss", "loss_id", "loss_tl", "lr"}


def test_checkpoint_round_trip(tmp_path):
    ds = generate_synthetic(num_ids=10, seed=1)
    cfg = ModelConfig(loss_mode="id+tl")
    result = train(ds, cfg, 2, seed=0, steps_per_epoch=1)
    save_checkpoint(tmp_path, result.params, result.adam, cfg)
    params, adam, cfg2 = load_checkpoint(tmp_path)
    assert cfg2 == cfg and adam.step == result.adam.step
    for name in params:
        np.testing.assert_array_equal(params[name], result.params[name].astype(np.float32))
        np.testing.assert_array_equal(adam.m[name], result.adam.m[name].astype(np.float32))


def test_evaluate_split_matches_end_to_end_oracle():
    ds = generate_synthetic(num_ids=10, seed=8)
    split = split_dataset(ds.person_ids, ds.camera_ids, SplitSpec(0.5, 8))
    cfg = ModelConfig(num_classes=5)
    params = init_params(cfg, 0)
    report = evaluate_split(ds, split, cfg, params)
    emb = embed(ds.tensors, cfg, params)
    q = samples_from_arrays(emb[split.query], ds.person_ids[split.query], ds.camera_ids[split.query])
    g = samples_from_arrays(emb[split.gallery], ds.person_ids[split.gallery],
                            ds.camera_ids[split.gallery])
    expected = oracles.report(q, g)
    assert abs(report.map - expected["map"]) <= 1e-12
    np.testing.assert_allclose(report.cmc, expected["cmc"], atol=1e-12, rtol=0)
