"""Tests for the pair-relation network: shapes, gradients, training, files."""

import json

import numpy as np
import pytest

from leakscan.errors import ConfigError, DataError, NumericError
from leakscan.relnet import (
    EpochStats,
    PairSample,
    RELATION_ORDER,
    RelNetConfig,
    RelNetParams,
    RelationLabel,
    TrainConfig,
    forward,
    init_params,
    load_params,
    loss_and_grad,
    make_pair_sample,
    predict,
    predict_batch,
    save_params,
    train,
)
from leakscan.scene import BBox, ClassLabel, DetectedObject, MaskRaster, PolygonMask

TINY = RelNetConfig(grid=12, conv1_filters=3, conv2_filters=3, fc1_units=5, fc2_units=4)


def synth_sample(rng, config=TINY, labeled=True):
    """Random sample whose label is a simple function of its features."""
    values = rng.choice([0.0, 0.5, 1.0], size=(config.grid, config.grid))
    v_poi = rng.normal(size=config.pos_dim)
    v_cls = np.zeros(config.cls_dim)
    v_cls[rng.integers(0, config.cls_dim)] = 1.0
    label = None
    if labeled:
        dy = v_poi[-1]
        if dy < -0.4:
            label = RelationLabel.ABOVE
        elif dy < 0.4:
            label = RelationLabel.NEARBY
        else:
            label = RelationLabel.OTHER
    return PairSample(
        raster=MaskRaster(config.grid, config.grid, values),
        v_poi=v_poi,
        v_cls=v_cls,
        label=label,
    )


def synth_batch(rng, n, config=TINY, labeled=True):
    return [synth_sample(rng, config, labeled) for _ in range(n)]


def square_object(oid, label, x1, y1, size):
    return DetectedObject(
        id=oid,
        label=label,
        confidence=0.9,
        bbox=BBox(x1, y1, x1 + size, y1 + size),
        polygon=PolygonMask(
            ((x1, y1), (x1 + size, y1), (x1 + size, y1 + size), (x1, y1 + size))
        ),
    )


# ---------------------------------------------------------------------------
# Configuration and parameter containers
# ---------------------------------------------------------------------------

def test_default_config_shape_chain():
    cfg = RelNetConfig()
    assert cfg.grid == 28
    assert cfg.pool1_size == 14
    assert cfg.conv2_out == 6
    assert cfg.pool2_size == 3
    assert cfg.flat_dim == 3 * 3 * 256
    assert cfg.fc1_units == 1024 and cfg.fc2_units == 256
    shapes = cfg.tensor_shapes()
    assert shapes["conv1_w"] == (3, 3, 1, 256)
    assert shapes["conv2_w"] == (3, 3, 256, 256)
    assert shapes["fc1_w"] == (16, 1024)
    assert shapes["fc2_w"] == (1024 + 3 * 3 * 256, 256)
    assert shapes["head_w"] == (256, 3)


def test_config_validation():
    with pytest.raises(ConfigError, match="even"):
        RelNetConfig(grid=13)
    with pytest.raises(ConfigError, match="even"):
        RelNetConfig(grid=6)
    with pytest.raises(ConfigError, match="second pool"):
        RelNetConfig(grid=16)  # 16 -> pool 8 -> conv2 out 3, odd
    with pytest.raises(ConfigError, match="fc1_units"):
        RelNetConfig(fc1_units=0)


def test_init_params_deterministic_and_shaped():
    a = init_params(TINY, seed=3)
    b = init_params(TINY, seed=3)
    c = init_params(TINY, seed=4)
    for name, shape in TINY.tensor_shapes().items():
        assert a.tensors[name].shape == shape
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    assert any(
        not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors
    )
    assert a.tensors["conv1_b"].min() == a.tensors["conv1_b"].max() == 0.0


def test_params_validation_errors():
    good = init_params(TINY, seed=0)
    bad = {k: v.copy() for k, v in good.tensors.items()}
    bad["fc1_w"] = np.zeros((2, 2))
    with pytest.raises(DataError, match="tensor fc1_w: shape mismatch"):
        RelNetParams(TINY, bad)
    missing = {k: v.copy() for k, v in good.tensors.items()}
    del missing["head_b"]
    with pytest.raises(DataError, match="tensor set mismatch"):
        RelNetParams(TINY, missing)
    nan = {k: v.copy() for k, v in good.tensors.items()}
    nan["conv2_w"][0, 0, 0, 0] = np.nan
    with pytest.raises(DataError, match="tensor conv2_w: non-finite"):
        RelNetParams(TINY, nan)


def test_pair_sample_validation():
    with pytest.raises(DataError, match=r"\{0, 0.5, 1.0\}"):
        PairSample(
            raster=MaskRaster(2, 2, np.full((2, 2), 0.3)),
            v_poi=np.zeros(8),
            v_cls=np.zeros(8),
        )
    with pytest.raises(DataError, match="v_poi"):
        PairSample(
            raster=MaskRaster(2, 2, np.zeros((2, 2))),
            v_poi=np.array([np.inf] * 8),
            v_cls=np.zeros(8),
        )


def test_make_pair_sample_geometry():
    sub = square_object(0, ClassLabel.SUSPECTED_AREA, 40, 10, 20)  # higher up
    ref = square_object(1, ClassLabel.GROUND, 40, 60, 20)
    s = make_pair_sample(sub, ref, 100, 100, label=RelationLabel.ABOVE)
    vals = s.raster.values
    assert set(np.unique(vals)) <= {0.0, 0.5, 1.0}
    rows_subject = np.where((vals == 1.0).any(axis=1))[0]
    rows_reference = np.where((vals == 0.5).any(axis=1))[0]
    assert rows_subject.max() < rows_reference.min()  # subject drawn above
    assert s.label is RelationLabel.ABOVE
    assert s.feature_vector().shape == (16,)


def test_train_config_lr_schedule():
    cfg = TrainConfig(lr_initial=0.01, lr_final=0.001, epochs=10)
    assert cfg.lr_at(0) == 0.01
    assert cfg.lr_at(9) == pytest.approx(0.001)
    assert cfg.lr_at(4) == pytest.approx(0.01 + (0.001 - 0.01) * 4 / 9)
    assert TrainConfig(epochs=1).lr_at(0) == TrainConfig().lr_initial
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_initial=-0.1)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def test_forward_shapes_and_probabilities():
    rng = np.random.default_rng(0)
    params = init_params(TINY, seed=1)
    act = forward(params, synth_sample(rng))
    assert act.m_ctr1.shape == (TINY.pool1_size, TINY.pool1_size, TINY.conv1_filters)
    assert act.m_ctr2.shape == (TINY.pool2_size, TINY.pool2_size, TINY.conv2_filters)
    assert act.v1.shape == (TINY.fc1_units,)
    assert act.v2.shape == (TINY.fc2_units,)
    assert act.logits.shape == (3,)
    assert act.y.shape == (3,)
    assert act.y.sum() == pytest.approx(1.0)
    assert act.y.min() >= 0.0


def test_batch_matches_single_forward():
    rng = np.random.default_rng(1)
    params = init_params(TINY, seed=2)
    samples = synth_batch(rng, 7)
    labels, probs = predict_batch(params, samples)
    for i, s in enumerate(samples):
        lab, y = predict(params, s)
        assert labels[i] is lab
        # Batched matmul may re-associate sums; agreement is to float precision.
        np.testing.assert_allclose(probs[i], y, rtol=0, atol=1e-12)


def test_predict_tie_breaks_to_first_relation():
    params = init_params(TINY, seed=0)
    for name in params.tensors:
        params.tensors[name][...] = 0.0  # all logits identical
    rng = np.random.default_rng(2)
    lab, y = predict(params, synth_sample(rng))
    assert lab is RELATION_ORDER[0]
    np.testing.assert_allclose(y, [1 / 3] * 3)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = init_params(TINY, seed=5)
    batch = synth_batch(rng, 4)
    loss0, grads = loss_and_grad(params, batch)
    assert np.isfinite(loss0)
    h = 1e-6
    worst = 0.0
    for name, g in grads.tensors.items():
        flat = params.tensors[name].ravel()
        gflat = g.ravel()
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = loss_and_grad(params, batch)
            flat[idx] = orig - h
            lm, _ = loss_and_grad(params, batch)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(gflat[idx]), 1e-8)
            worst = max(worst, abs(fd - gflat[idx]) / denom)
    assert worst < 1e-5


def test_loss_and_grad_input_checks():
    rng = np.random.default_rng(4)
    params = init_params(TINY, seed=0)
    with pytest.raises(DataError, match="empty"):
        loss_and_grad(params, [])
    with pytest.raises(DataError, match="labeled"):
        loss_and_grad(params, [synth_sample(rng, labeled=False)])
    wrong_grid = synth_sample(rng, RelNetConfig(grid=28, conv1_filters=2,
                                                conv2_filters=2, fc1_units=2,
                                                fc2_units=2))
    with pytest.raises(DataError, match="raster size"):
        loss_and_grad(params, [wrong_grid])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(5)
    data = synth_batch(rng, 60)
    cfg = TrainConfig(lr_initial=0.01, lr_final=0.005, epochs=8, batch_size=16, seed=9)
    p0 = init_params(TINY, seed=6)
    trained, hist = train(p0, data, cfg)
    assert [h.epoch for h in hist] == list(range(8))
    assert hist[-1].loss < hist[0].loss
    assert 0.0 <= hist[-1].train_acc <= 1.0
    # The input parameters are not mutated.
    np.testing.assert_array_equal(p0.tensors["fc1_w"], init_params(TINY, 6).tensors["fc1_w"])
    trained2, hist2 = train(p0, data, cfg)
    assert hist2 == hist
    for name in trained.tensors:
        np.testing.assert_array_equal(trained.tensors[name], trained2.tensors[name])


def test_zero_lr_leaves_pure_weight_decay():
    rng = np.random.default_rng(6)
    data = synth_batch(rng, 10)
    cfg = TrainConfig(
        lr_initial=0.0, lr_final=0.0, epochs=3, batch_size=4, weight_decay=1e-3, seed=0
    )
    p0 = init_params(TINY, seed=7)
    trained, _ = train(p0, data, cfg)
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    n_steps = cfg.epochs * steps_per_epoch
    for name, p in p0.tensors.items():
        expect = p.copy()
        for _ in range(n_steps):
            expect *= 1.0 - cfg.weight_decay  # same op sequence, bit-identical
        np.testing.assert_array_equal(trained.tensors[name], expect)


def test_training_input_checks():
    rng = np.random.default_rng(7)
    params = init_params(TINY, seed=0)
    cfg = TrainConfig(epochs=1)
    with pytest.raises(DataError, match="empty"):
        train(params, [], cfg)
    one_class = [s for s in synth_batch(rng, 30) if s.label is RelationLabel.NEARBY]
    with pytest.raises(DataError, match="2 distinct labels"):
        train(params, one_class[:4], cfg)


def test_training_diverges_to_numeric_error():
    rng = np.random.default_rng(8)
    data = synth_batch(rng, 12)
    cfg = TrainConfig(lr_initial=1e9, lr_final=1e9, epochs=5, batch_size=4, seed=0)
    with pytest.raises(NumericError, match="non-finite loss"):
        with np.errstate(all="ignore"):
            train(init_params(TINY, seed=8), data, cfg)


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def test_weight_file_round_trip_bit_exact(tmp_path):
    params = init_params(TINY, seed=11)
    path = str(tmp_path / "w.json")
    save_params(params, path)
    again = load_params(path)
    assert again.config == params.config
    for name in params.tensors:
        np.testing.assert_array_equal(again.tensors[name], params.tensors[name])


def test_weight_file_errors(tmp_path):
    params = init_params(TINY, seed=12)
    path = str(tmp_path / "w.json")
    save_params(params, path)
    doc = json.loads(open(path).read())

    bad = dict(doc)
    bad["version"] = 99
    p = tmp_path / "v.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(DataError, match="version mismatch"):
        load_params(str(p))

    bad = json.loads(json.dumps(doc))
    bad["tensors"]["fc2_w"]["shape"] = [1, 1]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(DataError, match="tensor fc2_w: shape mismatch"):
        load_params(str(p))

    bad = json.loads(json.dumps(doc))
    del bad["tensors"]["head_w"]
    p = tmp_path / "m.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(DataError, match="tensor head_w: missing"):
        load_params(str(p))

    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(DataError, match="corrupt"):
        load_params(str(p))


def test_epoch_stats_is_plain_record():
    s = EpochStats(epoch=0, loss=1.0, train_acc=0.5)
    assert s == EpochStats(epoch=0, loss=1.0, train_acc=0.5)
