"""Model tests: forward semantics, ranking criterion, training determinism,
checkpoint round-trips and parse errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fovlab.data import POST_SOFTMAX, PRE_SOFTMAX, BoundingBox, LabeledImage
from fovlab.model import (Checkpoint, CheckpointError, ModelSpec, TrainConfig,
                          build_network, conv_spec, dense_spec, desk_model_spec,
                          load_checkpoint, maxpool_spec, predict_scores, relu_spec,
                          save_checkpoint, top_k_error, train)


def toy_spec(k=4, hw=8):
    return ModelSpec((3, hw, hw),
                     (conv_spec(4, 3), relu_spec(), maxpool_spec(), dense_spec(k)),
                     num_classes=k)


def toy_images(n=24, k=4, hw=8, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % k
        img = r.uniform(0, 60, (3, hw, hw)).astype(np.float32)
        # bright square whose channel and position encode the class
        y = 1 if label // 3 == 0 else 4
        img[label % 3, y:y + 3, y:y + 3] = 220.0
        out.append(LabeledImage(img, label, [BoundingBox(y, y, 3, 3)], f"t{i:03d}"))
    return out


def test_zero_weight_model_gives_equal_scores():
    net = build_network(toy_spec(), seed=0)
    for p in net.parameters():
        p *= 0.0
    scores = net.forward(np.random.default_rng(0).uniform(0, 255, (3, 8, 8))
                         .astype(np.float32))
    assert np.allclose(scores, scores[0])


def test_pre_post_softmax_agree_on_top1():
    net = build_network(toy_spec(), seed=1)
    r = np.random.default_rng(2)
    for _ in range(100):
        img = r.uniform(0, 255, (3, 8, 8)).astype(np.float32)
        pre = predict_scores(net, img, PRE_SOFTMAX)
        post = predict_scores(net, img, POST_SOFTMAX)
        assert np.argmax(pre.scores) == np.argmax(post.scores)
        assert post.scores.sum() == pytest.approx(1.0, abs=1e-5)
        assert (post.scores >= 0).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10, unique=True))
def test_softmax_preserves_ranking(vals):
    from hypothesis import assume

    from fovlab.data import softmax
    v = np.array(vals, dtype=np.float32)
    gaps = np.diff(np.sort(v))
    assume(gaps.size == 0 or gaps.min() > 1e-3)  # float32-distinguishable scores
    assert np.array_equal(np.argsort(-v, kind="stable"),
                          np.argsort(-softmax(v), kind="stable"))


def test_input_shape_rejected():
    net = build_network(toy_spec(), seed=0)
    with pytest.raises(ValueError, match="input shape"):
        net.forward(np.zeros((3, 9, 9), dtype=np.float32))


# ---------------------------------------------------------------------------
# top-k error


def test_top_k_argmax_is_correct():
    scores = np.array([0.1, 0.9, 0.3])
    assert top_k_error(scores, 1, 1) == 0
    assert top_k_error(scores, 0, 1) == 1


def test_top_k_lowest_score_misses_k_minus_1():
    scores = np.array([0.5, 0.4, 0.3, 0.1])
    assert top_k_error(scores, 3, 3) == 1


def test_top_k_hand_ranking():
    assert top_k_error(np.array([0.1, 0.4, 0.3, 0.2]), 2, 2) == 0


def test_top_k_tie_prefers_lower_index():
    scores = np.array([0.5, 0.5, 0.1])
    assert top_k_error(scores, 0, 1) == 0
    assert top_k_error(scores, 1, 1) == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8),
       st.data())
def test_top_k_monotone_in_k(vals, data):
    scores = np.array(vals)
    label = data.draw(st.integers(0, len(vals) - 1))
    errs = [top_k_error(scores, label, k) for k in range(1, len(vals) + 1)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))
    assert errs[-1] == 0  # k == number of classes always contains the label


# ---------------------------------------------------------------------------
# backprop surface


def test_backprop_identity_dense_layer():
    spec = ModelSpec((2,) + (1, 1), (dense_spec(2),), 2, input_scale=1.0)
    net = build_network(spec, seed=0)
    net.layers[0].weights = np.eye(2, dtype=np.float32)
    net.layers[0].bias = np.zeros(2, dtype=np.float32)
    x = np.array([3.0, 4.0], dtype=np.float32).reshape(2, 1, 1)
    _, trace = net.forward_trace(x)
    grad, _ = net.backprop(trace, np.array([1.0, 0.0], dtype=np.float32))
    np.testing.assert_array_equal(grad.reshape(-1), [1.0, 0.0])


def test_backprop_zero_upstream_gives_zero_gradient():
    net = build_network(toy_spec(), seed=3)
    x = np.random.default_rng(0).uniform(0, 255, (3, 8, 8)).astype(np.float32)
    _, trace = net.forward_trace(x)
    grad, _ = net.backprop(trace, np.zeros(4, dtype=np.float32))
    assert not grad.any()


def test_backprop_upstream_shape_checked():
    net = build_network(toy_spec(), seed=3)
    _, trace = net.forward_trace(np.zeros((3, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="upstream"):
        net.backprop(trace, np.zeros(5, dtype=np.float32))


def test_network_gradient_matches_finite_difference():
    # two-stage conv+relu net, directional derivative vs central differences
    spec = ModelSpec((2, 8, 8), (conv_spec(3, 3), relu_spec(), maxpool_spec(),
                                 conv_spec(4, 3), relu_spec(), dense_spec(5)), 5)
    net = build_network(spec, seed=7)
    r = np.random.default_rng(8)
    x = r.uniform(0, 255, (2, 8, 8))
    label = 2
    _, trace = net.forward_trace(x.astype(np.float32))
    grad = net.class_grad(trace, label)
    h = 1e-2
    for _ in range(10):
        d = r.standard_normal(x.shape)
        d /= np.abs(d).max()
        num = (net.forward(x + h * d)[label] - net.forward(x - h * d)[label]) / (2 * h)
        ana = float(np.sum(grad * d))
        assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6)


def test_trace_replay_is_bit_identical():
    net = build_network(toy_spec(), seed=4)
    x = np.random.default_rng(1).uniform(0, 255, (3, 8, 8)).astype(np.float32)
    _, trace = net.forward_trace(x)
    assert len(trace.inputs) == len(net.layers)
    for layer, xin, xout in zip(net.layers, trace.inputs, trace.outputs):
        np.testing.assert_array_equal(layer.forward(xin), xout)


# ---------------------------------------------------------------------------
# training


def test_train_lr_zero_keeps_initial_weights():
    images = toy_images()
    spec = toy_spec()
    cfg = TrainConfig(epochs=1, lr=0.0, momentum=0.9, batch=8, seed=5, augment=False)
    ckpt = train(spec, images, [], cfg)
    init = build_network(spec, seed=5)
    for a, b in zip(ckpt.network.parameters(), init.parameters()):
        np.testing.assert_array_equal(a, b)


def test_train_same_seed_bit_identical():
    images = toy_images()
    cfg = TrainConfig(epochs=2, lr=0.05, momentum=0.9, batch=8, seed=6)
    a = train(toy_spec(), images, [], cfg)
    b = train(toy_spec(), images, [], cfg)
    for pa, pb in zip(a.network.parameters(), b.network.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_train_learns_toy_task():
    images = toy_images(n=48)
    cfg = TrainConfig(epochs=18, lr=0.05, momentum=0.9, batch=8, seed=7, augment=False)
    ckpt = train(toy_spec(), images[:36], images[36:], cfg)
    assert ckpt.metadata["final_accuracy"] >= 0.85


def test_train_rejects_bad_labels():
    images = toy_images()
    images[0].label = 99
    with pytest.raises(ValueError, match="label"):
        train(toy_spec(), images, [], TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_exact(tmp_path):
    net = build_network(toy_spec(), seed=9)
    ckpt = Checkpoint(net, {"epochs": 3, "seed": 9, "final_accuracy": 0.5})
    path = tmp_path / "m.fovn"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.metadata == ckpt.metadata
    r = np.random.default_rng(10)
    for _ in range(10):
        img = r.uniform(0, 255, (3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(back.network.forward(img), net.forward(img))


def test_checkpoint_truncated_file(tmp_path):
    net = build_network(toy_spec(), seed=9)
    path = tmp_path / "m.fovn"
    save_checkpoint(Checkpoint(net, {}), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    net = build_network(toy_spec(), seed=9)
    path = tmp_path / "m.fovn"
    save_checkpoint(Checkpoint(net, {}), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="unsupported version"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.fovn"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_spec_json_round_trip():
    spec = desk_model_spec()
    assert ModelSpec.from_json(spec.to_json()) == spec
