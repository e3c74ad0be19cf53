import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claas import nn
from claas.errors import ConfigError, DimensionError, FormatError, LabelError, RangeError
from claas.nn import Batch, ModelSpec, Params
from conftest import make_batch
from oracles import as_float64, central_differences, relative_error, relu_kink_crossed

DATA = Path(__file__).parent / "data"


def test_init_is_deterministic():
    spec = ModelSpec(4, (3,), 2, seed=42)
    assert nn.init_params(spec).bitwise_equal(nn.init_params(spec))


def test_init_biases_zero_and_shapes():
    p = nn.init_params(ModelSpec(input_dim=4, hidden_layers=(3,), num_classes=2))
    assert p.shapes() == [(4, 3), (3,), (3, 2), (2,)]
    assert all((b == 0.0).all() for b in p.biases)
    assert all(a.dtype == np.float32 for a in p)


def test_init_glorot_bounds():
    p = nn.init_params(ModelSpec(50, (30,), 10, seed=1))
    for w in p.weights:
        limit = math.sqrt(6 / sum(w.shape))
        assert np.abs(w).max() <= limit
        assert np.abs(w).max() > 0.9 * limit


@pytest.mark.parametrize(
    "kwargs",
    [
        {"input_dim": 0, "num_classes": 2},
        {"input_dim": 3, "num_classes": 1},
        {"input_dim": 3, "num_classes": 2, "hidden_layers": (0,)},
        {"input_dim": 3, "num_classes": 2, "activation": "gelu"},
        {"input_dim": 3, "num_classes": 2, "seed": -1},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


def test_spec_roundtrip():
    spec = ModelSpec(4, (5, 6), 3, "tanh", 2**64 - 1)
    assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_forward_zero_params():
    p = Params([np.zeros((3, 4), np.float32), np.zeros((4, 2), np.float32)], [np.zeros(4, np.float32), np.zeros(2, np.float32)])
    logits = nn.forward(p, Batch(np.ones((5, 3)), np.zeros(5)))
    assert logits.shape == (5, 2)
    assert (logits == 0).all()


def test_forward_single_layer_by_hand():
    w = np.array([[1.0, 2.0], [3.0, -1.0]], np.float32)
    b = np.array([0.5, -0.5], np.float32)
    p = Params([w], [b])
    logits = nn.forward(p, Batch([[2.0, 1.0]], [0]))
    # [2*1 + 1*3 + 0.5, 2*2 + 1*(-1) - 0.5]
    assert logits.tolist() == [[5.5, 2.5]]


def test_forward_golden():
    golden = json.loads((DATA / "golden_logits.json").read_text())
    spec = ModelSpec.from_dict(golden["spec"])
    p = nn.init_params(spec)
    for b in p.biases:
        b[:] = np.linspace(-0.1, 0.1, b.size, dtype=np.float32)
    x = np.random.default_rng(golden["input_seed"]).normal(size=golden["input_shape"]).astype(np.float32)
    expected = np.array([[float.fromhex(v) for v in row] for row in golden["logits_hex"]])
    np.testing.assert_allclose(nn.forward(p, x, spec.activation), expected, rtol=1e-6, atol=1e-7)


def test_forward_dimension_error():
    p = nn.init_params(ModelSpec(4, (), 2))
    with pytest.raises(DimensionError):
        nn.forward(p, Batch(np.zeros((2, 3)), [0, 1]))


def test_batch_validation():
    with pytest.raises(DimensionError):
        Batch(np.zeros((3, 2)), [0, 1])
    with pytest.raises(DimensionError):
        Batch(np.zeros(3), [0, 1, 2])


def test_uniform_loss_is_ln_c():
    p = Params([np.zeros((3, 4), np.float32)], [np.zeros(4, np.float32)])
    loss, _ = nn.loss_and_grad(p, make_batch(10, 3, 4))
    assert loss == pytest.approx(math.log(4), abs=1e-5)
    assert loss == pytest.approx(1.38629, abs=1e-5)


def test_label_out_of_range():
    p = nn.init_params(ModelSpec(3, (), 2))
    with pytest.raises(LabelError):
        nn.loss_and_grad(p, Batch(np.zeros((2, 3)), [0, 2]))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(17)
    spec = ModelSpec(4, (5,), 3, activation, seed=17)
    p = nn.init_params(spec).astype(np.float64)
    for b in p.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    batch = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    batch64 = as_float64(batch)
    x = batch64.features

    _, grads = nn.loss_and_grad(p, batch64, activation)
    numeric = central_differences(lambda: nn.loss_and_grad(p, batch64, activation)[0], list(p), h=1e-3)
    analytic = list(grads)
    if activation == "relu":
        masks = relu_kink_crossed(p, x)
        analytic = [np.where(m, 0, a) for a, m in zip(analytic, masks)]
        numeric = [np.where(m, 0, n) for n, m in zip(numeric, masks)]
    assert relative_error(analytic, numeric) < 1e-4


def test_float32_gradient_agrees_with_float64():
    spec = ModelSpec(6, (10,), 4, "relu", seed=2)
    p32 = nn.init_params(spec)
    batch = make_batch(16, 6, 4, seed=2)
    _, g32 = nn.loss_and_grad(p32, batch)
    _, g64 = nn.loss_and_grad(p32.astype(np.float64), as_float64(batch))
    assert relative_error(list(g32), list(g64)) < 1e-5
    assert all(g.dtype == np.float32 for g in g32)


def test_duplicated_batch_gives_same_loss_and_grads():
    p = nn.init_params(ModelSpec(5, (6,), 3, seed=8))
    batch = make_batch(7, 5, 3, seed=8)
    doubled = Batch(np.concatenate([batch.features] * 2), np.concatenate([batch.labels] * 2))
    l1, g1 = nn.loss_and_grad(p, batch)
    l2, g2 = nn.loss_and_grad(p, doubled)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_grad_shapes_match_params():
    p = nn.init_params(ModelSpec(5, (6, 2), 3))
    _, g = nn.loss_and_grad(p, make_batch(4, 5, 3))
    assert g.shapes() == p.shapes()


def test_sgd_arithmetic():
    p = Params([np.array([[1.0]], np.float32)], [np.array([1.0], np.float32)])
    g = Params([np.array([[0.5]], np.float32)], [np.array([0.5], np.float32)])
    out = nn.sgd_step(p, g, 0.1)
    assert out.weights[0][0, 0] == np.float32(1.0) - np.float32(0.1) * np.float32(0.5)
    assert out.weights[0][0, 0] == pytest.approx(0.95)
    assert p.weights[0][0, 0] == 1.0  # inputs untouched


def test_sgd_rejects_non_positive_lr():
    p = nn.init_params(ModelSpec(2, (), 2))
    with pytest.raises(ValueError):
        nn.sgd_step(p, p, 0.0)


def test_sgd_tiny_lr_leaves_params():
    p = nn.init_params(ModelSpec(3, (4,), 2, seed=1))
    _, g = nn.loss_and_grad(p, make_batch(5, 3, 2))
    out = nn.sgd_step(p, g, 1e-30)
    for a, b in zip(out, p):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-25)


def test_two_sgd_steps_reduce_loss_on_linear_model():
    p = nn.init_params(ModelSpec(4, (), 3, seed=4))
    batch = make_batch(32, 4, 3, seed=4)
    losses = []
    for _ in range(3):
        loss, g = nn.loss_and_grad(p, batch)
        losses.append(loss)
        p = nn.sgd_step(p, g, 0.05)
    assert losses[0] > losses[1] > losses[2]


def test_topk_examples():
    logits = np.array([[0.1, 0.5, 0.2, 0.9]])
    assert nn.topk_from_logits(logits, 2).tolist() == [[3, 1]]
    assert sorted(nn.topk_from_logits(logits, 4)[0].tolist()) == [0, 1, 2, 3]
    assert nn.topk_from_logits(np.array([[1.0, 1.0]]), 1).tolist() == [[0]]
    assert nn.topk_from_logits(np.array([[2.0, 1.0, 2.0, 1.0]]), 4).tolist() == [[0, 2, 1, 3]]


def test_predict_topk_range():
    p = nn.init_params(ModelSpec(3, (), 4))
    x = np.zeros((2, 3))
    with pytest.raises(RangeError):
        nn.predict_topk(p, x, 0)
    with pytest.raises(RangeError):
        nn.predict_topk(p, x, 5)
    assert nn.predict_topk(p, x, 4).shape == (2, 4)


def test_clbw_roundtrip_and_layout():
    p = nn.init_params(ModelSpec(3, (2,), 2, seed=5))
    blob = nn.serialize_params(p)
    assert blob[:4] == b"CLBW"
    assert struct.unpack_from("<II", blob, 4) == (1, 2)
    assert struct.unpack_from("<II", blob, 12) == (3, 2)
    first_w = np.frombuffer(blob, "<f4", 6, 20).reshape(3, 2)
    assert first_w.tobytes() == p.weights[0].tobytes()
    assert len(blob) == 12 + (8 + 4 * (6 + 2)) + (8 + 4 * (4 + 2))
    q = nn.deserialize_params(blob)
    assert q.bitwise_equal(p)
    assert nn.serialize_params(q) == blob


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-1], lambda b: b + b"\0", lambda b: b[:4] + struct.pack("<I", 9) + b[8:]])
def test_clbw_rejects_bad_blobs(mutate):
    blob = nn.serialize_params(nn.init_params(ModelSpec(3, (2,), 2)))
    with pytest.raises(FormatError):
        nn.deserialize_params(mutate(blob))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32),
    hidden=st.lists(st.integers(1, 6), max_size=2),
    classes=st.integers(2, 6),
    steps=st.integers(1, 4),
)
def test_training_is_bitwise_deterministic(seed, hidden, classes, steps):
    spec = ModelSpec(3, tuple(hidden), classes, seed=seed)
    batch = make_batch(9, 3, classes, seed=seed % 1000)

    def train():
        p = nn.init_params(spec)
        for _ in range(steps):
            _, g = nn.loss_and_grad(p, batch)
            p = nn.sgd_step(p, g, 0.1)
        return p

    a, b = train(), train()
    assert a.bitwise_equal(b)
    assert a.all_finite()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), classes=st.integers(2, 8))
def test_topk_hits_are_nested(seed, classes):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(20, classes)).round(1)  # rounding forces ties
    labels = rng.integers(0, classes, 20)
    prev = np.zeros(20, dtype=bool)
    for k in range(1, classes + 1):
        top = nn.topk_from_logits(logits, k)
        assert all(len(set(row)) == k for row in top.tolist())
        hit = (top == labels[:, None]).any(axis=1)
        assert (hit | ~prev).all()  # every earlier hit is still a hit
        prev = hit
    assert prev.all()


@settings(max_examples=20, deadline=None)
@given(classes=st.integers(2, 50), n=st.integers(1, 30))
def test_uniform_prediction_loss(classes, n):
    p = Params([np.zeros((2, classes), np.float32)], [np.zeros(classes, np.float32)])
    loss, _ = nn.loss_and_grad(p, make_batch(n, 2, classes))
    assert abs(loss - math.log(classes)) < 1e-5
