import numpy as np
import pytest

from owdcl.encoder import (
    EncoderParams,
    GradientSet,
    PretrainConfig,
    backward,
    cross_entropy,
    forward,
    forward_batch,
    forward_logits,
    init_params,
    pretrain,
    read_checkpoint,
    sgd_step,
    write_checkpoint,
)
from owdcl.errors import DimensionMismatch, FormatError, InsufficientClassSamples

# recorded once from init_params(16, 8, 4, 3, default_rng(1337)) on linspace(0, 1, 16)
GOLDEN_FEATURES = [0.08927532169704679, -0.10357735724311017, -0.12225457255809635, -0.1197835506614956]
GOLDEN_LOGITS = [-0.042236336817269515, -0.10941822898601831, 0.04571998302170939]


def small_params(seed=0, d_in=5, h=4, d=3, m=2):
    return init_params(d_in, h, d, m, np.random.default_rng(seed))


def zero_params(d_in=4, h=3, d=2, m=2):
    return EncoderParams(np.zeros((d_in, h)), np.zeros(h), np.zeros((h, d)), np.zeros(d), np.zeros((d, m)))


def numeric_grad(f, params, eps=1e-6):
    out = []
    for name in ("w1", "b1", "w2", "b2", "head"):
        t = getattr(params, name)
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + eps
            fp = f(params)
            t[idx] = orig - eps
            fm = f(params)
            t[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def test_zero_weights_give_zero_features():
    p = zero_params()
    np.testing.assert_array_equal(forward(p, np.random.default_rng(1).uniform(size=4)), np.zeros(2))


def test_basis_probe_reads_first_weight_row():
    m = np.random.default_rng(2).uniform(-0.9, 0.9, size=(3, 3))
    p = EncoderParams(np.arctanh(m), np.zeros(3), np.eye(3), np.zeros(3), np.eye(3))
    np.testing.assert_allclose(forward(p, [1.0, 0.0, 0.0]), m[0], atol=1e-12)


def test_zero_head_gives_zero_logits():
    p = small_params()
    p.head[:] = 0.0
    np.testing.assert_array_equal(forward_logits(p, np.ones(5)), np.zeros(2))


def test_orthonormal_head_picks_matching_row():
    p = EncoderParams(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)), np.array([0.0, 1.0, 0.0]), np.eye(3))
    assert int(np.argmax(forward_logits(p, np.zeros(3)))) == 1


def test_golden_snapshot():
    p = init_params(16, 8, 4, 3, np.random.default_rng(1337))
    x = np.linspace(0.0, 1.0, 16)
    np.testing.assert_allclose(forward(p, x), GOLDEN_FEATURES, rtol=0, atol=1e-14)
    np.testing.assert_allclose(forward_logits(p, x), GOLDEN_LOGITS, rtol=0, atol=1e-14)


def test_forward_is_pure():
    p = small_params()
    x = np.random.default_rng(4).uniform(size=(6, 5))
    assert forward_batch(p, x).features.tobytes() == forward_batch(p, x).features.tobytes()


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(small_params(), np.ones(7))
    with pytest.raises(DimensionMismatch):
        forward_logits(small_params(), np.ones((2, 7)))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = small_params(5)
    x = rng.uniform(size=(6, 5))
    g = rng.normal(size=(6, 3))
    analytic = backward(p, forward_batch(p, x), g)
    numeric = numeric_grad(lambda q: float((forward_batch(q, x).features * g).sum()), p)
    for a, n in zip(analytic.tensors()[:4], numeric[:4]):
        assert np.all(np.abs(a - n) / (np.abs(a) + 1e-6) < 1e-3)


def test_cross_entropy_gradient_includes_head():
    rng = np.random.default_rng(6)
    p = small_params(6)
    x = rng.uniform(size=(6, 5))
    y = rng.integers(0, 2, size=6)
    _, analytic = cross_entropy(p, x, y)
    numeric = numeric_grad(lambda q: cross_entropy(q, x, y)[0], p)
    for a, n in zip(analytic.tensors(), numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)


def test_constant_loss_gives_zero_gradients():
    p = small_params()
    grads = backward(p, forward_batch(p, np.ones((3, 5))), np.zeros((3, 3)))
    assert all(not t.any() for t in grads.tensors())


def test_sgd_examples():
    p = small_params()
    assert sgd_step(p, GradientSet.zeros_like(p), 0.0).equals(p)
    one = EncoderParams(np.ones((1, 1)), np.ones(1), np.ones((1, 1)), np.ones(1), np.ones((1, 1)))
    grad = GradientSet(*(2.0 * t for t in one.tensors()))
    stepped = sgd_step(one, grad, 0.1)
    assert stepped.w1[0, 0] == pytest.approx(0.8)


def test_sgd_two_steps_equal_one_summed_step():
    p = small_params()
    rng = np.random.default_rng(8)
    g1 = GradientSet(*(rng.normal(size=t.shape) for t in p.tensors()))
    g2 = GradientSet(*(rng.normal(size=t.shape) for t in p.tensors()))
    two = sgd_step(sgd_step(p, g1, 0.1), g2, 0.1)
    one = sgd_step(p, g1 + g2, 0.1)
    for a, b in zip(two.tensors(), one.tensors()):
        np.testing.assert_allclose(a, b, atol=1e-14)


def separable_toy(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 0.4, size=(n, 4))
    labels = np.repeat([1, 2], n // 2)
    x[labels == 2, 0] += 0.6
    return x, labels


def test_pretrain_separable_toy():
    x, y = separable_toy()
    out = pretrain(x, y, 2, PretrainConfig(hidden=8, feature_dim=4, epochs=40))
    assert out.train_accuracy >= 0.95
    assert out.prototypes.shape == (2, 4)
    np.testing.assert_allclose(np.linalg.norm(out.prototypes, axis=1), 1.0, atol=1e-12)


def test_pretrain_duplicated_class_prototype():
    x, y = separable_toy()
    x[y == 1] = x[0]
    out = pretrain(x, y, 2, PretrainConfig(hidden=8, feature_dim=4, epochs=3))
    f = forward(out.params, x[0])
    np.testing.assert_allclose(out.prototypes[0], f / np.linalg.norm(f), atol=1e-12)


def test_pretrain_single_class():
    x = np.random.default_rng(0).uniform(size=(5, 4))
    out = pretrain(x, np.ones(5, dtype=int), 1, PretrainConfig(hidden=4, feature_dim=3, epochs=2))
    assert out.prototypes.shape == (1, 3)


def test_pretrain_is_deterministic():
    x, y = separable_toy()
    cfg = PretrainConfig(hidden=8, feature_dim=4, epochs=5)
    a, b = pretrain(x, y, 2, cfg), pretrain(x, y, 2, cfg)
    assert a.params.equals(b.params)


def test_pretrain_insufficient_samples():
    x = np.zeros((3, 4))
    with pytest.raises(InsufficientClassSamples):
        pretrain(x, np.array([1, 1, 2]), 2)
    with pytest.raises(InsufficientClassSamples):
        pretrain(x, np.array([1, 1, 3]), 2)


def test_checkpoint_round_trip(tmp_path):
    x, y = separable_toy()
    params = pretrain(x, y, 2, PretrainConfig(hidden=8, feature_dim=4, epochs=2)).params
    path = tmp_path / "m.owck"
    write_checkpoint(path, params)
    assert read_checkpoint(path).equals(params)
    data = path.read_bytes()
    assert data[:4] == b"OWCK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 5


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + (2).to_bytes(4, "little") + d[8:],
    lambda d: d[:-3],
    lambda d: d + b"\0",
    lambda d: d[:10],
])
def test_checkpoint_format_errors(tmp_path, mutate):
    path = tmp_path / "m.owck"
    write_checkpoint(path, small_params())
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        read_checkpoint(path)
