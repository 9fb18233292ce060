import numpy as np
import pytest
from numpy.testing import assert_allclose

from uabackprop.mitigation import accuracy, build_attention, downsample, nll, normalize_map, retrain_with_attention
from uabackprop.nn import TrainConfig, build_network, train

from conftest import small_conv_arch
from test_nn import toy_data


def test_attention_formula():
    values = np.array([[0.0, np.log(3.0)]])
    m = normalize_map(values)
    assert_allclose(m, [[0.25, 0.75]])
    att = build_attention(values, alpha=0.3)
    assert_allclose(att.values, [[0.25 * 0.75, 0.75 * 0.25]])
    assert att.alpha == 0.3
    assert np.all(build_attention(np.random.default_rng(0).standard_normal((5, 5))).values <= 0.25)


def test_attention_rejects_non_finite():
    with pytest.raises(ValueError):
        build_attention(np.array([[np.nan, 1.0]]))


def test_downsample_keeps_constant():
    att = build_attention(np.zeros((8, 8)))
    small = downsample(att, 2, 2)
    assert small.values.shape == (2, 2)
    assert_allclose(small.values, att.values[0, 0])


def test_zero_alpha_is_bit_identical_to_plain_training():
    x, y = toy_data()
    arch = small_conv_arch(classes=2)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=4)
    att = np.random.default_rng(1).uniform(size=(len(x), 6, 6))
    for placement in ("latent", "input"):
        a = retrain_with_attention(arch, x, y, att, 0.0, cfg, placement)
        b = train(build_network(arch, 4), x, y, cfg)
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_nonzero_alpha_changes_training_and_metrics_are_sane():
    x, y = toy_data()
    arch = small_conv_arch(classes=2)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=4)
    att = np.random.default_rng(1).uniform(size=(len(x), 6, 6))
    net = retrain_with_attention(arch, x, y, att, 0.5, cfg)
    plain = retrain_with_attention(arch, x, y, None, 0.0, cfg)
    assert not np.array_equal(net.params[0], plain.params[0])
    acc = accuracy(net, x, y, att, 0.5)
    assert 0.0 <= acc <= 1.0
    assert nll(net, x, y, att, 0.5) > 0


def test_retrain_validates_inputs():
    x, y = toy_data(8)
    arch = small_conv_arch(classes=2)
    with pytest.raises(ValueError, match="missing attention"):
        retrain_with_attention(arch, x, y, np.zeros((3, 6, 6)), 0.2, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        retrain_with_attention(arch, x, y, None, -0.1, TrainConfig(epochs=1))
