import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from uabackprop import tensor as T
from uabackprop.nn import (
    ArchSpec, EnsemblePosterior, ModelFormatError, TrainConfig, build_network, dumps_model, grad_wrt_input,
    grads_wrt_biases, load_model, loads_model, mlp_arch, predict_members, reference_arch, save_model, train,
    train_ensemble,
)
from uabackprop.tensor import Tensor

from conftest import random_ensemble, small_conv_arch
from gradcheck import numeric_grad, rel_error


def toy_data(n=48, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 1, 6, 6))
    y = (x[:, 0, :3].mean(axis=(1, 2)) > x[:, 0, 3:].mean(axis=(1, 2))).astype(int)
    return x, y


def test_reference_arch_shapes_and_param_count():
    net = build_network(reference_arch((1, 16, 16), 4), seed=0)
    out = net.forward(Tensor(np.zeros((3, 1, 16, 16))))
    assert out.shape == (3, 4)
    shapes = [p.shape for p in net.params]
    assert shapes == [(8, 1, 3, 3), (8,), (8, 8, 3, 3), (8,), (128, 32), (32,), (32, 4), (4,)]


def test_init_is_seeded_and_within_kaiming_bounds():
    arch = reference_arch()
    a, b, c = build_network(arch, 3), build_network(arch, 3), build_network(arch, 4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])
    assert np.abs(a.params[0]).max() <= np.sqrt(6.0 / 9)


def test_forward_rejects_wrong_input_shape():
    net = build_network(reference_arch(), 0)
    with pytest.raises(T.ShapeError):
        net.forward(Tensor(np.zeros((1, 1, 8, 8))))


def test_arch_spec_round_trip_and_invalid_layers():
    arch = reference_arch((3, 16, 16), 10)
    assert ArchSpec.from_dict(json.loads(json.dumps(arch.to_dict()))) == arch
    with pytest.raises(ValueError):
        build_network(ArchSpec((1, 4, 4), 2, ({"type": "warp"},)), 0)


def test_parameter_gradients_match_finite_differences():
    net = build_network(small_conv_arch(), 1)
    x, y = toy_data(4)
    params = net.param_tensors(requires_grad=True)
    loss = T.sum(T.log_softmax(net.forward(Tensor(x), params))[np.arange(4), y])
    T.backward(loss)
    for k, p in enumerate(net.params):
        def f(v, k=k):
            ps = [Tensor(q) for q in net.params]
            ps[k] = Tensor(v)
            return float(T.log_softmax(net.forward(Tensor(x), ps)).data[np.arange(4), y].sum())

        assert rel_error(params[k].grad, numeric_grad(f, p)) < 1e-5, k


def test_input_and_bias_gradient_helpers():
    net = build_network(small_conv_arch(), 2)
    x = np.random.default_rng(0).uniform(size=(1, 6, 6))
    gx = grad_wrt_input(net, x, 1)
    num = numeric_grad(lambda v: float(net.forward(Tensor(v[None])).data[0, 1]), x)
    assert rel_error(gx, num) < 1e-6
    gb = grads_wrt_biases(net, x, 1)
    assert [g.shape for g in gb] == [b.shape for b in net.bias_arrays()]
    # the final dense bias gradient of logit 1 is the indicator e_1
    assert_array_equal(gb[-1], np.eye(3)[1])
    with pytest.raises(IndexError):
        grad_wrt_input(net, x, 3)


def test_training_is_deterministic_and_lowers_loss():
    x, y = toy_data()
    cfg = TrainConfig(lr=0.1, epochs=15, batch_size=16, seed=5)
    hist_a, hist_b = [], []
    a = train(build_network(small_conv_arch(classes=2), 5), x, y, cfg, history=hist_a)
    b = train(build_network(small_conv_arch(classes=2), 5), x, y, cfg, history=hist_b)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert hist_a == hist_b
    assert np.mean(hist_a[-3:]) < np.mean(hist_a[:3])


def test_train_does_not_mutate_input_network():
    x, y = toy_data()
    net = build_network(small_conv_arch(classes=2), 0)
    before = [p.copy() for p in net.params]
    train(net, x, y, TrainConfig(epochs=1))
    assert all(np.array_equal(p, q) for p, q in zip(before, net.params))


def test_train_rejects_bad_data():
    net = build_network(small_conv_arch(classes=2), 0)
    x, y = toy_data(8)
    with pytest.raises(ValueError):
        train(net, x, y[:4], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(net, x, y + 5, TrainConfig(epochs=1))


def test_dropout_only_active_in_training():
    arch = ArchSpec((1, 4, 4), 2, ({"type": "flatten"}, {"type": "dense", "out": 8}, {"type": "relu"},
                                   {"type": "dropout"}))
    net = build_network(arch, 0)
    x = Tensor(np.ones((2, 1, 4, 4)))
    assert_array_equal(net.forward(x).data, net.forward(x, dropout=0.5).data)
    rng = np.random.default_rng(0)
    trained_pass = net.forward(x, train=True, dropout=0.5, rng=rng).data
    assert not np.array_equal(trained_pass, net.forward(x).data)


def test_zero_alpha_attention_is_identity():
    net = build_network(reference_arch(), 0)
    x = np.random.default_rng(1).uniform(size=(2, 1, 16, 16))
    att = np.random.default_rng(2).uniform(size=(2, 16, 16))
    plain = net.predict_logits(x)
    for placement in ("latent", "input"):
        assert np.array_equal(net.predict_logits(x, attention=att, alpha=0.0, placement=placement), plain)
        assert not np.array_equal(net.predict_logits(x, attention=att, alpha=0.5, placement=placement), plain)


def test_ensemble_predictions_and_permutation_equivariance():
    ens = random_ensemble(members=4, classes=5, seed=3)
    x = np.random.default_rng(0).uniform(size=(1, 6, 6))
    g = predict_members(ens, x)
    assert g.shape == (4, 5)
    assert abs(g.mean(axis=0).sum() - 1.0) < 1e-12
    perm = [2, 0, 3, 1]
    swapped = EnsemblePosterior([ens.members[k] for k in perm], [ens.seeds[k] for k in perm])
    assert_allclose(predict_members(swapped, x), g[perm], rtol=0, atol=0)


def test_train_ensemble_seeds_and_parallel_equivalence():
    x, y = toy_data(32)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=10)
    arch = small_conv_arch(classes=2)
    serial = train_ensemble(arch, x, y, cfg, 3)
    parallel = train_ensemble(arch, x, y, cfg, 3, jobs=3)
    assert serial.seeds == [10, 11, 12]
    for a, b in zip(serial.members, parallel.members):
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_model_file_round_trip(tmp_path):
    ens = random_ensemble(members=2, classes=3)
    path = tmp_path / "ens.uabp"
    save_model(ens, path)
    back = load_model(path)
    assert isinstance(back, EnsemblePosterior)
    assert back.seeds == ens.seeds and back.arch == ens.arch
    for a, b in zip(ens.members, back.members):
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    single = loads_model(dumps_model(ens.members[0]))
    assert single.seed == ens.members[0].seed


def test_model_file_layout_is_versioned_little_endian():
    net = build_network(mlp_arch((1, 2, 2), 2, (3,)), 0)
    blob = dumps_model(net)
    magic, major, minor, hlen = struct.unpack_from("<8sHHQ", blob)
    assert (magic, major, minor) == (b"UABPMDL\n", 1, 0)
    header = json.loads(blob[20 : 20 + hlen])
    assert header["blocks"] == [[4, 3], [3], [3, 2], [2]]
    first = np.frombuffer(blob, "<f8", count=1, offset=20 + hlen)[0]
    assert first == net.params[0].ravel()[0]


@pytest.mark.parametrize("mutate", ["magic", "major", "truncate", "extra", "header"])
def test_model_file_rejects_corruption(mutate):
    blob = bytearray(dumps_model(build_network(mlp_arch(), 0)))
    if mutate == "magic":
        blob[0:1] = b"X"
    elif mutate == "major":
        blob[8:10] = struct.pack("<H", 2)
    elif mutate == "truncate":
        blob = blob[:-8]
    elif mutate == "extra":
        blob += b"\0" * 8
    else:
        hlen = struct.unpack_from("<Q", blob, 12)[0]
        blob[20 : 20 + hlen] = b"{" + b" " * (hlen - 2) + b"}"
    with pytest.raises(ModelFormatError):
        loads_model(bytes(blob))
