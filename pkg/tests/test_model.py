import numpy as np
import pytest

from invforge import autodiff as ad
from invforge.autodiff import Tensor
from invforge.errors import ConfigError, DimensionError
from invforge.losses import l_dec, l_dis, l_pred
from invforge.model import (
    ArchitectureSpec,
    LayerSpec,
    M1,
    M2,
    build_architecture,
    decode,
    disentangle_forward,
    encode,
    encode_full,
    forward,
    init_model,
    mnist_architecture,
    noisy_transform,
    predict,
)


def tiny(variant="full", **kw):
    opts = dict(embedding_activation="linear", decoder_output="linear", variant=variant)
    opts.update(kw)
    return build_architecture(5, 3, 2, 3, [], [4], [], **opts)


def zero_params(model):
    for _, t in model.params.items():
        t.data[...] = 0


class TestArchitecture:
    def test_mnist_shapes(self):
        arch = mnist_architecture()
        assert arch.encoder_layers[-1].output_dim == 256
        assert arch.dis1_layers[0].input_dim == 128 and arch.dis1_layers[0].output_dim == 128
        assert arch.decoder_layers[0].input_dim == 256 and arch.decoder_layers[-1].output_dim == 784

    def test_encoder_width_must_match_split(self):
        arch = tiny()
        with pytest.raises(ConfigError):
            ArchitectureSpec(**{**arch.__dict__, "dim_e1": 3})

    def test_bad_layer(self):
        with pytest.raises(ConfigError):
            LayerSpec(0, 3)
        with pytest.raises(ConfigError):
            LayerSpec(2, 3, "swish")

    def test_dict_round_trip(self):
        arch = mnist_architecture(variant="b1")
        assert ArchitectureSpec.from_dict(arch.to_dict()) == arch

    def test_param_prefixes_partition(self):
        model = init_model(tiny(), 0)
        assert set(model.m1_names()) | set(model.m2_names()) == set(model.params.names())
        assert not set(model.m1_names()) & set(model.m2_names())
        for name in model.params:
            assert sum(name.startswith(c + ".") for c in M1 + M2) == 1

    def test_b0_has_unsplit_predictor(self):
        arch = tiny("b0")
        assert arch.predictor_layers[0].input_dim == 5
        assert not arch.decoder_layers and not arch.dis1_layers


class TestEncode:
    def test_zero_weights(self):
        model = init_model(tiny(), 0)
        zero_params(model)
        emb = encode(model, np.ones((4, 5), np.float32))
        assert (emb.e1.data == 0).all() and (emb.e2.data == 0).all()

    def test_shapes(self):
        emb = encode(init_model(tiny(), 0), np.ones((4, 5), np.float32))
        assert emb.e1.shape == (4, 2) and emb.e2.shape == (4, 3)

    def test_identity_encoder_splits_in_order(self):
        model = init_model(tiny(), 0)
        model.params["enc.layer0.weight"].data[...] = np.eye(5)
        x = np.arange(20, dtype=np.float32).reshape(4, 5)
        emb = encode(model, x)
        np.testing.assert_array_equal(emb.e1.data, x[:, :2])
        np.testing.assert_array_equal(emb.e2.data, x[:, 2:])

    def test_split_reproduces_encoder_output(self):
        model = init_model(build_architecture(6, 3, 4, 2, [8], [8], [8]), 1)
        x = np.random.default_rng(0).random((5, 6)).astype(np.float32)
        emb = encode(model, x)
        full = encode_full(model, x).data
        assert np.concatenate([emb.e1.data, emb.e2.data], axis=1).tobytes() == full.tobytes()

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            encode(init_model(tiny(), 0), np.ones((2, 4)))


class TestPredict:
    def test_zero_head_uniform(self):
        arch = build_architecture(4, 10, 2, 2, [], [], [])
        model = init_model(arch, 0)
        zero_params(model)
        probs = predict(model, Tensor(np.ones((3, 2), np.float32)))
        np.testing.assert_allclose(probs.data, 0.1, atol=1e-7)

    def test_rows_sum_to_one(self):
        model = init_model(build_architecture(4, 5, 3, 2, [8], [8], [8]), 0)
        probs = predict(model, Tensor(np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)))
        assert probs.shape == (7, 5)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1, atol=1e-6)

    def test_deterministic(self):
        x = np.random.default_rng(2).random((3, 5)).astype(np.float32)
        a = predict(init_model(tiny(), 9), encode(init_model(tiny(), 9), x).e1).data
        b = predict(init_model(tiny(), 9), encode(init_model(tiny(), 9), x).e1).data
        assert a.tobytes() == b.tobytes()


class TestNoisyTransform:
    def test_rate_zero_and_inference(self):
        e1 = Tensor(np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32))
        assert noisy_transform(e1, 0.0, ad.rng_stream(0, "d")).data.tobytes() == e1.data.tobytes()
        assert noisy_transform(e1, 0.5, None, training=False).data.tobytes() == e1.data.tobytes()

    def test_zero_fraction(self):
        # 3 sigma of a binomial(1e4, 0.5) fraction is 0.015
        out = noisy_transform(Tensor(np.ones((100, 100), np.float32)), 0.5, ad.rng_stream(4, "d"))
        assert abs((out.data == 0).mean() - 0.5) <= 0.015


class TestDecode:
    def test_zero_decoder(self):
        model = init_model(tiny(), 0)
        zero_params(model)
        out = decode(model, Tensor(np.ones((2, 2), np.float32)), Tensor(np.ones((2, 3), np.float32)))
        assert out.shape == (2, 5) and (out.data == 0).all()

    def test_mnist_output_shape(self):
        model = init_model(mnist_architecture(), 0)
        out = decode(model, Tensor(np.zeros((3, 128), np.float32)), Tensor(np.zeros((3, 128), np.float32)))
        assert out.shape == (3, 784)

    def test_concatenation_order(self):
        arch = build_architecture(4, 2, 2, 2, [], [], [], embedding_activation="linear", decoder_output="linear")
        model = init_model(arch, 0)
        w = np.zeros((4, 4), np.float32)
        w[0, 0] = 1.0  # only the first e1 coordinate reaches output 0
        model.params["dec.layer0.weight"].data[...] = w
        a = Tensor(np.array([[1.0, 0.0]], np.float32))
        b = Tensor(np.array([[0.0, 0.0]], np.float32))
        assert decode(model, a, b).data[0, 0] == 1.0
        assert decode(model, b, a).data[0, 0] == 0.0

    def test_width_mismatch(self):
        model = init_model(tiny(), 0)
        with pytest.raises(DimensionError):
            decode(model, Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2))))


class TestDisentanglers:
    def test_zero_weights(self):
        model = init_model(tiny(), 0)
        zero_params(model)
        emb = encode(model, np.ones((2, 5), np.float32))
        e2_hat, e1_hat = disentangle_forward(model, emb)
        assert e2_hat.shape == (2, 3) and e1_hat.shape == (2, 2)
        assert (e2_hat.data == 0).all() and (e1_hat.data == 0).all()

    def test_identity_square(self):
        arch = build_architecture(6, 2, 3, 3, [], [], [], embedding_activation="linear")
        model = init_model(arch, 0)
        model.params["dis1.layer0.weight"].data[...] = np.eye(3)
        emb = encode(model, np.random.default_rng(0).random((4, 6)).astype(np.float32))
        e2_hat, _ = disentangle_forward(model, emb)
        np.testing.assert_array_equal(e2_hat.data, emb.e1.data)


def test_path_separation():
    model = init_model(build_architecture(6, 3, 2, 2, [8], [8], [8]), 0)
    x = np.random.default_rng(0).random((5, 6)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1])

    out = forward(model, x, ad.rng_stream(0, "dropout"))
    ad.backward(l_pred(out.probs, y))
    for name in model.params:
        if name.split(".")[0] in ("dec", "dis1", "dis2"):
            assert not model.params[name].grad.any(), name
    model.params.zero_grad()

    out = forward(model, x, ad.rng_stream(0, "dropout"))
    ad.backward(l_dec(out.x_hat, x))
    for name in model.params:
        if name.split(".")[0] in ("pred", "dis1", "dis2"):
            assert not model.params[name].grad.any(), name


def test_psi_zero_is_deterministic():
    model = init_model(build_architecture(6, 3, 2, 2, [8], [8], [8]), 0)
    x = np.random.default_rng(1).random((5, 6)).astype(np.float32)
    a = forward(model, x, ad.rng_stream(0, "d"), psi_rate=0.0).x_hat.data
    b = forward(model, x, ad.rng_stream(1, "d"), psi_rate=0.0).x_hat.data
    assert a.tobytes() == b.tobytes()


def test_dropout_only_on_decoder_path():
    model = init_model(build_architecture(6, 3, 2, 2, [8], [8], [8]), 0)
    x = np.random.default_rng(1).random((5, 6)).astype(np.float32)
    noisy = forward(model, x, ad.rng_stream(0, "d"), psi_rate=0.9)
    clean = forward(model, x, training=False)
    assert noisy.probs.data.tobytes() == clean.probs.data.tobytes()
    assert noisy.e2_hat.data.tobytes() == clean.e2_hat.data.tobytes()
    assert noisy.x_hat.data.tobytes() != clean.x_hat.data.tobytes()


def test_variants_run_their_networks():
    x = np.random.default_rng(1).random((3, 5)).astype(np.float32)
    full = forward(init_model(tiny(), 0), x, training=False)
    b1 = forward(init_model(tiny("b1"), 0), x, training=False)
    b0 = forward(init_model(tiny("b0"), 0), x, training=False)
    assert full.e2_hat is not None and b1.e2_hat is None and b1.x_hat is not None
    assert b0.x_hat is None and b0.emb.e2 is None and b0.emb.e1.shape == (3, 5)
    d1, d2 = l_dis(full.e2_hat, full.emb.e2, full.e1_hat, full.emb.e1)
    assert d1.item() >= 0 and d2.item() >= 0
