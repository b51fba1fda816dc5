import numpy as np
import pytest

from fpbench import nets
from fpbench import tensor as T
from fpbench.nets import (
    LayerSpec,
    Model,
    build_feature_codec,
    build_image_decoder,
    build_image_encoder,
    build_loss_network,
    build_predictor_mlp,
    extract_features,
    feature_dim,
)


def _halvings(size, blocks):
    # oracle: kernel 4, stride 2, padding 1 -> floor((s + 2 - 4) / 2) + 1
    sizes = [size]
    for _ in range(blocks):
        sizes.append((sizes[-1] + 2 - 4) // 2 + 1)
    return sizes


def _valid(size, k=4):
    return (size - k) // 2 + 1


@pytest.mark.parametrize("size,blocks,final", [(8, 2, 2), (16, 3, 2), (32, 4, 2), (64, 4, 4)])
def test_encoder_block_count_and_final_size(size, blocks, final):
    enc = build_image_encoder(size, 3, 64)
    convs = [i for i, l in enumerate(enc.layers) if l.kind == "conv"]
    assert len(convs) == blocks
    assert [l.out for l in enc.layers if l.kind == "conv"] == [32, 64, 128, 256][:blocks]
    assert enc.shapes[convs[-1] + 1][1:] == (final, final)
    assert _halvings(size, blocks)[-1] == final


def test_encoder_contract():
    enc = build_image_encoder(32, 3, 64)
    x = np.random.default_rng(0).random((5, 3, 32, 32))
    assert enc(x).shape == (5, 64)
    assert enc.output_shape == (64,)


def test_encoder_rejects_unsupported_size():
    with pytest.raises(ValueError):
        build_image_encoder(48, 3, 64)


def test_same_seed_same_init():
    a, b = build_image_encoder(32, 3, 64, seed=4), build_image_encoder(32, 3, 64, seed=4)
    assert a.checksum() == b.checksum()
    assert a.checksum() != build_image_encoder(32, 3, 64, seed=5).checksum()


def test_decoder_contract_and_range():
    dec = build_image_decoder(32, 3, 64)
    y = dec(np.random.default_rng(1).normal(size=(4, 64))).data
    assert y.shape == (4, 3, 32, 32)
    assert np.all((y > 0) & (y < 1))


def test_decoder_parameter_count_mirrors_encoder():
    z, c = 64, 3
    enc, dec = build_image_encoder(32, c, z), build_image_decoder(32, c, z)
    ws = [c, 32, 64, 128, 256]
    kernels = sum(ws[i] * ws[i + 1] * 16 for i in range(4))
    flat = 256 * 2 * 2
    assert enc.num_parameters() == kernels + sum(ws[1:]) + flat * z + z
    assert dec.num_parameters() == kernels + sum(ws[:-1]) + z * flat + flat
    # only the biases differ between the mirrored stacks
    assert enc.num_parameters() - dec.num_parameters() == (256 + z) - (c + flat)


def test_feature_codec_shapes_and_count():
    enc = build_feature_codec(512, 64, "encode")
    assert [s for s in enc.shapes] == [(512,), (2048,), (2048,), (64,)]
    assert enc.num_parameters() == 512 * 2048 + 2048 + 2048 * 64 + 64
    dec = build_feature_codec(512, 64, "decode")
    y = dec(np.random.default_rng(0).normal(size=(3, 64)) * 5).data
    assert y.shape == (3, 512)
    assert np.all((y > 0) & (y < 1))
    with pytest.raises(ValueError):
        build_feature_codec(512, 64, "sideways")


def test_loss_network_tap_shape():
    ln = build_loss_network(32, 10)
    assert _valid(_valid(32)) == 6
    assert ln.shapes[ln.tap + 1] == (32, 6, 6)
    assert feature_dim(ln) == 1152
    assert ln.output_shape == (10,)
    assert ln.layers[ln.tap].kind == "relu"
    assert [l.kind for l in ln.layers[: ln.tap + 1]].count("relu") == 2


@pytest.mark.parametrize("size", [8, 16, 32, 64])
def test_loss_network_builds_for_supported_sizes(size):
    ln = build_loss_network(size, 10)
    x = np.random.default_rng(0).random((2, 3, size, size))
    assert ln(x).shape == (2, 10)
    assert extract_features(ln, x).shape == (2, feature_dim(ln))


def test_extract_features_range_purity_and_zero_image():
    ln = build_loss_network(32, 10, seed=3)
    x = np.random.default_rng(2).random((3, 3, 32, 32))
    f1 = extract_features(ln, x).data
    f2 = extract_features(ln, x.copy()).data
    assert np.array_equal(f1, f2)
    assert np.all((f1 > 0) & (f1 < 1))
    zero = extract_features(ln, np.zeros((1, 3, 32, 32))).data
    # zero image: every activation is relu(bias) propagated; biases start at zero
    assert np.all(zero == 0.5)
    with pytest.raises(T.ShapeError):
        extract_features(ln, np.zeros((1, 3, 16, 16)))


def test_extract_features_is_taped_through_frozen_network():
    ln = build_loss_network(16, 10).freeze()
    x = T.Tensor(np.random.default_rng(0).random((2, 3, 16, 16)), requires_grad=True)
    T.backward(T.sse(extract_features(ln, x), T.Tensor(np.zeros((2, feature_dim(ln))))))
    assert x.grad is not None and np.abs(x.grad).sum() > 0
    assert all(p.grad is None for p in ln.parameters())


@pytest.mark.parametrize(
    "arch_id,z,out,shapes",
    [
        (0, 64, 10, [(64,), (10,)]),
        (4, 128, 2, [(128,), (64,), (64,), (32,), (32,), (2,)]),
        (6, 64, 10, [(64,), (128,), (128,), (128,), (128,), (10,)]),
    ],
)
def test_predictor_mlp_layouts(arch_id, z, out, shapes):
    assert build_predictor_mlp(arch_id, z, out).shapes == shapes


def test_predictor_mlp_all_layouts_and_bad_id():
    hidden = [[l.out for l in build_predictor_mlp(a, 8, 2).layers if l.kind == "dense"][:-1] for a in range(7)]
    assert hidden == [[], [32], [64], [32, 32], [64, 32], [64, 64], [128, 128]]
    with pytest.raises(ValueError):
        build_predictor_mlp(7, 8, 2)


@pytest.mark.parametrize(
    "builder",
    [
        lambda: build_image_encoder(16, 1, 8),
        lambda: build_image_decoder(16, 1, 8),
        lambda: build_feature_codec(20, 4, "decode", hidden=16),
        lambda: build_loss_network(32, 5),
        lambda: build_predictor_mlp(5, 12, 3),
    ],
)
def test_shape_round_trip(builder):
    m = builder()
    x = np.random.default_rng(0).random((3,) + m.input_shape)
    assert m(x).shape == (3,) + m.output_shape


def test_layer_composition_validated_at_build():
    with pytest.raises(T.ShapeError):
        Model([LayerSpec("dense", 4)], (3, 8, 8))
    with pytest.raises(T.ShapeError):
        Model([LayerSpec("conv", 4, 5, 2)], (1, 3, 3))


# weight container -------------------------------------------------------------


def test_weights_round_trip_bit_exact(tmp_path):
    m = build_image_encoder(16, 3, 8, seed=9)
    m.params["0.bias"].data[:] = np.random.default_rng(1).normal(size=32)
    p1, p2 = tmp_path / "a.fpbw", tmp_path / "b.fpbw"
    nets.save_weights(m, p1)
    loaded = nets.load_weights(p1)
    nets.save_weights(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = np.random.default_rng(2).random((2, 3, 16, 16))
    assert np.array_equal(m(x).data, loaded(x).data)
    assert loaded.to_spec() == m.to_spec()


def test_weights_header_layout(tmp_path):
    m = build_predictor_mlp(0, 3, 2)
    blob = nets.weights_to_bytes(m)
    assert blob[:4] == b"FPBW"
    assert int.from_bytes(blob[4:8], "little") == 1
    n = int.from_bytes(blob[8:12], "little")
    body = np.frombuffer(blob[12 + n:], dtype="<f8")
    np.testing.assert_array_equal(body, np.concatenate([p.data.ravel() for p in m.parameters()]))


def test_weights_distinct_errors():
    blob = nets.weights_to_bytes(build_predictor_mlp(1, 4, 2))
    with pytest.raises(nets.BadMagicError):
        nets.weights_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(nets.UnsupportedVersionError):
        nets.weights_from_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(nets.TruncatedFileError):
        nets.weights_from_bytes(blob[:-8])
    with pytest.raises(nets.TruncatedFileError):
        nets.weights_from_bytes(blob[:6])
