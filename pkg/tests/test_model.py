import numpy as np
import pytest

from _oracles import scalar_gru
from eegfusenet.autodiff import Tensor, grad_check
from eegfusenet.errors import ConfigurationError, ContractError, DimensionError
from eegfusenet.model import (
    VARIANTS,
    GeneratorSpec,
    GruCellParams,
    autoencode,
    bigru,
    build_discriminator,
    build_generator,
    decode,
    discriminate,
    encode,
    encode_many,
    gru_cell,
    load_checkpoint,
    normalize_variant,
    save_checkpoint,
)

DESK = dict(channels=8, timepoints=64, f1=4, gru_hidden=16, latent=32, pool2=4)


def random_cell(rng, n_in, n_h, scale=1.0):
    p = GruCellParams.init(n_in, n_h, rng)
    for t in (p.b_z, p.b_r, p.b_h):
        t.data = rng.normal(size=n_h) * scale
    return p


def as_lists(p):
    W = {g: getattr(p, f"W_{g}").data.tolist() for g in "zrh"}
    U = {g: getattr(p, f"U_{g}").data.tolist() for g in "zrh"}
    b = {g: getattr(p, f"b_{g}").data.tolist() for g in "zrh"}
    return W, U, b


# -- GRU ---------------------------------------------------------------------------


def test_gru_zero_fixed_point():
    p = GruCellParams.zeros(3, 4)
    np.testing.assert_array_equal(gru_cell(np.ones(3), np.zeros(4), p).data, 0.0)


def test_gru_closed_update_gate_keeps_state():
    rng = np.random.default_rng(0)
    p = random_cell(rng, 3, 4)
    p.b_z.data = np.full(4, -50.0)
    h = rng.normal(size=4)
    for _ in range(5):
        np.testing.assert_allclose(gru_cell(rng.normal(size=3) * 3, h, p).data, h, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gru_matches_scalar_transcription(seed):
    rng = np.random.default_rng(seed)
    p = random_cell(rng, 3, 3)
    x, h = rng.normal(size=3), rng.normal(size=3)
    expect = scalar_gru(x.tolist(), h.tolist(), *as_lists(p))
    np.testing.assert_allclose(gru_cell(x, h, p).data, expect, atol=1e-12, rtol=0)


def test_gru_batch_rows_are_independent():
    rng = np.random.default_rng(1)
    p = random_cell(rng, 5, 3)
    X, H = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    batch = gru_cell(X, H, p).data
    for i in range(4):
        np.testing.assert_allclose(batch[i], gru_cell(X[i], H[i], p).data, atol=1e-14)


def test_gru_dimension_errors():
    p = GruCellParams.zeros(3, 4)
    with pytest.raises(DimensionError, match="input"):
        gru_cell(np.zeros(2), np.zeros(4), p)
    with pytest.raises(DimensionError, match="hidden"):
        gru_cell(np.zeros(3), np.zeros(5), p)


def test_gru_gradients():
    rng = np.random.default_rng(2)
    p = random_cell(rng, 3, 2)
    names = list(p.__dict__)

    def f(x, h, *weights):
        cell = GruCellParams(*weights)
        return (gru_cell(x, h, cell) ** 2).sum()

    inputs = [Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))]
    assert grad_check(f, inputs + [getattr(p, n) for n in names]) < 1e-6


# -- bidirectional GRU --------------------------------------------------------------


def test_bigru_single_step():
    rng = np.random.default_rng(3)
    f, b = random_cell(rng, 3, 2), random_cell(rng, 3, 2)
    x = rng.normal(size=3)
    (a,) = bigru([x], f, b)
    expect = np.concatenate([gru_cell(x, np.zeros(2), f).data, gru_cell(x, np.zeros(2), b).data])
    np.testing.assert_array_equal(a.data, expect)


def test_bigru_palindrome_symmetry():
    rng = np.random.default_rng(4)
    cell = random_cell(rng, 3, 4)
    half = [rng.normal(size=3) for _ in range(3)]
    seq = half + half[::-1]
    out = [a.data for a in bigru(seq, cell, cell)]
    n = len(seq)
    for t in range(n):
        np.testing.assert_allclose(out[t][:4], out[n - 1 - t][4:], atol=1e-14)


def test_bigru_zero_params_and_errors():
    z = GruCellParams.zeros(3, 2)
    for a in bigru([np.ones(3)] * 4, z, z):
        np.testing.assert_array_equal(a.data, 0.0)
    with pytest.raises(ContractError, match="empty"):
        bigru([], z, z)
    with pytest.raises(DimensionError):
        bigru([np.ones(3), np.ones(2)], z, z)


# -- generator and discriminator -----------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigurationError, match="even"):
        GeneratorSpec(timepoints=63, pool1=1, pool2=1).validate()
    with pytest.raises(ConfigurationError, match="second pooling"):
        GeneratorSpec(timepoints=40, pool1=4, pool2=8).validate()
    with pytest.raises(ConfigurationError, match="2\\*gru_hidden"):
        GeneratorSpec(gru_hidden=16, latent=64).validate()
    GeneratorSpec(variant="cnn", gru_hidden=16, latent=64).validate()
    with pytest.raises(ConfigurationError):
        normalize_variant("rnn")
    assert normalize_variant("CNN-RNN-GAN") == "cnn_rnn_gan"


def test_full_size_latent_length():
    gen = build_generator(GeneratorSpec(), seed=0)
    X = np.random.default_rng(0).normal(size=(2, 32, 384))
    o = encode(X, gen)
    assert o.shape == (2, 64)
    assert np.all(np.isfinite(o))


@pytest.mark.parametrize("variant", VARIANTS)
def test_round_trip_shape_and_determinism(variant):
    gen = build_generator(GeneratorSpec(variant=variant, **DESK), seed=1)
    X = np.random.default_rng(5).normal(size=(3, 8, 64))
    Y, o = autoencode(X, gen)
    assert Y.shape == X.shape and o.shape == (3, 32)
    Y2, o2 = autoencode(X, gen)
    np.testing.assert_array_equal(Y, Y2)
    np.testing.assert_array_equal(o, o2)
    np.testing.assert_allclose(encode(X[0], gen), o[0], atol=1e-12)
    np.testing.assert_allclose(decode(o, gen), Y, atol=1e-12)


def test_recurrent_latent_is_final_states():
    spec = GeneratorSpec(variant="cnn_rnn", **DESK)
    gen = build_generator(spec, seed=2)
    X = np.random.default_rng(6).normal(size=(2, 8, 64))
    gen.eval()
    x = gen._conv_stack(Tensor(X[:, None]), spec, "enc").data.reshape(2, spec.f2, spec.steps)
    outs = bigru([x[:, :, t] for t in range(spec.steps)], gen._cell("enc.gru_f"), gen._cell("enc.gru_b"))
    h = spec.gru_hidden
    expect = np.concatenate([outs[-1].data[:, :h], outs[0].data[:, h:]], axis=1)
    np.testing.assert_allclose(encode(X, gen), expect, atol=1e-12)


def test_structure_of_variants():
    counts = {v: build_generator(GeneratorSpec(variant=v, **DESK)).num_parameters() for v in VARIANTS}
    assert counts["cnn"] == counts["cnn_gan"] < counts["cnn_rnn"] == counts["cnn_rnn_gan"]
    cnn = build_generator(GeneratorSpec(variant="cnn", **DESK))
    assert not any("gru" in name for name in cnn.params)


def test_seeded_initialization():
    a = build_generator(GeneratorSpec(**DESK), seed=3).state_dict()
    b = build_generator(GeneratorSpec(**DESK), seed=3).state_dict()
    c = build_generator(GeneratorSpec(**DESK), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_input_shape_mismatch():
    gen = build_generator(GeneratorSpec(**DESK))
    with pytest.raises(DimensionError):
        encode(np.zeros((2, 7, 64)), gen)
    with pytest.raises(DimensionError):
        decode(np.zeros((2, 31)), gen)


def test_discriminator_probabilities():
    disc = build_discriminator(GeneratorSpec(**DESK), seed=0)
    p = discriminate(np.random.default_rng(7).normal(size=(5, 8, 64)) * 4, disc)
    assert p.shape == (5,) and np.all((p > 0) & (p < 1))
    disc.params["disc.head.W"].data[:] = 0.0
    assert discriminate(np.ones((8, 64)), disc) == 0.5


def test_discriminator_input_gradient():
    spec = GeneratorSpec(channels=2, timepoints=8, f1=2, depth=1, pool1=2, pool2=2, sep_kernel=2)
    disc = build_discriminator(spec, seed=1)
    X = np.random.default_rng(8).normal(size=(3, 2, 8))
    assert grad_check(lambda x: disc(x).log().sum(), [Tensor(X)]) < 1e-4


def test_generator_block_gradient():
    spec = GeneratorSpec(variant="cnn_rnn", channels=4, timepoints=8, f1=2, depth=1, gru_hidden=2, latent=4,
                         pool1=2, pool2=2, sep_kernel=2)
    gen = build_generator(spec, seed=2)
    X = np.random.default_rng(9).normal(size=(2, 4, 8))
    assert grad_check(lambda x: (gen(x)[0] ** 2).mean(), [Tensor(X)]) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    spec = GeneratorSpec(variant="cnn_rnn_gan", **DESK)
    gen, disc = build_generator(spec, seed=5), build_discriminator(spec, seed=5)
    save_checkpoint(tmp_path / "ck", gen, disc, epoch=3)
    gen2, disc2, meta = load_checkpoint(tmp_path / "ck")
    X = np.random.default_rng(10).normal(size=(4, 8, 64))
    np.testing.assert_allclose(encode_many(X, gen, batch_size=3), encode(X, gen2), atol=1e-12)
    np.testing.assert_array_equal(discriminate(X, disc), discriminate(X, disc2))
    assert meta["epoch"] == 3
