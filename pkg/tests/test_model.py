import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eopretrain import autograd as ag
from eopretrain.captions import PAD, encode_text
from eopretrain.losses import loss_jepa, loss_rec_l1
from eopretrain.model import (CheckpointError, ContractError, EmptyCaptionError, JointModel, ModelConfig,
                           ema_update, load_checkpoint, masked_positions, save_checkpoint)
from eopretrain.synth import generate_tile
from eopretrain.tiles import MODALITIES, ConfigurationError
from eopretrain.train import AdamState, adamw_step, cosine_lr, prepare_dataset

SMALL = ModelConfig(image_size=16, patch=4, dim=32, depth=2, heads=4, pred_dim=16, pred_depth=1, dec_dim=16,
                    text_width=16, text_depth=2, text_heads=2, text_max_len=16, text_dim=24, proj_dim=8)


@pytest.fixture(scope="module")
def small():
    return JointModel(SMALL)


@pytest.fixture(scope="module")
def data():
    return prepare_dataset([generate_tile(f"m-{i}", (16, 16), seed=2) for i in range(4)], SMALL)


def visible_batch(data, positions):
    pos = np.asarray(positions)
    return data.s2[np.arange(len(pos))[:, None], pos], pos


# -- encoder ----------------------------------------------------------------

def test_encoder_shape(small, data):
    x, pos = visible_batch(data, [[0, 3, 5], [1, 2, 15]])
    assert small.encode_visible(x, pos).shape == (2, 3, 32)


def test_encoder_permutation_equivariance(small, data):
    x, pos = visible_batch(data, [[0, 3, 5, 9, 12]])
    perm = np.array([3, 0, 4, 2, 1])
    a = small.encode_visible(x, pos).data
    b = small.encode_visible(x[:, perm], pos[:, perm]).data
    assert np.allclose(b, a[:, perm], atol=1e-12)


def test_encoder_is_deterministic(small, data):
    x, pos = visible_batch(data, [[1, 4, 7]])
    assert small.encode_visible(x, pos).data.tobytes() == small.encode_visible(x, pos).data.tobytes()


def test_zeroed_blocks_reduce_to_embedding_plus_position(data):
    model = JointModel(SMALL)
    for blk in model.encoder.blocks:
        blk.zero_()
    x, pos = visible_batch(data, [[2, 6, 11]])
    enc = model.encoder
    h = x @ enc.embed.weight.data + enc.embed.bias.data + enc.pos.data[pos]
    mu, var = h.mean(-1, keepdims=True), h.var(-1, keepdims=True)
    expected = (h - mu) / np.sqrt(var + 1e-5) * enc.norm.gamma.data + enc.norm.beta.data
    assert np.allclose(model.encode_visible(x, pos).data, expected, atol=1e-6)


def test_encoder_position_out_of_grid(small, data):
    with pytest.raises(IndexError):
        small.encode_visible(data.s2[:1, :2], [[0, 16]])


def test_encoder_rejects_empty_sequence(small):
    with pytest.raises(ContractError):
        small.encode_visible(np.zeros((1, 0, SMALL.patch_dim)), np.zeros((1, 0), int))


# -- decoders ---------------------------------------------------------------

def test_decoder_output_shapes(small, data):
    x, pos = visible_batch(data, [[0, 5, 10], [1, 2, 3]])
    z = small.encode_visible(x, pos)
    for spec in MODALITIES:
        out = small.decode_modality(z, pos, spec.name)
        if spec.categorical:
            assert out.shape == (2, spec.channels, 4, 4)
        else:
            assert out.shape == (2, spec.channels, 16, 16)


def test_unknown_modality(small, data):
    x, pos = visible_batch(data, [[0]])
    with pytest.raises(ConfigurationError):
        small.decode(small.encode_visible(x, pos), pos, "lidar")


def test_decoder_memorises_one_tile(data):
    model = JointModel(SMALL)
    pos = np.arange(16)[None]
    x = data.s2[:1]
    target = data.targets["dem"][:1]
    with ag.no_grad():
        z = model.encode_visible(x, pos).data
    dec = model.decoders["dem"]
    params = dec.parameters()
    state = AdamState()
    every = np.arange(16)[None]
    for step in range(1500):
        dec.zero_grad()
        loss = loss_rec_l1(dec(ag.Tensor(z), pos), target, every)
        loss.backward()
        adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state, cosine_lr(step, 1500, 3e-3, 50), 0.0)
    with ag.no_grad():
        final = loss_rec_l1(dec(ag.Tensor(z), pos), target, every).item()
    assert final < 0.01


def test_masked_positions_complement():
    assert masked_positions([[3, 0]], 5).tolist() == [[1, 2, 4]]


# -- predictor --------------------------------------------------------------

def test_predictor_output_count_and_determinism(small, data):
    x, ctx = visible_batch(data, [[0, 1, 2, 3]])
    z = small.encode_visible(x, ctx)
    a = small.jepa_predict(z, ctx, [[5, 9, 10]]).data
    assert a.shape == (1, 3, 32)
    assert a.tobytes() == small.jepa_predict(z, ctx, [[5, 9, 10]]).data.tobytes()


def test_predictor_rejects_overlap(small, data):
    x, ctx = visible_batch(data, [[0, 1, 2]])
    with pytest.raises(ContractError):
        small.jepa_predict(small.encode_visible(x, ctx), ctx, [[2, 7]])


def test_jepa_gradient_reaches_online_weights_only(data):
    model = JointModel(SMALL)
    x, ctx = visible_batch(data, [[0, 1, 2, 3, 4]])
    tgt = np.array([[8, 9, 13]])
    xt = data.s2[:1][:, tgt[0]]
    loss = loss_jepa(model.jepa_predict(model.encode_visible(x, ctx), ctx, tgt), model.encode_target(xt, tgt))
    loss.backward()
    assert np.abs(model.encoder.embed.weight.grad).sum() > 0
    assert np.abs(model.predictor.out_proj.weight.grad).sum() > 0
    for p in model.target_parameters().values():
        assert p.grad is None or not p.grad.any()


# -- text side --------------------------------------------------------------

def test_text_dimension_defaults_to_512():
    model = JointModel()
    assert model.encode_caption([encode_text("forest near a lake.", 24)]).shape == (1, 512)


def test_caption_padding_invariance(small):
    short = encode_text("grassland with hills.", 8)
    long = short + [PAD] * 8
    a, b = small.encode_caption([short]).data, small.encode_caption([long]).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_different_captions_differ(small):
    e = small.encode_caption([encode_text("forest near a lake.", 16), encode_text("barren ground.", 16)]).data
    assert not np.allclose(e[0], e[1])


def test_all_padding_caption(small):
    with pytest.raises(EmptyCaptionError):
        small.encode_caption([[PAD] * 6])


def test_caption_errors(small):
    with pytest.raises(IndexError):
        small.encode_caption([[1, 9999, 2]])
    with pytest.raises(ContractError):
        small.encode_caption([[1] * 17])


# -- pooling and projections ------------------------------------------------

def test_projections_are_unit_vectors(small, data):
    x, pos = visible_batch(data, [[0, 4, 8], [1, 5, 9]])
    v, t = small.pool_and_project(small.encode_visible(x, pos), small.encode_caption(data.tokens[:2]))
    assert v.shape == t.shape == (2, 8)
    assert np.allclose(np.linalg.norm(v.data, axis=1), 1.0, atol=1e-6)
    assert np.allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-6)


def test_identical_rows_pool_to_that_row(small):
    row = np.random.default_rng(0).normal(size=32)
    z = ag.Tensor(np.tile(row, (1, 5, 1)))
    t = small.encode_caption([encode_text("forest.", 16)])
    v, _ = small.pool_and_project(z, t)
    direct = small.proj_v(ag.Tensor(row[None])).data
    assert np.allclose(v.data, direct / np.linalg.norm(direct), atol=1e-12)


# -- EMA --------------------------------------------------------------------

def scalar(x):
    return {"a": ag.Tensor(np.array([float(x)]))}


@pytest.mark.parametrize("momentum,expected", [(1.0, 0.0), (0.0, 1.0), (0.996, 0.004)])
def test_ema_examples(momentum, expected):
    target = scalar(0.0)
    ema_update(scalar(1.0), target, momentum)
    assert target["a"].data[0] == pytest.approx(expected, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(momentum=st.floats(0.5, 0.999), k=st.integers(1, 40), gap=st.floats(0.1, 10.0))
def test_ema_contracts_by_momentum_power(momentum, k, gap):
    online, target = scalar(gap), scalar(0.0)
    for _ in range(k):
        ema_update(online, target, momentum)
    assert gap - target["a"].data[0] == pytest.approx(gap * momentum ** k, rel=1e-9)


def test_ema_rejects_bad_inputs():
    with pytest.raises(ContractError):
        ema_update(scalar(1), scalar(0), 1.5)
    with pytest.raises(ContractError):
        ema_update(scalar(1), {"b": ag.Tensor(np.zeros(1))}, 0.5)


def test_target_starts_as_copy_and_is_not_trainable():
    model = JointModel(SMALL)
    online = model.encoder.parameters()
    for k, p in model.target_encoder_arrays().items():
        assert np.array_equal(p.data, online[k].data) and not p.requires_grad
    assert not any(k.startswith("target_encoder") for k in model.parameters())


def test_model_ema_moves_target_toward_online():
    model = JointModel(SMALL)
    w = model.encoder.embed.weight
    w.data = w.data + 1.0
    model.ema_update(0.9)
    assert np.allclose(model.target_encoder.embed.weight.data, w.data - 0.9, atol=1e-12)


# -- size and checkpoints ---------------------------------------------------

def test_default_parameter_count_under_five_million():
    assert JointModel().n_parameters() < 5_000_000


def test_checkpoint_round_trip(tmp_path, data):
    model = JointModel(SMALL)
    model.encoder.embed.weight.data += 0.5
    opt = {"m.encoder.embed.weight": np.full(3, 0.25)}
    path = save_checkpoint(tmp_path / "c.ckpt", model, opt, step=7, meta={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.meta == {"note": "x"} and ck.config == SMALL
    assert np.array_equal(ck.optimizer["m.encoder.embed.weight"], opt["m.encoder.embed.weight"])
    back = ck.build_model()
    for k, v in model.state_arrays().items():
        assert np.array_equal(back.state_arrays()[k], v)


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", JointModel(SMALL))
    blob = bytearray(path.read_bytes())
    blob[200] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")
