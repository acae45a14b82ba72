import numpy as np
import pytest

from nilmtx import numerics as nx
from nilmtx.errors import CheckpointError, ConfigError, GeometryError
from nilmtx.model import (
    ModelConfig,
    NilmModel,
    closed_form_param_count,
    count_params,
    embed,
    forward,
    load_checkpoint,
    predict,
    preset,
    save_checkpoint,
)
from nilmtx.numerics import RngStream, Tensor
from nilmtx.training import LossConfig, compound_loss


def small_config(**kw):
    base = dict(hidden_dim=8, n_layers=1, n_heads=2, dropout=0.0, window_len=32)
    base.update(kw)
    return ModelConfig(**base)


def test_zero_everything_gives_zero_embedding():
    model = NilmModel.init(small_config(), RngStream(0))
    for t in (model.conv_w, model.conv_b, model.position):
        t.data[...] = 0
    out = embed(Tensor(np.zeros((1, 32))), model)
    np.testing.assert_array_equal(out.data, 0.0)


def test_positional_vector_passes_through():
    model = NilmModel.init(small_config(), RngStream(0))
    model.conv_w.data[...] = 0
    model.conv_b.data[...] = 0
    out = embed(Tensor(np.zeros((3, 32))), model)
    for b in range(3):
        np.testing.assert_array_equal(out.data[b], model.position.data)


def test_embedding_shape():
    model = NilmModel.init(small_config(hidden_dim=16, window_len=32, pool_alpha=2), RngStream(0))
    assert embed(Tensor(np.zeros(32)), model).shape == (16, 16)


def test_embedding_rejects_wrong_length():
    model = NilmModel.init(small_config(), RngStream(0))
    with pytest.raises(GeometryError):
        embed(Tensor(np.zeros((1, 30))), model)


def test_zeroed_output_layer_predicts_zero():
    model = NilmModel.init(small_config(), RngStream(0))
    model.out_w.data[...] = 0
    model.out_b.data[...] = 0
    power, score = forward(Tensor(np.random.default_rng(0).uniform(size=(2, 32))), model, on_level=0.1)
    np.testing.assert_array_equal(power.data, 0.0)
    np.testing.assert_allclose(score.data, -0.1)


@pytest.mark.parametrize("d", [4, 16, 256])
@pytest.mark.parametrize("layers", [1, 4, 10])
def test_output_length_equals_input_length(d, layers):
    model = NilmModel.init(ModelConfig(hidden_dim=d, n_layers=layers, n_heads=2, window_len=32), RngStream(0))
    power, score = forward(Tensor(np.full((1, 32), 0.3)), model)
    assert power.shape == score.shape == (1, 32)


@pytest.mark.parametrize("alpha,k", [(1, 2), (2, 4), (4, 8), (2, 5)])
def test_pool_and_deconv_geometry_restore_length(alpha, k):
    cfg = ModelConfig(hidden_dim=4, n_layers=1, n_heads=1, window_len=16, pool_alpha=alpha, deconv_kernel=k)
    power, _ = forward(Tensor(np.full(16, 0.5)), NilmModel.init(cfg, RngStream(0)))
    assert power.shape == (16,)


def test_config_validation():
    with pytest.raises(GeometryError):
        ModelConfig(window_len=31, pool_alpha=2).validate()
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=6, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0).validate()
    with pytest.raises(GeometryError):
        ModelConfig(window_len=32, pool_alpha=4, deconv_kernel=2).validate()
    with pytest.raises(ConfigError):
        preset("huge")


def test_compact_preset_values():
    cfg = preset("compact")
    assert (cfg.hidden_dim, cfg.n_layers, cfg.n_heads, cfg.dropout) == (16, 2, 2, 0.5)
    base = preset("bert4nilm-base")
    assert (base.hidden_dim, base.n_layers, base.n_heads, base.dropout) == (256, 2, 2, 0.1)


def test_clamp_contract():
    model = NilmModel.init(small_config(), RngStream(3))
    model.out_w.data[...] = RngStream(4).normal(model.out_w.shape, 20.0)  # saturate on both sides
    model.out_b.data[...] = 0.5
    x = np.random.default_rng(1).uniform(size=(8, 32))
    power = predict(model, x)
    assert power.min() >= 0.0 and power.max() <= 1.0
    assert np.any(power == 0.0) and np.any(power == 1.0)


def test_eval_forward_is_bitwise_deterministic():
    model = NilmModel.init(small_config(dropout=0.5), RngStream(3))
    x = Tensor(np.random.default_rng(1).uniform(size=(4, 32)))
    a, _ = forward(x, model, RngStream(1))
    b, _ = forward(x, model, RngStream(2))
    assert a.data.tobytes() == b.data.tobytes()


def test_compound_loss_gradient_through_full_model():
    cfg = small_config()
    model = NilmModel.init(cfg, RngStream(11))
    model.out_b.data[...] = 0.4
    rng = RngStream(12)
    x = Tensor(rng.uniform((2, 32)))
    target = rng.uniform((2, 32)) * 0.8
    labels = np.where(target > 0.3, 1, -1)
    mask = rng.uniform((2, 32)) < 0.3
    loss_cfg = LossConfig(tau=0.5, lam=1.0, p_max=400.0, on_threshold=50.0)

    def objective():
        power, score = forward(x, model, mask=mask, on_level=loss_cfg.on_level, clamp=False)
        return compound_loss(target, power, labels, score, loss_cfg, weights=mask)

    err = nx.grad_check(objective, list(model.parameters().values()))
    assert err <= 1e-4


# ---------------------------------------------------------------- parameter counting


def test_degenerate_hand_count():
    cfg = ModelConfig(hidden_dim=1, n_layers=0, n_heads=1, window_len=8, conv_kernel=1, pool_alpha=1)
    model = NilmModel.init(cfg, RngStream(0))
    # conv 1*1*1 + bias 1; positions 8*1; mask token 1; final norm 2;
    # deconv 4*1*1 + bias 1; output 1*1 + bias 1
    hand = (1 + 1) + 8 + 1 + 2 + (4 + 1) + (1 + 1)
    assert count_params(model).total == hand == 20
    assert closed_form_param_count(cfg) == hand


def test_count_is_linear_in_depth():
    def total(layers):
        cfg = ModelConfig(hidden_dim=8, n_layers=layers, n_heads=2, window_len=32)
        return count_params(NilmModel.init(cfg, RngStream(0))).total

    per_block = total(1) - total(0)
    for n in (1, 2, 3):
        assert total(2 * n) - total(n) == n * per_block


@pytest.mark.parametrize("d,layers,heads", [(4, 1, 1), (16, 2, 2), (32, 3, 4), (64, 2, 8)])
def test_count_matches_brute_force_and_closed_form(d, layers, heads):
    cfg = ModelConfig(hidden_dim=d, n_layers=layers, n_heads=heads, window_len=64)
    model = NilmModel.init(cfg, RngStream(0))
    brute = sum(t.data.size for t in model.parameters().values())
    pc = count_params(model)
    assert pc.total == brute == closed_form_param_count(cfg)
    assert sum(pc.breakdown.values()) == pc.total


def test_base_to_compact_ratio():
    big = closed_form_param_count(preset("bert4nilm-base"))
    small = closed_form_param_count(preset("compact"))
    assert 100 <= big / small <= 300


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = NilmModel.init(small_config(), RngStream(5))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"appliance": "fridge"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"appliance": "fridge"}
    assert loaded.config == model.config
    for name, t in model.parameters().items():
        assert loaded.parameters()[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(NilmModel.init(small_config(), RngStream(5)), path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
