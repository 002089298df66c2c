import numpy as np
import pytest

from litnet.core import ops
from litnet.core.tensor import GradientTape, ShapeError, Tensor
from litnet.model import HEAD_BN_SCALE, ConfigError, LitNet, ModelConfig, count_flops, count_params, predict

TOY = dict(base_width=2, fc_width=4, branch_divisor=4)

# Hand-summed parameters of the toy configuration.  A conv-BN-PReLU block has
# cin*cout*k*k + cout (conv) + 2*cout (BN) + cout (PReLU) parameters; CBAM(c) with
# ratio 4 has an MLP c->max(c//4,1)->c with biases plus a 2->1 7x7 conv.
TOY_LEDGER = {
    "mran.rgb (3->2, 1x1)": 3 * 2 + 4 * 2,
    "mran.branch k=3 (1->2)": 1 * 2 * 9 + 4 * 2,
    "mran.branch k=5 (1->2)": 1 * 2 * 25 + 4 * 2,
    "mran.branch k=7 (1->2)": 1 * 2 * 49 + 4 * 2,
    "mran.cbam x3 (c=4, hidden 1)": 3 * ((4 * 1 + 1) + (1 * 4 + 4) + (2 * 49 + 1)),
    "fc (12->4, 3x3)": 12 * 4 * 9 + 4 * 4,
    "encoder1 4x(4->1)": 4 * (4 * 1 + 4 * 1),
    "encoder2 4x(16->4)": 4 * (16 * 4 + 4 * 4),
    "encoder3 4x(64->16)": 4 * (64 * 16 + 4 * 16),
    "bottleneck (256->256)": 256 * 256 + 4 * 256,
    "skip attention x3": 3 * (2 * 49 + 1),
    "head (20->3, 3x3)": 20 * 3 * 9 + 4 * 3,
}

DEFAULT_PARAMS = 432_654


def model(seed=0, dtype=np.float64, **kw):
    return LitNet(ModelConfig(**{**TOY, **kw}), seed=seed).to(dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_depth=4)
    with pytest.raises(ConfigError):
        ModelConfig(mode="superres", scale=5)
    with pytest.raises(ConfigError):
        ModelConfig(mode="superres")
    with pytest.raises(ConfigError):
        ModelConfig(scale=2)
    with pytest.raises(ConfigError):
        ModelConfig(fc_width=12, branch_divisor=8)
    with pytest.raises(ConfigError):
        ModelConfig(base_width=0)


def test_config_round_trip():
    cfg = ModelConfig(mode="superres", scale=3, fixed_kernel=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_decoder_width_bookkeeping():
    cfg = ModelConfig(**TOY)
    assert cfg.encoder_widths == (16, 64, 256)
    assert cfg.decoder_widths == (128, 48, 16)
    assert cfg.fd_width == 20


def test_toy_param_count_matches_hand_ledger():
    assert count_params(ModelConfig(**TOY)) == sum(TOY_LEDGER.values())


def test_default_param_count_golden():
    n = count_params(ModelConfig())
    print(f"default config parameters: {n}")
    assert n == DEFAULT_PARAMS


def test_count_params_equals_registry_sizes():
    m = LitNet(ModelConfig(**TOY))
    assert count_params(m.cfg) == sum(int(np.prod(p.shape)) for _, p in m.named_parameters())
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))


def test_single_conv_flops_and_params():
    from litnet.core.tensor import FlopCounter
    from litnet.nn import Conv2d

    conv = Conv2d(3, 4, 1, np.random.default_rng(0))
    assert sum(p.size for p in conv.parameters()) == 16
    with FlopCounter() as fc:
        conv(Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32)))
    assert fc.flops == 4 * (2 * 3 * 4 + 4)


def test_mran_output(rng):
    m = model()
    x = Tensor(rng.random((2, 3, 16, 16)))
    assert m.mran(x).shape == (2, 12, 16, 16)


def test_mran_matches_hand_composition(rng):
    m = model(base_width=4, fc_width=8, branch_divisor=8)
    x = Tensor(rng.random((2, 3, 8, 8)))
    f1 = m.mran.rgb(x)
    parts = []
    for i, (branch, att) in enumerate(zip(m.mran.branches, m.mran.attention)):
        parts.append(att(ops.concat_channels([branch(x[:, i : i + 1]), f1])))
    ref = ops.concat_channels(parts)
    np.testing.assert_array_equal(m.mran(x).data, ref.data)
    assert ref.shape == (2, 24, 8, 8)


def test_mran_symmetric_branches(rng):
    m = model(mran_attention=False, channel_split=False, fixed_kernel=True)
    state = m.mran.branches[0].state_dict()
    for b in m.mran.branches[1:]:
        b.load_state_dict(state)
    out = m.mran(Tensor(rng.random((2, 3, 8, 8)))).data
    w = out.shape[1] // 3
    np.testing.assert_array_equal(out[:, :w], out[:, w : 2 * w])
    np.testing.assert_array_equal(out[:, :w], out[:, 2 * w :])


def test_msan_shapes(rng):
    m = model()
    fc = Tensor(rng.random((1, 4, 16, 16)))
    e = fc
    for enc in m.msan.encoders:
        e = enc(e)
    assert e.shape[2:] == (2, 2)
    fd = m.msan(fc)
    assert fd.shape == (1, m.cfg.fd_width, 16, 16)
    with pytest.raises(ShapeError, match="divisible by 8"):
        m.msan(Tensor(rng.random((1, 4, 12, 16))))


def test_enhance_shape_and_input_checks(rng):
    m = model()
    assert m(Tensor(rng.random((2, 3, 16, 24)))).shape == (2, 3, 16, 24)
    with pytest.raises(ShapeError):
        m(Tensor(rng.random((1, 1, 16, 16))))
    with pytest.raises(ShapeError):
        m(Tensor(rng.random((1, 3, 12, 16))))


@pytest.mark.parametrize("s", [2, 3, 4])
def test_superres_shape(s, rng):
    m = model(mode="superres", scale=s)
    assert m(Tensor(rng.random((1, 3, 8, 16)))).shape == (1, 3, 8 * s, 16 * s)


def test_fresh_model_is_identity(rng):
    x = rng.random((2, 3, 16, 16))
    m = model().eval()
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_zero_head_identity_any_state(rng):
    m = model()
    for p in m.parameters():
        p.data = rng.standard_normal(p.shape)
    m.head.conv.weight.data[:] = 0
    m.head.conv.bias.data[:] = 0
    m.head.bn.weight.data[:] = 1
    m.head.bn.bias.data[:] = 0
    m.eval()
    m.head.bn.running_mean[:] = 0
    m.head.bn.running_var[:] = 1
    x = rng.random((1, 3, 16, 16))
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_predict_clamps_and_restores_mode(rng):
    m = model()
    for p in m.parameters():
        p.data = rng.standard_normal(p.shape)
    out = predict(m, Tensor(rng.random((1, 3, 16, 16))))
    assert out.min() >= 0 and out.max() <= 1
    assert m.training


def test_forward_deterministic(rng):
    x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    a = LitNet(ModelConfig(**TOY), seed=4).eval()
    b = LitNet(ModelConfig(**TOY), seed=4).eval()
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_gradients_reach_every_parameter(rng):
    m = model()
    m.head.conv.weight.data = rng.normal(0, 0.1, m.head.conv.weight.shape)
    with GradientTape() as tape:
        loss = (m(Tensor(rng.random((2, 3, 16, 16)))) ** 2).mean()
    tape.backward(loss)
    assert all(p.grad is not None and p.grad.shape == p.shape for p in m.parameters())
    # conv biases feeding batch norm legitimately get zero; weights upstream must not
    assert np.any(m.mran.rgb.conv.weight.grad != 0)
    assert all(np.any(b.conv.weight.grad != 0) for b in m.mran.branches)


def test_head_initialisation():
    head = LitNet(ModelConfig(**TOY)).head
    assert not np.any(head.conv.weight.data) and not np.any(head.conv.bias.data)
    assert np.all(head.bn.weight.data == HEAD_BN_SCALE) and not np.any(head.bn.bias.data)


def test_fresh_model_is_identity_in_train_mode(rng):
    x = rng.random((2, 3, 16, 16))
    np.testing.assert_array_equal(model()(Tensor(x)).data, x)
    sr = LitNet(ModelConfig(**TOY, mode="superres", scale=2))
    np.testing.assert_allclose(sr(Tensor(x)).data, ops.bicubic_upsample(Tensor(x), 2).data, atol=0)


def test_ablations_remove_parameters():
    full = {n for n, _ in LitNet(ModelConfig(**TOY)).named_parameters()}
    no_att = {n for n, _ in LitNet(ModelConfig(**TOY, mran_attention=False, skip_attention=False)).named_parameters()}
    assert not any("attention" in n for n in no_att)
    assert full - no_att == {n for n in full if "attention" in n}
    fixed = LitNet(ModelConfig(**TOY, fixed_kernel=True))
    assert [b.conv.weight.shape[-1] for b in fixed.mran.branches] == [3, 3, 3]
    split = LitNet(ModelConfig(**TOY, channel_split=False))
    assert all(b.conv.weight.shape[1] == 3 for b in split.mran.branches)


def test_default_budget_bracket():
    cfg = ModelConfig()
    n, f = count_params(cfg), count_flops(cfg, 256, 256)
    print(f"default: {n} params, {f / 1e9:.2f} GFLOPs at 256x256")
    assert 300_000 <= n <= 1_000_000
    assert 10e9 <= f <= 25e9
