import numpy as np
import pytest

from motioncorr import autodiff as ad
from motioncorr.errors import ConfigError
from motioncorr.model import (
    REFERENCE_PARAM_COUNT,
    TOY_CONFIG,
    Bound,
    NetConfig,
    cbam,
    channel_attention,
    init_params,
    param_count,
    spatial_attention,
    stacked_forward,
    stem_forward,
    unet_forward,
)

SMALL = NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=2, input_size=(8, 8))


def hand_count(cfg):
    """Layer-by-layer parameter count written out independently of the layout code."""

    def conv_bn(ci, co):
        return 9 * ci * co + co + 2 * co

    def cbam_block(c):
        h = c // cfg.cbam_reduction
        return (c * h + h) + (h * c + c) + (2 * 49 + 1)

    def unet(cin):
        ch = cfg.encoder_channels
        total, prev = 0, cin
        for c in ch:
            total += conv_bn(prev, c) + conv_bn(c, c) + (cbam_block(c) if cfg.use_cbam else 0)
            prev = c
        for lvl in range(cfg.levels - 2, -1, -1):
            c = ch[lvl]
            total += conv_bn(ch[lvl + 1], c) + conv_bn(2 * c, c) + conv_bn(c, c)
            total += cbam_block(c) if cfg.use_cbam and cfg.cbam_in_decoder else 0
        return total + 9 * ch[0] + 1

    s = cfg.stem_channels
    n = cfg.n_inputs
    total = n * conv_bn(1, s) + unet(n * s)
    if cfg.stacked:
        total += (n + 1) * conv_bn(1, s) + unet((n + 1) * s)
    return total


def rand_inputs(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    h, w = cfg.input_size
    return [rng.random((n, 1, h, w)) for _ in range(cfg.n_inputs)]


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(levels=2, encoder_channels=(4, 8, 16))
    with pytest.raises(ConfigError) as err:
        NetConfig(levels=3, encoder_channels=(4, 8, 16), cbam_reduction=2, input_size=(18, 64))
    assert err.value.field == "input_size.H"
    with pytest.raises(ConfigError) as err:
        NetConfig(levels=2, encoder_channels=(4, 6), cbam_reduction=4, input_size=(8, 8))
    assert err.value.field == "cbam_reduction"
    with pytest.raises(ConfigError):
        NetConfig(n_priors=4)


def test_default_widths():
    cfg = NetConfig()
    assert cfg.encoder_channels == (32, 64, 128, 256)
    assert cfg.stem_channels == 32 and cfg.cbam_reduction == 8


def test_arch_hash_ignores_input_size():
    a = NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, input_size=(8, 8))
    b = NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, input_size=(64, 32))
    assert a.arch_hash() == b.arch_hash()
    assert a.arch_hash() != NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=0,
                                      input_size=(8, 8)).arch_hash()
    assert NetConfig.from_json(a.to_json()) == a


# ---------------------------------------------------------------- parameters


def test_param_count_small_frozen():
    assert param_count(SMALL) == hand_count(SMALL) == 5924


@pytest.mark.parametrize(
    "cfg",
    [
        SMALL,
        TOY_CONFIG,
        NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=0, stacked=False, input_size=(8, 8)),
        NetConfig(levels=3, encoder_channels=(8, 16, 32), cbam_reduction=4, n_priors=3, use_cbam=False,
                  input_size=(16, 16)),
        NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, cbam_in_decoder=False, input_size=(8, 8)),
    ],
)
def test_param_count_matches_hand_formula(cfg):
    assert param_count(cfg) == hand_count(cfg) == init_params(cfg).count()


def test_full_config_count_reported():
    n = param_count(NetConfig())
    assert n == hand_count(NetConfig()) == 4411036
    deviation = 100 * (n - REFERENCE_PARAM_COUNT) / REFERENCE_PARAM_COUNT
    print(f"full config: {n} params vs reported 4.01M ({deviation:+.1f}%)")


def test_doubling_width_quadruples_count():
    a = NetConfig(levels=3, encoder_channels=(16, 32, 64), input_size=(16, 16))
    b = NetConfig(levels=3, encoder_channels=(32, 64, 128), input_size=(16, 16))
    assert 3.5 < param_count(b) / param_count(a) < 4.1


def test_init_deterministic_and_finite():
    a, b = init_params(TOY_CONFIG, seed=4), init_params(TOY_CONFIG, seed=4)
    c = init_params(TOY_CONFIG, seed=5)
    assert a.weights.keys() == b.weights.keys()
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    assert any(a.weights[k].tobytes() != c.weights[k].tobytes() for k in a.weights)
    assert all(np.isfinite(v).all() for v in a.weights.values())


def test_init_distribution():
    p = init_params(NetConfig(levels=2, encoder_channels=(32, 64), input_size=(8, 8)), seed=0)
    w = p.weights["stage1.unet.enc1.conv1.w"]
    assert abs(w.std() / np.sqrt(2.0 / (64 * 9)) - 1) < 0.05
    assert np.all(p.weights["stage1.unet.enc1.conv1.b"] == 0)
    assert np.all(p.weights["stage1.unet.enc1.conv1.bn.gamma"] == 1)
    assert np.all(p.weights["stage2.unet.head.w"] == 0)
    assert np.any(p.weights["stage1.unet.head.w"] != 0)


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize(
    "cfg",
    [
        SMALL,
        NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=0, input_size=(16, 8)),
        NetConfig(levels=3, encoder_channels=(4, 8, 16), cbam_reduction=2, n_priors=3, input_size=(16, 24)),
        NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=1, stacked=False, input_size=(8, 8)),
        NetConfig(levels=1, encoder_channels=(4,), cbam_reduction=2, input_size=(5, 7)),
    ],
)
def test_output_shape(cfg):
    p1, p2 = stacked_forward(rand_inputs(cfg, 3), init_params(cfg, 1, np.float64), cfg, "train")
    assert p1.shape == p2.shape == (3, 1) + cfg.input_size


def test_stem_channel_counts():
    cfg = NetConfig(levels=1, encoder_channels=(32,), input_size=(4, 4))
    P = Bound(init_params(cfg, 0, np.float64))
    feats = [stem_forward(ad.Tensor(x), P, f"stage1.stem{i}", "eval") for i, x in enumerate(rand_inputs(cfg))]
    assert ad.concat_channels(feats).shape[1] == 96
    assert [P.params.weights[f"stage1.stem{i}.w"].shape for i in range(3)] == [(32, 1, 3, 3)] * 3
    assert P.params.weights["stage2.unet.enc0.conv0.w"].shape[1] == 128
    cfg4 = NetConfig(levels=1, encoder_channels=(32,), n_priors=3, input_size=(4, 4))
    assert init_params(cfg4).weights["stage1.unet.enc0.conv0.w"].shape[1] == 128


def test_stems_are_not_shared():
    p = init_params(SMALL, 0)
    assert p.weights["stage1.stem0.w"].tobytes() != p.weights["stage1.stem1.w"].tobytes()


def test_zero_input_through_stem_is_zero():
    P = Bound(init_params(SMALL, 0, np.float64))
    out = stem_forward(ad.Tensor(np.zeros((1, 1, 8, 8))), P, "stage1.stem0", "eval")
    assert np.all(out.data == 0)


def test_all_zero_weights_give_zero_prediction():
    p = init_params(SMALL, 0, np.float64)
    for k in p.weights:
        p.weights[k] = np.zeros_like(p.weights[k])
    _, pred = stacked_forward(rand_inputs(SMALL), p, SMALL, "eval")
    assert np.all(pred.data == 0)


def test_unet_rejects_bad_dims():
    P = Bound(init_params(SMALL, 0, np.float64))
    with pytest.raises(ConfigError):
        unet_forward(ad.Tensor(np.zeros((1, 12, 7, 8))), P, "stage1.unet", SMALL, "eval")


def test_wrong_input_count():
    with pytest.raises(ConfigError):
        stacked_forward(rand_inputs(SMALL)[:2], init_params(SMALL), SMALL)


def test_unstacked_bypass():
    cfg = NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, stacked=False, input_size=(8, 8))
    p1, p2 = stacked_forward(rand_inputs(cfg), init_params(cfg, 0, np.float64), cfg)
    assert p2 is p1
    assert not any(k.startswith("stage2") for k in init_params(cfg).weights)


def test_eval_forward_deterministic():
    p = init_params(SMALL, 3, np.float64)
    for k in p.weights:
        if k.endswith("head.w"):
            p.weights[k] = np.random.default_rng(0).standard_normal(p.weights[k].shape)
    x = rand_inputs(SMALL)
    a = stacked_forward(x, p, SMALL, "eval")[1].data
    b = stacked_forward(x, p, SMALL, "eval")[1].data
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() > 0


# ---------------------------------------------------------------- cbam


def test_cbam_gates_in_open_interval():
    cfg = SMALL
    P = Bound(init_params(cfg, 2, np.float64))
    x = ad.Tensor(np.random.default_rng(1).standard_normal((2, 4, 8, 8)))
    ac = channel_attention(x, P, "stage1.unet.enc0.cbam").data
    as_ = spatial_attention(x, P, "stage1.unet.enc0.cbam").data
    for gate in (ac, as_):
        assert np.all(gate > 0) and np.all(gate < 1)
    out = cbam(x, P, "stage1.unet.enc0.cbam").data
    assert out.shape == x.shape
    assert np.all(np.abs(out) <= np.abs(x.data))


def test_cbam_saturated_gates_are_identity():
    P = Bound(init_params(SMALL, 2, np.float64))
    pre = "stage1.unet.enc0.cbam"
    for k in (f"{pre}.fc2.w", f"{pre}.spatial.w"):
        P.params.weights[k] = np.zeros_like(P.params.weights[k])
    P.params.weights[f"{pre}.fc2.b"] = np.full(4, 50.0)
    P.params.weights[f"{pre}.spatial.b"] = np.array([50.0])
    x = ad.Tensor(np.random.default_rng(1).standard_normal((1, 4, 8, 8)))
    assert np.array_equal(cbam(x, P, pre).data, x.data)


# ---------------------------------------------------------------- gradient flow


def test_every_parameter_receives_gradient_after_one_step():
    cfg = NetConfig(levels=2, encoder_channels=(4, 8), cbam_reduction=2, input_size=(16, 16))
    params = init_params(cfg, 0, np.float64)
    rng = np.random.default_rng(0)
    inputs = [rng.uniform(0.1, 1.0, (1, 1, 16, 16)) for _ in range(cfg.n_inputs)]
    target = ad.Tensor(rng.uniform(0.1, 1.0, (1, 1, 16, 16)))
    state = ad.AdamState.for_params(params.weights)

    def grads():
        P = Bound(params, requires_grad=True)
        _, pred = stacked_forward(inputs, P, cfg, "train")
        ad.ssim_loss(pred, target).backward()
        return P.grads()

    # the zero-initialized final head blocks upstream gradients until the first update
    ad.adam_step(params.weights, grads(), state, 1e-3)
    g = grads()
    assert set(g) == set(params.weights)
    dead = [k for k, v in g.items() if not np.any(v != 0)]
    assert dead == []
