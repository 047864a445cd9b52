"""Stacked U-Nets with per-input stems, adjacent-slice priors and CBAM.

Parameters live in a flat ``name -> ndarray`` mapping so the optimizer,
checkpointing and gradient checks can treat them uniformly.  Batch-norm
running statistics are kept separately because they are not trained.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from ._seeding import rng_for
from .errors import ConfigError

REFERENCE_PARAM_COUNT = 4.01e6


@dataclass(frozen=True)
class NetConfig:
    levels: int = 4
    encoder_channels: tuple = (32, 64, 128, 256)
    stem_channels: int = None
    cbam_reduction: int = 8
    n_priors: int = 2
    stacked: bool = True
    use_cbam: bool = True
    cbam_in_decoder: bool = True
    input_size: tuple = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.stem_channels is None:
            object.__setattr__(self, "stem_channels", self.encoder_channels[0])
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ConfigError("levels", f"must be >= 1, got {self.levels}")
        if len(self.encoder_channels) != self.levels:
            raise ConfigError(
                "encoder_channels", f"length {len(self.encoder_channels)} != levels {self.levels}"
            )
        if self.n_priors not in (0, 1, 2, 3):
            raise ConfigError("n_priors", f"must be 0, 1, 2 or 3, got {self.n_priors}")
        step = 2 ** (self.levels - 1)
        for name, s in zip(("H", "W"), self.input_size):
            if s < 1 or s % step:
                raise ConfigError(f"input_size.{name}", f"{s} is not divisible by {step}")
        if self.use_cbam:
            for c in self.encoder_channels:
                if c % self.cbam_reduction or c // self.cbam_reduction < 1:
                    raise ConfigError(
                        "cbam_reduction", f"channel count {c} not divisible by r={self.cbam_reduction}"
                    )

    @property
    def n_inputs(self):
        return 1 + self.n_priors

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)

    def arch_hash(self):
        """Hash of everything that determines parameter names and shapes."""
        d = self.to_json()
        d.pop("input_size")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


TOY_CONFIG = NetConfig(
    levels=3, encoder_channels=(8, 16, 32), cbam_reduction=2, n_priors=2, stacked=True, input_size=(64, 64)
)


@dataclass
class ModelParams:
    weights: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    def astype(self, dtype):
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: s.astype(dtype) for k, s in self.bn.items()},
        )

    def copy(self):
        return self.astype(next(iter(self.weights.values())).dtype)

    def count(self):
        return int(sum(v.size for v in self.weights.values()))


# ---------------------------------------------------------------- layout


def _conv_spec(prefix, cin, cout, k=3, bn=True, init="he"):
    out = [(f"{prefix}.w", (cout, cin, k, k), init, cin * k * k), (f"{prefix}.b", (cout,), "zero", 0)]
    if bn:
        out += [(f"{prefix}.bn.gamma", (cout,), "one", 0), (f"{prefix}.bn.beta", (cout,), "zero", 0)]
    return out


def _cbam_spec(prefix, c, r):
    h = c // r
    return [
        (f"{prefix}.fc1.w", (c, h), "he", c),
        (f"{prefix}.fc1.b", (h,), "zero", 0),
        (f"{prefix}.fc2.w", (h, c), "he", h),
        (f"{prefix}.fc2.b", (c,), "zero", 0),
    ] + _conv_spec(f"{prefix}.spatial", 2, 1, k=7, bn=False)


def _unet_spec(prefix, cin, cfg, head_init="he"):
    spec = []
    chans = cfg.encoder_channels
    c_prev = cin
    for lvl, c in enumerate(chans):
        spec += _conv_spec(f"{prefix}.enc{lvl}.conv0", c_prev, c)
        spec += _conv_spec(f"{prefix}.enc{lvl}.conv1", c, c)
        if cfg.use_cbam:
            spec += _cbam_spec(f"{prefix}.enc{lvl}.cbam", c, cfg.cbam_reduction)
        c_prev = c
    for lvl in range(cfg.levels - 2, -1, -1):
        c = chans[lvl]
        spec += _conv_spec(f"{prefix}.dec{lvl}.up", chans[lvl + 1], c)
        spec += _conv_spec(f"{prefix}.dec{lvl}.conv0", 2 * c, c)
        spec += _conv_spec(f"{prefix}.dec{lvl}.conv1", c, c)
        if cfg.use_cbam and cfg.cbam_in_decoder:
            spec += _cbam_spec(f"{prefix}.dec{lvl}.cbam", c, cfg.cbam_reduction)
    spec += _conv_spec(f"{prefix}.head", chans[0], 1, bn=False, init=head_init)
    return spec


def param_layout(cfg):
    """Ordered ``(name, shape, init, fan_in)`` for every trainable tensor."""
    spec = []
    n_in = cfg.n_inputs
    for i in range(n_in):
        spec += _conv_spec(f"stage1.stem{i}", 1, cfg.stem_channels)
    # the final head starts at zero so the network begins from a blank
    # prediction rather than noise, which SSIM against an exactly-zero
    # background punishes heavily.  An intermediate head stays random: a
    # constant pred1 would leave its stage-2 stem at the ReLU kink after
    # batch norm and starve stage 1 of gradient.
    final = "zero"
    spec += _unet_spec("stage1.unet", n_in * cfg.stem_channels, cfg, "he" if cfg.stacked else final)
    if cfg.stacked:
        for i in range(n_in + 1):
            spec += _conv_spec(f"stage2.stem{i}", 1, cfg.stem_channels)
        spec += _unet_spec("stage2.unet", (n_in + 1) * cfg.stem_channels, cfg, final)
    return spec


def param_count(cfg):
    return int(sum(np.prod(shape) for _, shape, _, _ in param_layout(cfg)))


def init_params(cfg, seed=0, dtype=np.float32):
    """He-normal (fan-in) weights, zero biases and final output head, unit batch-norm scale."""
    params = ModelParams()
    for idx, (name, shape, kind, fan_in) in enumerate(param_layout(cfg)):
        if kind == "he":
            arr = rng_for(seed, idx).standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params.weights[name] = arr.astype(dtype)
        if name.endswith(".bn.gamma"):
            params.bn[name[: -len(".gamma")]] = ad.BatchNormStats(shape[0], dtype)
    return params


# ---------------------------------------------------------------- forward


class Bound:
    """Params wrapped as Tensors for one forward pass."""

    def __init__(self, params, requires_grad=False):
        self.params = params
        self.requires_grad = requires_grad
        self.tensors = {}

    def __getitem__(self, name):
        t = self.tensors.get(name)
        if t is None:
            t = ad.Tensor(self.params.weights[name], requires_grad=self.requires_grad)
            self.tensors[name] = t
        return t

    def grads(self):
        return {k: t.grad for k, t in self.tensors.items() if t.grad is not None}


def conv_bn_relu(x, P, prefix, mode):
    y = ad.conv2d(x, P[f"{prefix}.w"], P[f"{prefix}.b"])
    y = ad.batch_norm_2d(
        y, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"], P.params.bn[f"{prefix}.bn"], mode
    )
    return ad.relu(y)


def channel_attention(x, P, prefix):
    n, c = x.shape[:2]

    def mlp(d):
        h = ad.relu(ad.dense(d, P[f"{prefix}.fc1.w"], P[f"{prefix}.fc1.b"]))
        return ad.dense(h, P[f"{prefix}.fc2.w"], P[f"{prefix}.fc2.b"])

    logits = ad.add(mlp(ad.global_avg_pool(x)), mlp(ad.global_max_pool(x)))
    return ad.reshape(ad.sigmoid(logits), (n, c, 1, 1))


def spatial_attention(x, P, prefix):
    pooled = ad.concat_channels([ad.channel_mean(x), ad.channel_max(x)])
    return ad.sigmoid(ad.conv2d(pooled, P[f"{prefix}.spatial.w"], P[f"{prefix}.spatial.b"]))


def cbam(x, P, prefix):
    """Channel gate then spatial gate; each gate lies in (0, 1)."""
    x = ad.mul(x, channel_attention(x, P, prefix))
    return ad.mul(x, spatial_attention(x, P, prefix))


def unet_forward(x, P, prefix, cfg, mode):
    h, w = x.shape[2:]
    step = 2 ** (cfg.levels - 1)
    if h % step or w % step:
        raise ConfigError("input_size", f"{(h, w)} not divisible by {step}")
    skips = []
    for lvl in range(cfg.levels):
        if lvl > 0:
            x = ad.avg_pool_2x2(x)
        x = conv_bn_relu(x, P, f"{prefix}.enc{lvl}.conv0", mode)
        x = conv_bn_relu(x, P, f"{prefix}.enc{lvl}.conv1", mode)
        if cfg.use_cbam:
            x = cbam(x, P, f"{prefix}.enc{lvl}.cbam")
        skips.append(x)
    for lvl in range(cfg.levels - 2, -1, -1):
        x = conv_bn_relu(ad.upsample_nearest_2x(x), P, f"{prefix}.dec{lvl}.up", mode)
        x = ad.concat_channels([skips[lvl], x])
        x = conv_bn_relu(x, P, f"{prefix}.dec{lvl}.conv0", mode)
        x = conv_bn_relu(x, P, f"{prefix}.dec{lvl}.conv1", mode)
        if cfg.use_cbam and cfg.cbam_in_decoder:
            x = cbam(x, P, f"{prefix}.dec{lvl}.cbam")
    return ad.conv2d(x, P[f"{prefix}.head.w"], P[f"{prefix}.head.b"])


def stem_forward(x, P, prefix, mode):
    return conv_bn_relu(x, P, prefix, mode)


def _stage(inputs, P, stage, cfg, mode):
    feats = [stem_forward(t, P, f"{stage}.stem{i}", mode) for i, t in enumerate(inputs)]
    return unet_forward(ad.concat_channels(feats), P, f"{stage}.unet", cfg, mode)


def stacked_forward(inputs, P, cfg, mode="eval"):
    """Run both stages.

    ``inputs`` are (N, 1, H, W) arrays or Tensors in stem order: ``center``
    (no priors), ``center, extra`` (extra prior only), ``prev, center, next``
    (adjacent-slice priors) or ``prev, center, next, extra``.
    ``P`` is a :class:`Bound` or :class:`ModelParams`.  Returns
    ``(pred1, pred2)``; ``pred2 is pred1`` when the config is not stacked.
    """
    if isinstance(P, ModelParams):
        P = Bound(P)
    inputs = [t if isinstance(t, ad.Tensor) else ad.Tensor(t) for t in inputs]
    if len(inputs) != cfg.n_inputs:
        raise ConfigError("inputs", f"expected {cfg.n_inputs} inputs, got {len(inputs)}")
    pred1 = _stage(inputs, P, "stage1", cfg, mode)
    if not cfg.stacked:
        return pred1, pred1
    pred2 = _stage([pred1] + inputs, P, "stage2", cfg, mode)
    return pred1, pred2


def batch_inputs(triplets, n_priors, dtype=np.float32):
    """Stack triplets into per-input (N, 1, H, W) arrays in stem order."""
    per = [t.inputs(n_priors) for t in triplets]
    return [np.stack([p[i] for p in per])[:, None].astype(dtype) for i in range(len(per[0]))]


def predict(params, cfg, triplets, batch_size=8):
    """Eval-mode ``pred2`` for each triplet, as (H, W) arrays."""
    out = []
    with ad.no_grad():
        for start in range(0, len(triplets), batch_size):
            chunk = triplets[start : start + batch_size]
            _, pred2 = stacked_forward(batch_inputs(chunk, cfg.n_priors), params, cfg, "eval")
            out.extend(pred2.data[:, 0])
    return out
