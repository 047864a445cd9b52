"""Finite-difference suite over every autodiff primitive, a CBAM block and a small stacked model."""

import numpy as np

from . import autodiff as ad
from ._seeding import rng_for
from .autodiff.gradcheck import grad_check_detail
from .model import Bound, NetConfig, cbam, init_params, stacked_forward

GRADCHECK_TOLERANCE = 1e-3

E2E_CONFIG = NetConfig(
    levels=2, encoder_channels=(4, 8), cbam_reduction=2, n_priors=2, stacked=True, input_size=(8, 8)
)


def _bn_case(mode):
    def case(rng):
        x = rng.standard_normal((3, 4, 5, 5))
        gamma, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
        stats = ad.BatchNormStats(4, np.float64)
        stats.mean[:] = rng.standard_normal(4)
        stats.var[:] = rng.uniform(0.5, 2.0, 4)
        return (lambda x, g, b: ad.batch_norm_2d(x, g, b, stats, mode)), [x, gamma, beta], None

    return case


def _ssim_case(rng):
    # 11x11 window needs an image at least that large
    a = rng.uniform(0, 1, (2, 1, 12, 12))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    return (lambda p, t: ad.ssim_loss(p, t)), [a, b], None


def _cbam_case(rng):
    c, r = 4, 2
    names = ["fc1.w", "fc1.b", "fc2.w", "fc2.b", "spatial.w", "spatial.b"]
    shapes = [(c, c // r), (c // r,), (c // r, c), (c,), (1, 2, 7, 7), (1,)]
    arrays = [rng.standard_normal((2, c, 6, 6))] + [0.5 * rng.standard_normal(s) for s in shapes]

    def fn(x, *weights):
        table = {f"blk.{n}": w for n, w in zip(names, weights)}
        return cbam(x, table, "blk")

    return fn, arrays, None


def _e2e_case(mode):
    def case(rng):
        cfg = E2E_CONFIG
        params = init_params(cfg, int(rng.integers(1 << 31)), np.float64)
        for stats in params.bn.values():
            stats.mean[:] = 0.1 * rng.standard_normal(stats.mean.shape)
            stats.var[:] = rng.uniform(0.5, 1.5, stats.var.shape)
        watched = [
            "stage1.stem1.w",
            "stage1.unet.enc1.cbam.fc1.w",
            "stage1.unet.enc0.cbam.spatial.w",
            "stage2.unet.dec0.conv1.bn.gamma",
            "stage2.unet.head.w",
        ]
        inputs = [rng.uniform(0, 1, (2, 1, 8, 8)) for _ in range(cfg.n_inputs)]

        def fn(*tensors):
            bound = Bound(params)
            bound.tensors.update(zip(watched, tensors[cfg.n_inputs :]))
            return stacked_forward(list(tensors[: cfg.n_inputs]), bound, cfg, mode)[1]

        return fn, inputs + [params.weights[n] for n in watched], None

    return case


def _simple(fn, *shapes, positive=False):
    def case(rng):
        arrays = [rng.standard_normal(s) for s in shapes]
        if positive:
            arrays = [np.abs(a) + 0.1 for a in arrays]
        return fn, arrays, None

    return case


CASES = {
    "add": _simple(ad.add, (3, 4), (4,)),
    "mul": _simple(ad.mul, (2, 3, 4), (3, 1)),
    "reshape": _simple(lambda x: ad.reshape(x, (6, 4)), (2, 3, 4)),
    "relu": _simple(ad.relu, (4, 5)),
    "sigmoid": _simple(ad.sigmoid, (4, 5)),
    "concat_channels": _simple(lambda a, b: ad.concat_channels([a, b]), (2, 2, 3, 3), (2, 3, 3, 3)),
    "dense": _simple(ad.dense, (3, 5), (5, 4), (4,)),
    "global_avg_pool": _simple(ad.global_avg_pool, (2, 3, 4, 4)),
    "global_max_pool": _simple(ad.global_max_pool, (2, 3, 4, 4)),
    "channel_mean": _simple(ad.channel_mean, (2, 3, 4, 4)),
    "channel_max": _simple(ad.channel_max, (2, 3, 4, 4)),
    "avg_pool_2x2": _simple(ad.avg_pool_2x2, (2, 3, 4, 6)),
    "upsample_nearest_2x": _simple(ad.upsample_nearest_2x, (2, 3, 3, 2)),
    "conv2d_3x3": _simple(ad.conv2d, (2, 3, 6, 5), (4, 3, 3, 3), (4,)),
    "conv2d_7x7": _simple(ad.conv2d, (1, 2, 8, 8), (1, 2, 7, 7), (1,)),
    "batch_norm_train": _bn_case("train"),
    "batch_norm_eval": _bn_case("eval"),
    "mean": _simple(ad.mean, (3, 4)),
    "ssim_loss": _ssim_case,
    "cbam": _cbam_case,
    "stacked_e2e_train": _e2e_case("train"),
    "stacked_e2e_eval": _e2e_case("eval"),
}


def run_case(name, trials=10, seed=0, max_coords=40):
    """Worst relative error of ``name`` over ``trials`` random 64-bit draws."""
    if name not in CASES:
        raise KeyError(name)
    worst, reduced = 0.0, 0
    for trial in range(trials):
        rng = rng_for(seed, trial, sum(name.encode()))
        fn, arrays, check = CASES[name](rng)
        res = grad_check_detail(fn, arrays, check=check, seed=trial, max_coords=max_coords)
        worst = max(worst, res.max_rel_error)
        reduced += res.n_step_reduced
    return {"op": name, "trials": trials, "max_rel_error": worst, "n_step_reduced": reduced}


def run_suite(names=None, trials=10, seed=0):
    names = list(CASES) if names is None else list(names)
    return [run_case(n, trials, seed) for n in names]
