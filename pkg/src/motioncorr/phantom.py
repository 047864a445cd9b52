"""Deterministic ellipsoid phantoms standing in for motion-free brain volumes."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ._seeding import mix_seed, rng_for
from .errors import ConfigError
from .volume_io import Volume

SKULL_INTENSITY = 0.85
BRAIN_INTENSITY = 0.35


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_structures: int = 6
    intensity_range: tuple = (0.1, 0.9)

    def validate(self):
        if len(self.dims) != 3:
            raise ConfigError("dims", f"expected (nx, ny, nz), got {self.dims}")
        for name, d in zip(("nx", "ny", "nz"), self.dims):
            if int(d) != d or d < 16:
                raise ConfigError(f"dims.{name}", f"must be an integer >= 16, got {d}")
        for name, d in zip(("nx", "ny"), self.dims[:2]):
            if d & (d - 1):
                raise ConfigError(f"dims.{name}", f"must be a power of two, got {d}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing", f"expected three positive values, got {self.spacing}")
        if self.n_structures < 0:
            raise ConfigError("n_structures", f"must be >= 0, got {self.n_structures}")
        lo, hi = self.intensity_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ConfigError("intensity_range", f"need 0 <= lo < hi <= 1, got {self.intensity_range}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must fit in 64 bits unsigned, got {self.seed}")


def _grid(dims):
    nx, ny, nz = dims
    # normalized coordinates in [-1, 1] along each axis, shape (nz, ny, nx)
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, nz), np.linspace(-1, 1, ny), np.linspace(-1, 1, nx), indexing="ij"
    )
    return x, y, z


def _ellipsoid(x, y, z, center, axes, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy, dz = x - center[0], y - center[1], z - center[2]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 + (dz / axes[2]) ** 2 <= 1.0


def make_phantom(spec):
    """Build a skull-plus-interior-structures volume, values in [0, 1], background 0."""
    spec.validate()
    x, y, z = _grid(spec.dims)
    head_rng = rng_for(spec.seed, 0xFFFF)
    head_axes = (0.86 + 0.06 * head_rng.random(), 0.80 + 0.06 * head_rng.random(), 0.93)
    outer = _ellipsoid(x, y, z, (0.0, 0.0, 0.0), head_axes)
    inner_axes = tuple(a * 0.88 for a in head_axes)
    inner = _ellipsoid(x, y, z, (0.0, 0.0, 0.0), inner_axes)

    img = np.zeros(outer.shape, dtype=np.float64)
    img[outer] = SKULL_INTENSITY
    img[inner] = BRAIN_INTENSITY
    lo, hi = spec.intensity_range
    for k in range(spec.n_structures):
        rng = rng_for(spec.seed, k)
        # centres kept well inside the brain region
        center = rng.uniform(-0.45, 0.45, size=3) * np.asarray(inner_axes)
        axes = rng.uniform(0.08, 0.3, size=3)
        angle = rng.uniform(0, np.pi)
        mask = _ellipsoid(x, y, z, center, axes, angle) & inner
        img[mask] = rng.uniform(lo, hi)

    img = gaussian_filter(img, sigma=1.0, mode="constant")
    img *= outer
    np.clip(img, 0.0, 1.0, out=img)
    return Volume(img.astype(np.float32), spec.spacing)


def make_contrast_variant(volume, seed):
    """Strictly monotone piecewise-linear intensity remap with seeded knots.

    Zero maps to zero, so the background is preserved.  Knots span
    ``[0, max(volume)]``; beyond that range the end segments are extended
    linearly so the map stays strictly increasing everywhere.
    """
    rng = np.random.default_rng(mix_seed(seed, 0xCE))
    top = float(volume.data.max())
    if top <= 0.0:
        top = 1.0
    n_inner = 4
    xs = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 0.95, n_inner)), [1.0]]) * top
    # increments bounded away from zero keep the map strictly increasing
    steps = rng.uniform(0.2, 1.0, n_inner + 1)
    ys = np.concatenate([[0.0], np.cumsum(steps)])
    ys = ys / ys[-1] * top
    data = volume.data.astype(np.float64)
    out = np.interp(data, xs, ys)
    lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
    hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    below, above = data < 0, data > top
    out[below] = data[below] * lo_slope
    out[above] = top + (data[above] - top) * hi_slope
    return volume.with_data(out.astype(np.float32))
