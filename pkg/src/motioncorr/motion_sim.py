"""Rigid-motion corruption through k-space line sampling.

The degradation is ``x_m = IDFT( M( DFT( T(R(x)) ) ) )``: for every
acquisition unit the clean image is rotated in the image domain, Fourier
transformed, translated with a linear phase ramp, and only that unit's
k-space line (2D) or readout line at one ``(ky, kz)`` point (3D) is kept.

K-space is handled in centred (fftshifted) order, so acquisition unit ``j``
of a 2D trajectory is the line with signed frequency ``ky = j - ny // 2``.
Images are numpy arrays indexed ``[y, x]`` (2D) or ``[z, y, x]`` (3D).
"""

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from ._seeding import mix_seed, rng_for
from .errors import ConfigError, FormatError
from .volume_io import Volume

log = logging.getLogger(__name__)

GLOBAL_LIMIT = 7.0


class Ordering(enum.Enum):
    LINES2D = "lines2d"
    POINTS3D = "points3d"


@dataclass(frozen=True)
class MotionState:
    rot_deg: tuple = (0.0, 0.0, 0.0)
    trans_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(abs(r) > 90 for r in self.rot_deg):
            raise ConfigError("rot_deg", f"each rotation must satisfy |rho| <= 90, got {self.rot_deg}")
        object.__setattr__(self, "rot_deg", tuple(float(r) for r in self.rot_deg))
        object.__setattr__(self, "trans_mm", tuple(float(t) for t in self.trans_mm))

    @property
    def is_zero(self):
        return not any(self.rot_deg) and not any(self.trans_mm)


ZERO_STATE = MotionState()


@dataclass(frozen=True)
class MotionTrajectory:
    states: tuple
    ordering: Ordering = Ordering.LINES2D

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self):
        return len(self.states)

    @classmethod
    def constant(cls, state, n_pe, ordering=Ordering.LINES2D):
        return cls((state,) * n_pe, ordering)

    def to_json(self):
        return {
            "ordering": self.ordering.value,
            "states": [
                {"rot_deg": list(s.rot_deg), "trans_mm": list(s.trans_mm)} for s in self.states
            ],
        }

    @classmethod
    def from_json(cls, obj):
        try:
            ordering = Ordering(obj["ordering"])
            states = [MotionState(tuple(s["rot_deg"]), tuple(s["trans_mm"])) for s in obj["states"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed trajectory: {exc}") from exc
        return cls(tuple(states), ordering)


def save_trajectory(traj, path):
    Path(path).write_text(json.dumps(traj.to_json()))


def load_trajectory(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos) from exc
    return MotionTrajectory.from_json(obj)


@dataclass(frozen=True)
class SeverityPreset:
    name: str
    max_peaks: int
    rot_limit_deg: float
    trans_limit_mm: float
    allow_center: bool = False

    def __post_init__(self):
        if self.rot_limit_deg > GLOBAL_LIMIT or self.trans_limit_mm > GLOBAL_LIMIT:
            raise ConfigError(self.name, f"limits must not exceed {GLOBAL_LIMIT}")
        if self.max_peaks < 0:
            raise ConfigError(self.name, "max_peaks must be >= 0")


PRESETS = {
    "mild": SeverityPreset("mild", 2, 2.0, 2.0),
    "moderate": SeverityPreset("moderate", 4, 4.0, 4.0),
    "severe": SeverityPreset("severe", 8, 7.0, 7.0, allow_center=True),
}


def get_preset(preset):
    if isinstance(preset, SeverityPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


def generate_trajectory(seed, n_pe, preset, ordering=Ordering.LINES2D, dc_index=None):
    """Piecewise-constant trajectory made of random "peaks" on a zero baseline.

    Between 1 and ``preset.max_peaks`` contiguous intervals, each 2-15% of
    ``n_pe`` long, receive one constant state drawn uniformly within the
    preset limits.  Later peaks overwrite earlier ones where they overlap.
    Unless the preset allows it, peaks avoid the middle 4% of units around
    ``dc_index`` (default ``n_pe // 2``).  For ``LINES2D`` only in-plane
    components (rz, tx, ty) are drawn.
    """
    preset = get_preset(preset)
    if n_pe < 4:
        raise ConfigError("n_pe", f"must be >= 4, got {n_pe}")
    states = [ZERO_STATE] * n_pe
    if preset.max_peaks == 0:
        return MotionTrajectory(tuple(states), ordering)

    rng = rng_for(seed, n_pe)
    dc = n_pe // 2 if dc_index is None else dc_index
    dc_width = max(1, round(0.04 * n_pe))
    dc_lo, dc_hi = dc - dc_width // 2, dc - dc_width // 2 + dc_width
    min_len = max(1, int(np.ceil(0.02 * n_pe)))
    max_len = max(min_len, int(np.floor(0.15 * n_pe)))

    n_peaks = int(rng.integers(1, preset.max_peaks + 1))
    for _ in range(n_peaks):
        length = int(rng.integers(min_len, max_len + 1))
        starts = np.arange(0, n_pe - length + 1)
        if not preset.allow_center:
            starts = starts[(starts + length <= dc_lo) | (starts >= dc_hi)]
        rot = rng.uniform(-preset.rot_limit_deg, preset.rot_limit_deg, size=3)
        trans = rng.uniform(-preset.trans_limit_mm, preset.trans_limit_mm, size=3)
        if starts.size == 0:
            continue
        start = int(starts[rng.integers(starts.size)])
        if ordering is Ordering.LINES2D:
            rot[:2] = 0.0
            trans[2] = 0.0
        state = MotionState(tuple(rot), tuple(trans))
        states[start : start + length] = [state] * length
    return MotionTrajectory(tuple(states), ordering)


def rotate_image_2d(img, rz_deg):
    """Bilinear rotation about the image centre with zero fill.

    Positive angles rotate counter-clockwise in (x, y) coordinates; with
    row index = y this maps ``out[i, j] = img[n-1-j, i]`` at 90 degrees.
    """
    img = np.asarray(img)
    if rz_deg == 0:
        return img.copy()
    ny, nx = img.shape
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    t = np.deg2rad(rz_deg)
    c, s = np.cos(t), np.sin(t)
    yy, xx = np.meshgrid(np.arange(ny) - cy, np.arange(nx) - cx, indexing="ij")
    # inverse map: sample the input at R(-t) p
    src_x = c * xx + s * yy + cx
    src_y = -s * xx + c * yy + cy
    out = map_coordinates(img, [src_y, src_x], order=1, mode="grid-constant", cval=0.0)
    return out.astype(img.dtype, copy=False)


def rotation_matrix(rot_deg):
    """``Rz @ Ry @ Rx`` acting on (x, y, z) column vectors."""
    ax, ay, az = np.deg2rad(rot_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_volume_3d(vol, rot_deg):
    """Trilinear rotation of a ``[z, y, x]`` array about its centre, zero fill."""
    vol = np.asarray(vol)
    if not any(rot_deg):
        return vol.copy()
    nz, ny, nx = vol.shape
    center = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0])
    rinv = rotation_matrix(rot_deg).T
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    p = np.stack([xx.ravel(), yy.ravel(), zz.ravel()]) - center[:, None]
    src = rinv @ p + center[:, None]
    out = map_coordinates(vol, [src[2], src[1], src[0]], order=1, mode="grid-constant", cval=0.0)
    return out.reshape(vol.shape).astype(vol.dtype, copy=False)


def signed_freqs(n):
    """Signed frequency of each index in centred k-space order: ``[-n/2, n/2)``."""
    return np.arange(n) - n // 2


def translation_phase(kx, ky, dims, trans_px):
    """``exp(-i 2 pi (kx dx / nx + ky dy / ny))`` for signed frequency indices.

    Multiplying the spectrum by this factor shifts the image by ``(+dx, +dy)``.
    Broadcasts over array-valued ``kx``/``ky``.
    """
    nx, ny = dims
    dx, dy = trans_px
    arg = 2.0 * np.pi * (np.asarray(kx) * (dx / nx) + np.asarray(ky) * (dy / ny))
    return np.exp(-1j * arg)


def _phase_2d(shape, trans_px, pe_only):
    ny, nx = shape
    dx, dy = trans_px
    if pe_only:
        dx = 0.0
    return translation_phase(signed_freqs(nx)[None, :], signed_freqs(ny)[:, None], (nx, ny), (dx, dy))


def _phase_3d(shape, trans_px, pe_only):
    nz, ny, nx = shape
    dx, dy, dz = trans_px
    if pe_only:
        dx = 0.0
    fz = signed_freqs(nz)[:, None, None]
    phase = translation_phase(signed_freqs(nx)[None, None, :], signed_freqs(ny)[None, :, None], (nx, ny), (dx, dy))
    return phase * np.exp(-2j * np.pi * fz * (dz / nz))


def _fft2c(img):
    return np.fft.fftshift(np.fft.fft2(img))


def _ifft2c(k):
    return np.fft.ifft2(np.fft.ifftshift(k))


def _check_pow2(shape):
    for n in shape:
        if n < 1 or n & (n - 1):
            raise ConfigError("dims", f"all dimensions must be powers of two, got {tuple(shape)}")


def _unique_states(states):
    groups = {}
    for j, s in enumerate(states):
        groups.setdefault(s, []).append(j)
    return groups


def corrupt_kspace_2d(clean, traj, spacing=(1.0, 1.0), pe_only=False):
    """Centred k-space of the corrupted slice (before the inverse DFT)."""
    clean = np.asarray(clean, dtype=np.float64)
    ny, nx = clean.shape
    _check_pow2(clean.shape)
    if len(traj) != ny:
        raise ConfigError("trajectory", f"length {len(traj)} does not match ny={ny}")
    sx, sy = spacing[0], spacing[1]
    out = np.zeros((ny, nx), dtype=np.complex128)
    # lines sharing a state share one rotate+DFT
    for state, lines in _unique_states(traj.states).items():
        img = rotate_image_2d(clean, state.rot_deg[2])
        k = _fft2c(img)
        tx, ty = state.trans_mm[0], state.trans_mm[1]
        if tx or ty:
            k = k * _phase_2d((ny, nx), (tx / sx, ty / sy), pe_only)
        out[lines] = k[lines]
    return out


def _real_output(img_c, dtype):
    imag = float(np.max(np.abs(img_c.imag))) if img_c.size else 0.0
    log.debug("discarded imaginary part, max magnitude %.3g", imag)
    out = img_c.real
    if not np.all(np.isfinite(out)):
        raise ConfigError("input", "corruption produced non-finite values")
    return out.astype(dtype)


def corrupt_slice(clean, traj, spacing=(1.0, 1.0), pe_only=False):
    """Apply a ``LINES2D`` trajectory to a 2D ``[y, x]`` slice."""
    k = corrupt_kspace_2d(clean, traj, spacing, pe_only)
    return _real_output(_ifft2c(k), np.float32)


def corrupt_volume(clean, traj, pe_only=False):
    """Apply a ``POINTS3D`` trajectory with full 3D rotation and translation.

    Unit ``p`` of the trajectory is the readout line at ``ky = p % ny``,
    ``kz = p // ny`` (centred indices).  Intended for small volumes.
    """
    data = np.asarray(clean.data, dtype=np.float64)
    nz, ny, nx = data.shape
    _check_pow2(data.shape)
    if len(traj) != ny * nz:
        raise ConfigError("trajectory", f"length {len(traj)} does not match ny*nz={ny * nz}")
    sx, sy, sz = clean.spacing
    out = np.zeros(data.shape, dtype=np.complex128)
    for state, units in _unique_states(traj.states).items():
        vol = rotate_volume_3d(data, state.rot_deg)
        k = np.fft.fftshift(np.fft.fftn(vol))
        t = state.trans_mm
        if any(t):
            k = k * _phase_3d(data.shape, (t[0] / sx, t[1] / sy, t[2] / sz), pe_only)
        units = np.asarray(units)
        kz, ky = units // ny, units % ny
        out[kz, ky, :] = k[kz, ky, :]
    img = np.fft.ifftn(np.fft.ifftshift(out))
    return clean.with_data(_real_output(img, np.float32))


def corrupt_subject(clean, seed, preset, pe_only=False):
    """Corrupt every z-slice independently with trajectories seeded from ``(seed, z)``.

    Returns the corrupted volume and the list of per-slice trajectories.
    """
    preset = get_preset(preset)
    nz, ny, _ = clean.data.shape
    sx, sy, _ = clean.spacing
    out = np.empty_like(clean.data)
    trajs = []
    for z in range(nz):
        traj = generate_trajectory(mix_seed(seed, z), ny, preset)
        out[z] = corrupt_slice(clean.data[z], traj, (sx, sy), pe_only)
        trajs.append(traj)
    return clean.with_data(out), trajs
