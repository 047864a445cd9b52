"""Volume container, ``.mvol`` persistence, normalization and prior triplets.

A ``.mvol`` file is::

    b"MVOL0001" | uint32 LE header length N | N bytes UTF-8 JSON | float32 LE blob

The JSON header is ``{"dims": [nx, ny, nz], "spacing": [sx, sy, sz],
"dtype": "f32le"}`` and the blob holds ``nx*ny*nz`` values with x varying
fastest and z slowest.  In memory the data array therefore has numpy shape
``(nz, ny, nx)`` in C order, so ``volume.data[z]`` is one ``(ny, nx)`` slice.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"MVOL0001"
_PREAMBLE = len(MAGIC) + 4


@dataclass(frozen=True)
class Volume:
    """3D scalar image.  ``data`` is float32 with shape ``(nz, ny, nx)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ConfigError("data", f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ConfigError("dims", f"every dimension must be >= 1, got {self.dims_of(data)}")
        if not np.all(np.isfinite(data)):
            raise ConfigError("data", "contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ConfigError("spacing", f"expected three positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @staticmethod
    def dims_of(data):
        nz, ny, nx = data.shape
        return (nx, ny, nz)

    @property
    def dims(self):
        """``(nx, ny, nz)``."""
        return self.dims_of(self.data)

    def slice(self, z):
        return self.data[z]

    def with_data(self, data):
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class SliceTriplet:
    """Center slice with its adjacent-slice priors and an optional extra prior."""

    prev: np.ndarray
    center: np.ndarray
    next: np.ndarray
    slice_index: int
    subject_id: str = ""
    extra_prior: Optional[np.ndarray] = field(default=None)

    def inputs(self, n_priors):
        """Network inputs in stem order.

        ``n_priors``: 0 = center only, 1 = center + extra prior,
        2 = adjacent slices, 3 = adjacent slices + extra prior.
        """
        if n_priors == 0:
            return [self.center]
        if n_priors in (1, 3) and self.extra_prior is None:
            raise ConfigError("n_priors", f"{n_priors} needs an extra prior but the triplet has none")
        if n_priors == 1:
            return [self.center, self.extra_prior]
        if n_priors == 2:
            return [self.prev, self.center, self.next]
        if n_priors == 3:
            return [self.prev, self.center, self.next, self.extra_prior]
        raise ConfigError("n_priors", f"must be 0, 1, 2 or 3, got {n_priors}")


def save_volume(volume, path):
    nx, ny, nz = volume.dims
    header = json.dumps(
        {"dims": [nx, ny, nz], "spacing": list(volume.spacing), "dtype": "f32le"}
    ).encode("utf-8")
    blob = volume.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_volume(path):
    raw = Path(path).read_bytes()
    return decode_volume(raw)


def decode_volume(raw):
    if len(raw) < _PREAMBLE or raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, expected MVOL0001", 0)
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    if _PREAMBLE + n > len(raw):
        raise FormatError(f"header length {n} exceeds file size", len(MAGIC))
    try:
        header = json.loads(raw[_PREAMBLE : _PREAMBLE + n].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing"]]
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}", _PREAMBLE) from exc
    if dtype != "f32le":
        raise FormatError(f"unsupported dtype {dtype!r}", _PREAMBLE)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"invalid dims {dims}", _PREAMBLE)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise FormatError(f"invalid spacing {spacing}", _PREAMBLE)
    start = _PREAMBLE + n
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) - start != expected:
        raise FormatError(
            f"blob length {len(raw) - start} does not match dims {dims} ({expected} bytes)",
            start,
        )
    nx, ny, nz = dims
    data = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=start)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite value in data blob", start + 4 * int(bad[0]))
    return Volume(data.reshape(nz, ny, nx).astype(np.float32), tuple(spacing))


def normalize_volume(volume, p_lo=0.5, p_hi=99.5):
    """Clip to the ``[P(p_lo), P(p_hi)]`` percentile window and map it to [0, 1].

    A degenerate window (constant volume) maps to all zeros.
    """
    if not (0 <= p_lo < p_hi <= 100):
        raise ConfigError("percentiles", f"need 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    data = volume.data.astype(np.float64)
    lo, hi = np.percentile(data, [p_lo, p_hi])
    if not hi > lo:
        return volume.with_data(np.zeros_like(volume.data))
    out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return volume.with_data(np.clip(out, 0.0, 1.0))


def extract_triplet(volume, i, extra=None, subject_id=""):
    """Slice ``i`` with neighbours ``i-1``/``i+1``; edge slices repeat the center."""
    nz = volume.data.shape[0]
    if not 0 <= i < nz:
        raise ConfigError("slice_index", f"{i} out of range [0, {nz - 1}]")
    if extra is not None and extra.data.shape != volume.data.shape:
        raise ConfigError("extra", f"dims {extra.dims} do not match volume dims {volume.dims}")
    center = volume.data[i]
    prev = volume.data[i - 1] if i > 0 else center
    nxt = volume.data[i + 1] if i < nz - 1 else center
    return SliceTriplet(
        prev=prev,
        center=center,
        next=nxt,
        slice_index=i,
        subject_id=subject_id,
        extra_prior=None if extra is None else extra.data[i],
    )
