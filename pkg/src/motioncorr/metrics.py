"""Image-quality metrics, before/after reports and the severity study."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError
from .motion_sim import PRESETS, corrupt_subject

REPORT_COLUMNS = (
    "subject_id",
    "slice_index",
    "ssim_before",
    "mse_before",
    "psnr_before",
    "ssim_after",
    "mse_after",
    "psnr_after",
)

# Reference SSIM R^2 between severity pairs; shown beside results, never asserted.
REFERENCE_SSIM_R2 = {"mild_vs_moderate": 0.9243, "mild_vs_severe": 0.9667, "moderate_vs_severe": 0.9191}


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("k1/k2", "must be positive")
        if self.L <= 0:
            raise ConfigError("L", "dynamic range must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window", f"must be a positive odd size, got {self.window}")

    @property
    def c1(self):
        return (self.k1 * self.L) ** 2

    @property
    def c2(self):
        return (self.k2 * self.L) ** 2

    def kernel_1d(self):
        """Normalized 1D Gaussian; the 2D window is its outer product."""
        r = self.window // 2
        x = np.arange(-r, r + 1, dtype=np.float64)
        g = np.exp(-(x**2) / (2.0 * self.sigma**2))
        return g / g.sum()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError("shape", f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m, L=1.0):
    if m == 0:
        return math.inf
    return 10.0 * math.log10(L * L / m)


def psnr(a, b, L=1.0):
    """PSNR in dB; identical images give ``math.inf``."""
    return psnr_from_mse(mse(a, b), L)


def gaussian_filter_norm(x, g):
    """Filter the last two axes with separable ``g`` using zero padding, then
    divide by the in-bounds window mass so border windows are renormalized.
    """
    y = correlate1d(x, g, axis=-1, mode="constant", cval=0.0)
    y = correlate1d(y, g, axis=-2, mode="constant", cval=0.0)
    h, w = x.shape[-2:]
    mass = np.outer(
        correlate1d(np.ones(h), g, mode="constant", cval=0.0),
        correlate1d(np.ones(w), g, mode="constant", cval=0.0),
    )
    return y / mass, mass


def ssim_moments(a, b, p):
    g = p.kernel_1d()
    mu_a, _ = gaussian_filter_norm(a, g)
    mu_b, _ = gaussian_filter_norm(b, g)
    e_aa, _ = gaussian_filter_norm(a * a, g)
    e_bb, _ = gaussian_filter_norm(b * b, g)
    e_ab, _ = gaussian_filter_norm(a * b, g)
    return mu_a, mu_b, e_aa, e_bb, e_ab


def ssim_terms(mu_a, mu_b, e_aa, e_bb, e_ab, p):
    """Numerator/denominator factors of the SSIM map from local moments."""
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + p.c1
    a2 = 2.0 * cov + p.c2
    b1 = mu_a * mu_a + mu_b * mu_b + p.c1
    b2 = var_a + var_b + p.c2
    return a1, a2, b1, b2


def ssim(a, b, p=None):
    """Gaussian-windowed SSIM.  Returns ``(mean, map)``; the map has the image shape."""
    p = p or SsimParams()
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ConfigError("shape", f"expected a 2D image, got shape {a.shape}")
    if min(a.shape) < p.window:
        raise ConfigError("shape", f"image {a.shape} smaller than the {p.window}x{p.window} window")
    a1, a2, b1, b2 = ssim_terms(*ssim_moments(a, b, p), p)
    smap = (a1 * a2) / (b1 * b2)
    return float(smap.mean()), smap


def r_squared(xs, ys):
    """Squared Pearson correlation."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigError("xs/ys", "need two 1D sequences of equal length")
    if xs.size < 3:
        raise ConfigError("xs/ys", f"need at least 3 points, got {xs.size}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ConfigError("xs/ys", "zero variance")
    return float((dx @ dy) ** 2 / (sxx * syy))


def image_metrics(img, ref, p=None):
    p = p or SsimParams()
    m = mse(img, ref)
    return {"ssim": ssim(img, ref, p)[0], "mse": m, "psnr": psnr_from_mse(m, p.L)}


def _mean_std(values):
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return {"mean": math.nan, "std": math.nan, "n": 0, "excluded_infinite": len(values)}
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
    return {"mean": mean, "std": std, "n": len(vals), "excluded_infinite": len(values) - len(vals)}


def improvement_rates(before, after):
    """Table-style improvement: SSIM in percentage points, MSE and PSNR as relative %."""
    return {
        "ssim": (after["ssim"] - before["ssim"]) * 100.0,
        "mse": (before["mse"] - after["mse"]) / before["mse"] * 100.0 if before["mse"] else math.nan,
        "psnr": (after["psnr"] - before["psnr"]) / before["psnr"] * 100.0 if before["psnr"] else math.nan,
    }


@dataclass
class MetricsReport:
    """Per-image before/after metrics with aggregates."""

    rows: list = field(default_factory=list)
    L: float = 1.0

    def add(self, subject_id, slice_index, before, after):
        self.rows.append(
            {
                "subject_id": subject_id,
                "slice_index": int(slice_index),
                "ssim_before": before["ssim"],
                "mse_before": before["mse"],
                "psnr_before": before["psnr"],
                "ssim_after": after["ssim"],
                "mse_after": after["mse"],
                "psnr_after": after["psnr"],
            }
        )

    def aggregates(self):
        agg = {}
        for col in REPORT_COLUMNS[2:]:
            agg[col] = _mean_std([r[col] for r in self.rows])
        before = {m: agg[f"{m}_before"]["mean"] for m in ("ssim", "mse", "psnr")}
        after = {m: agg[f"{m}_after"]["mean"] for m in ("ssim", "mse", "psnr")}
        return {
            "n_images": len(self.rows),
            "L": self.L,
            "metrics": agg,
            "improvement_rates": improvement_rates(before, after),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["subject_id"], r["slice_index"]] + [repr(float(r[c])) for c in REPORT_COLUMNS[2:]])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.aggregates(), fh, indent=2, default=str)


SEVERITY_PAIRS = (("mild", "moderate"), ("mild", "severe"), ("moderate", "severe"))


def severity_study(volumes, seeds, presets=("mild", "moderate", "severe"), p=None):
    """Corrupt each volume at every severity and correlate metrics across severities.

    ``seeds[i]`` drives the corruption of ``volumes[i]``; the same seed is
    used at every severity so only the preset differs.  Rows with an
    infinite PSNR (unchanged slices) are dropped from that metric's R^2.
    """
    p = p or SsimParams()
    if len(volumes) < 5:
        raise ConfigError("volumes", f"need at least 5 volumes, got {len(volumes)}")
    if len(seeds) != len(volumes):
        raise ConfigError("seeds", "need one seed per volume")
    rows = []
    for vi, (vol, seed) in enumerate(zip(volumes, seeds)):
        per_preset = {name: corrupt_subject(vol, seed, PRESETS[name])[0] for name in presets}
        for z in range(vol.data.shape[0]):
            row = {"volume": vi, "slice_index": z}
            for name in presets:
                for metric, value in image_metrics(per_preset[name].data[z], vol.data[z], p).items():
                    row[f"{metric}_{name}"] = value
            rows.append(row)

    r2 = {}
    for metric in ("ssim", "mse", "psnr"):
        r2[metric] = {}
        for lo, hi in SEVERITY_PAIRS:
            if lo not in presets or hi not in presets:
                continue
            xs = np.array([r[f"{metric}_{lo}"] for r in rows])
            ys = np.array([r[f"{metric}_{hi}"] for r in rows])
            keep = np.isfinite(xs) & np.isfinite(ys)
            try:
                r2[metric][f"{lo}_vs_{hi}"] = r_squared(xs[keep], ys[keep])
            except ConfigError:
                r2[metric][f"{lo}_vs_{hi}"] = math.nan
    means = {
        name: {m: _mean_std([r[f"{m}_{name}"] for r in rows])["mean"] for m in ("ssim", "mse", "psnr")}
        for name in presets
    }
    return {"rows": rows, "r2": r2, "means": means, "reference_ssim_r2": dict(REFERENCE_SSIM_R2)}


def write_severity_study(study, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = study["rows"]
    with open(out / "severity_scatter.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(out / "severity_r2.json", "w") as fh:
        json.dump(
            {"r2": study["r2"], "means": study["means"], "reference_ssim_r2": study["reference_ssim_r2"]},
            fh,
            indent=2,
        )
