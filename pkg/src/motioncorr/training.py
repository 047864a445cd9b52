"""Dataset synthesis, subject-level splits, SSIM-loss training, evaluation and ablations."""

import contextlib
import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from ._seeding import mix_seed, rng_for
from .checkpoint import Checkpoint
from .errors import ConfigError, NumericalError
from .metrics import MetricsReport, SsimParams, image_metrics
from .model import Bound, NetConfig, batch_inputs, init_params, predict, stacked_forward
from .motion_sim import PRESETS, corrupt_subject
from .phantom import make_contrast_variant
from .volume_io import extract_triplet, normalize_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    triplet: object
    target: np.ndarray
    preset: str

    @property
    def subject_id(self):
        return self.triplet.subject_id

    @property
    def slice_index(self):
        return self.triplet.slice_index

    @property
    def key(self):
        return (self.subject_id, self.slice_index)


def _subject_code(subject_id):
    return zlib.crc32(subject_id.encode("utf-8"))


def assign_presets(subject_ids, seed, presets=("mild", "moderate", "severe")):
    """Spread presets evenly over subjects in a seeded order."""
    ids = sorted(subject_ids)
    order = rng_for(seed, 0xA55).permutation(len(ids))
    return {ids[k]: presets[rank % len(presets)] for rank, k in enumerate(order)}


def build_dataset(volumes, seed, presets=("mild", "moderate", "severe"), extra_prior=False):
    """Corrupt every subject once with its assigned preset and cut it into samples.

    ``volumes`` maps subject id to a clean Volume.  The clean volume is
    percentile-normalized, corrupted, and the corrupted copy clipped to
    [0, 1].  Triplets come from the corrupted volume, targets from the clean
    one.  With ``extra_prior`` each triplet also carries the same slice of a
    contrast-remapped clean volume.
    """
    if len(volumes) < 2:
        raise ConfigError("volumes", f"need at least 2 subjects, got {len(volumes)}")
    assignment = assign_presets(volumes, seed, presets)
    samples = []
    for sid in sorted(volumes):
        clean = normalize_volume(volumes[sid])
        code = _subject_code(sid)
        corrupted, _ = corrupt_subject(clean, mix_seed(seed, code), PRESETS[assignment[sid]])
        corrupted = corrupted.with_data(np.clip(corrupted.data, 0.0, 1.0))
        extra = make_contrast_variant(clean, mix_seed(seed, code, 0xCE)) if extra_prior else None
        for z in range(clean.data.shape[0]):
            trip = extract_triplet(corrupted, z, extra, subject_id=sid)
            samples.append(Sample(trip, clean.data[z], assignment[sid]))
    return samples


@dataclass(frozen=True)
class DatasetSplit:
    """Subject-level split.  Validation images are drawn from training subjects."""

    train_subjects: tuple
    test_subjects: tuple
    seed: int = 0
    val_fraction: float = 0.05

    def __post_init__(self):
        if set(self.train_subjects) & set(self.test_subjects):
            raise ConfigError("split", "train and test subjects overlap")

    def partition(self, samples):
        """``(train, val, test)`` sample lists."""
        train_ids, test_ids = set(self.train_subjects), set(self.test_subjects)
        pool = [s for s in samples if s.subject_id in train_ids]
        test = [s for s in samples if s.subject_id in test_ids]
        n_val = int(round(self.val_fraction * len(pool)))
        if len(pool) >= 2:
            n_val = max(1, n_val)
        chosen = set(rng_for(self.seed, 0x7A1).permutation(len(pool))[:n_val].tolist())
        train = [s for k, s in enumerate(pool) if k not in chosen]
        val = [s for k, s in enumerate(pool) if k in chosen]
        return train, val, test

    def to_json(self):
        return {
            "train_subjects": list(self.train_subjects),
            "test_subjects": list(self.test_subjects),
            "seed": self.seed,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["train_subjects"]), tuple(obj["test_subjects"]), obj["seed"], obj["val_fraction"])


def split_subjects(ids, seed, test_fraction=0.2, val_fraction=0.05):
    """Shuffle subjects by seed; ``floor(test_fraction * n)`` (at least 1) go to test."""
    ids = sorted(set(ids))
    if len(ids) < 2:
        raise ConfigError("ids", "need at least 2 subjects to split")
    order = rng_for(seed, 0x5B1).permutation(len(ids))
    shuffled = [ids[k] for k in order]
    n_test = max(1, int(math.floor(test_fraction * len(ids))))
    return DatasetSplit(tuple(shuffled[n_test:]), tuple(shuffled[:n_test]), seed, val_fraction)


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    batch_size: int = 10
    epochs: int = 50
    lr0: float = 1e-3
    seed: int = 0
    presets: tuple = ("mild", "moderate", "severe")
    deep_supervision: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ConfigError("lr0", f"must be positive, got {self.lr0}")

    def to_json(self):
        d = asdict(self)
        d["net"] = self.net.to_json()
        d["presets"] = list(self.presets)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["net"] = NetConfig.from_json(obj.get("net", {}))
        if "presets" in obj:
            obj["presets"] = tuple(obj["presets"])
        return cls(**obj)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list
    batch_log: list


@contextlib.contextmanager
def determinism(enabled=True):
    """Single-threaded BLAS so reductions run in a fixed order."""
    if enabled:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def _targets(samples):
    return np.stack([s.target for s in samples])[:, None].astype(np.float32)


def _loss(p1, p2, target, deep_supervision):
    loss = ad.ssim_loss(p2, target)
    if deep_supervision:
        loss = ad.add(loss, ad.mul(ad.ssim_loss(p1, target), 0.5))
    return loss


def validation_loss(params, net, samples, batch_size, deep_supervision=False):
    if not samples:
        return math.nan
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            p1, p2 = stacked_forward(batch_inputs([s.triplet for s in chunk], net.n_priors), params, net, "eval")
            total += _loss(p1, p2, _targets(chunk), deep_supervision).item() * len(chunk)
    return total / len(samples)


def _snapshot(params, adam, epoch, cfg, history, meta):
    return Checkpoint(
        params=params.copy(),
        adam=ad.AdamState(
            m={k: v.copy() for k, v in adam.m.items()},
            v={k: v.copy() for k, v in adam.v.items()},
            t=adam.t,
            beta1=adam.beta1,
            beta2=adam.beta2,
            eps=adam.eps,
        ),
        epoch=epoch,
        net=cfg.net,
        train_config=cfg.to_json(),
        history=[dict(h) for h in history],
        meta=dict(meta),
    )


def train(cfg, samples, split, resume=None, deterministic=True, progress=None):
    """Train with Adam on ``1 - SSIM(pred2, target)``.

    Each epoch reshuffles the training images with a seed derived from
    ``(cfg.seed, epoch)``, so resuming from a checkpoint replays the same
    batches.  Returns the best-validation and the last checkpoint together
    with the per-epoch history and a log of which images every batch saw.
    """
    train_set, val_set, _ = split.partition(samples)
    if not train_set:
        raise ConfigError("split", "training split is empty")
    net = cfg.net
    meta = {"split": split.to_json()}
    if resume is None:
        params = init_params(net, cfg.seed)
        adam = ad.AdamState.for_params(params.weights)
        history, start = [], 0
    else:
        if resume.net.arch_hash() != net.arch_hash():
            raise ConfigError("resume", "checkpoint architecture does not match config")
        params, adam = resume.params.copy(), _snapshot(resume.params, resume.adam, 0, cfg, [], {}).adam
        history, start = [dict(h) for h in resume.history], resume.epoch

    # best-val selection covers the epochs run by this call
    best, best_val = None, math.inf
    batch_log = []
    with determinism(deterministic):
        for epoch in range(start, cfg.epochs):
            lr = ad.lr_schedule(epoch, cfg.lr0, cfg.epochs)
            order = rng_for(cfg.seed, 0xE90C, epoch).permutation(len(train_set))
            losses = []
            for b, first in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_set[k] for k in order[first : first + cfg.batch_size]]
                batch_log.append({"epoch": epoch, "batch": b, "phase": "train", "images": [list(s.key) for s in batch]})
                bound = Bound(params, requires_grad=True)
                inputs = batch_inputs([s.triplet for s in batch], net.n_priors)
                p1, p2 = stacked_forward(inputs, bound, net, "train")
                loss = _loss(p1, p2, _targets(batch), cfg.deep_supervision)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                loss.backward()
                ad.adam_step(params.weights, bound.grads(), adam, lr)
                losses.append(value * len(batch))
            batch_log.append({"epoch": epoch, "batch": 0, "phase": "val", "images": [list(s.key) for s in val_set]})
            val = validation_loss(params, net, val_set, cfg.batch_size, cfg.deep_supervision)
            history.append(
                {"epoch": epoch, "lr": lr, "train_loss": sum(losses) / len(train_set), "val_loss": val}
            )
            if progress is not None:
                progress(history[-1])
            log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, history[-1]["train_loss"], val)
            if best is None or val < best_val:
                best_val = val
                best = _snapshot(params, adam, epoch + 1, cfg, history, meta)
        last = _snapshot(params, adam, cfg.epochs, cfg, history, meta)
    if best is None:
        best = last
    return TrainResult(best=best, last=last, history=history, batch_log=batch_log)


def write_curves(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]), repr(h["val_loss"])])


def evaluate_predictions(samples, predictions, p=None):
    """Before (corrupted center) and after (prediction clipped to [0, 1]) metrics."""
    p = p or SsimParams()
    report = MetricsReport(L=p.L)
    for s, pred in zip(samples, predictions):
        before = image_metrics(s.triplet.center, s.target, p)
        after = image_metrics(np.clip(pred, 0.0, 1.0), s.target, p)
        report.add(s.subject_id, s.slice_index, before, after)
    return report


def evaluate(checkpoint, samples, p=None):
    preds = predict(checkpoint.params, checkpoint.net, [s.triplet for s in samples])
    return evaluate_predictions(samples, preds, p)


# ---------------------------------------------------------------- ablations

# Reference values (SSIM %, MSE, PSNR) shown beside results; never asserted.
TABLE1_REFERENCE = {
    "corrupted": (71.66, 99.25, 28.83),
    "unet_no_priors": (94.20, 37.06, 32.87),
    "unet_self_priors": (94.44, 33.87, 33.27),
    "unet_self_priors_cbam": (94.64, 33.85, 33.25),
    "stacked_self_priors_cbam": (95.03, 29.76, 33.81),
}
TABLE2_REFERENCE = {
    "corrupted": (68.54, 123.23, 27.48),
    "stacked_no_priors": (91.77, 62.96, 30.43),
    "stacked_self_priors": (92.10, 53.55, 31.06),
    "stacked_extra_prior": (93.03, 59.62, 30.68),
    "stacked_self_and_extra": (93.04, 54.06, 31.04),
}


def ablation_rows(table, base):
    """``(row name, NetConfig)`` in reference row order."""
    if table == 1:
        return [
            ("unet_no_priors", replace(base, n_priors=0, stacked=False, use_cbam=False)),
            ("unet_self_priors", replace(base, n_priors=2, stacked=False, use_cbam=False)),
            ("unet_self_priors_cbam", replace(base, n_priors=2, stacked=False, use_cbam=True)),
            ("stacked_self_priors_cbam", replace(base, n_priors=2, stacked=True, use_cbam=True)),
        ]
    if table == 2:
        return [
            ("stacked_no_priors", replace(base, n_priors=0, stacked=True)),
            ("stacked_self_priors", replace(base, n_priors=2, stacked=True)),
            ("stacked_extra_prior", replace(base, n_priors=1, stacked=True)),
            ("stacked_self_and_extra", replace(base, n_priors=3, stacked=True)),
        ]
    raise ConfigError("table", f"must be 1 or 2, got {table}")


@dataclass
class AblationSpec:
    volumes: dict
    train: TrainConfig
    tables: tuple = (1,)
    data_seed: int = 0


def _summary(report):
    agg = report.aggregates()["metrics"]
    return agg


def run_ablation(spec, trainer=None, deterministic=True):
    """Train and evaluate every row on one shared dataset and split.

    ``trainer(cfg, samples, split)`` defaults to :func:`train`; it must
    return an object with a ``best`` checkpoint.  Returns a list of row
    dicts with measured SSIM (%), MSE and PSNR beside the reference values.
    """
    trainer = trainer or (lambda c, s, sp: train(c, s, sp, deterministic=deterministic))
    needs_extra = 2 in spec.tables
    samples = build_dataset(spec.volumes, spec.data_seed, spec.train.presets, extra_prior=needs_extra)
    split = split_subjects(list(spec.volumes), spec.data_seed)
    _, _, test = split.partition(samples)
    out = []
    for table in spec.tables:
        ref = TABLE1_REFERENCE if table == 1 else TABLE2_REFERENCE
        rows = []
        report = None
        for name, net in ablation_rows(table, spec.train.net):
            result = trainer(replace(spec.train, net=net), samples, split)
            report = evaluate(result.best, test)
            agg = _summary(report)
            rows.append(_row(table, name, agg, "after", ref[name], report))
        before = _row(table, "corrupted", _summary(report), "before", ref["corrupted"], report)
        out.append(before)
        out.extend(rows)
    return out


def _row(table, name, agg, side, ref, report):
    return {
        "table": table,
        "experiment": name,
        "ssim_pct": agg[f"ssim_{side}"]["mean"] * 100.0,
        "mse": agg[f"mse_{side}"]["mean"],
        "psnr": agg[f"psnr_{side}"]["mean"],
        "n_test_images": len(report.rows),
        "ref_ssim_pct": ref[0],
        "ref_mse": ref[1],
        "ref_psnr": ref[2],
    }


ABLATION_COLUMNS = ("table", "experiment", "ssim_pct", "mse", "psnr", "n_test_images", "ref_ssim_pct", "ref_mse", "ref_psnr")


def write_ablation(rows, csv_path, json_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2)
