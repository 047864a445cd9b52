"""Batch command-line entry point.

Every command writes one ``manifest.json`` (a :class:`RunManifest`) next to
its outputs, holding the argv, the fully resolved configuration, seeds,
input/output paths, the tool version and the wall-clock duration.
``motioncorr replay MANIFEST`` reruns a command from its manifest alone.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._seeding import mix_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, NumericalError
from .metrics import SsimParams, image_metrics, severity_study, write_severity_study
from .motion_sim import (
    PRESETS,
    Ordering,
    corrupt_slice,
    corrupt_volume,
    generate_trajectory,
    load_trajectory,
    save_trajectory,
)
from .phantom import PhantomSpec, make_phantom
from .volume_io import load_volume, save_volume

log = logging.getLogger("motioncorr")

OUT_ENV = "MOTIONCORR_OUT"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    cwd: str = field(default_factory=os.getcwd)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))


def default_out(name):
    return Path(os.environ.get(OUT_ENV, "runs")) / name


# ---------------------------------------------------------------- config helpers


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, pairs):
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(config)
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError("--set", f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("--set", f"{key}: {part} is not a section")
        node[parts[-1]] = parse_value(raw)
    return out


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from exc


def parse_dims(text):
    dims = tuple(int(v) for v in str(text).replace("x", ",").split(","))
    if len(dims) != 3:
        raise ConfigError("dims", f"expected NX,NY,NZ, got {text!r}")
    return dims


def load_volume_dir(path):
    """``subject id -> Volume`` for every ``.mvol`` in ``path`` (id = file stem)."""
    files = sorted(Path(path).glob("*.mvol"))
    if not files:
        raise FileNotFoundError(f"no .mvol files in {path}")
    return {f.stem: load_volume(f) for f in files}


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_train_config(path=None, overrides=None):
    """Defaults, then the JSON file, then ``--set`` overrides.

    Returns ``(TrainConfig, data_seed, resolved dict)``.
    """
    from .training import TrainConfig

    resolved = _merge(TrainConfig().to_json(), {"data_seed": None})
    if path:
        resolved = _merge(resolved, read_json(path))
    resolved = apply_overrides(resolved, overrides)
    data_seed = resolved.pop("data_seed")
    try:
        cfg = TrainConfig.from_json(resolved)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc
    data_seed = cfg.seed if data_seed is None else int(data_seed)
    full = cfg.to_json()
    full["data_seed"] = data_seed
    return cfg, data_seed, full


def _report_line(name, agg):
    m = agg["metrics"]
    return (
        f"{name}: SSIM {m['ssim_before']['mean']:.4f} -> {m['ssim_after']['mean']:.4f}  "
        f"MSE {m['mse_before']['mean']:.3g} -> {m['mse_after']['mean']:.3g}  "
        f"PSNR {m['psnr_before']['mean']:.2f} -> {m['psnr_after']['mean']:.2f} dB"
    )


# ---------------------------------------------------------------- commands


def cmd_phantom(args, manifest):
    dims = parse_dims(args.dims)
    out = Path(args.out or default_out("phantoms"))
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for i in range(args.count):
        spec = PhantomSpec(seed=args.seed + i, dims=dims, n_structures=args.n_structures)
        path = out / f"phantom_{i:03d}.mvol"
        save_volume(make_phantom(spec), path)
        manifest.outputs.append(str(path))
        specs.append(asdict(spec))
    manifest.config = {"dims": list(dims), "count": args.count, "n_structures": args.n_structures, "phantoms": specs}
    manifest.seeds = {"seed": args.seed}
    print(f"wrote {args.count} phantom(s) to {out}")
    return out


def _trajectories_in(path, nz):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.mtraj"))
        if len(files) != nz:
            raise ConfigError("traj-in", f"{len(files)} trajectory files for {nz} slices")
        return [load_trajectory(f) for f in files]
    return [load_trajectory(p)] * nz


def _check_ordering(trajs, ordering, mode):
    if any(t.ordering is not ordering for t in trajs):
        raise ConfigError("traj-in", f"trajectory ordering does not match --mode {mode}")


def cmd_simulate(args, manifest):
    vol = load_volume(args.input)
    manifest.inputs.append(str(args.input))
    nz, ny, _ = vol.data.shape
    out = Path(args.out or default_out("simulate") / "corrupted.mvol")
    out.parent.mkdir(parents=True, exist_ok=True)
    traj_dir = Path(args.traj_out) if args.traj_out else out.with_suffix("").with_name(out.stem + "_traj")
    ordering = Ordering.LINES2D if args.mode == "2d" else Ordering.POINTS3D

    if args.mode == "2d":
        if args.traj_in:
            trajs = _trajectories_in(args.traj_in, nz)
            manifest.inputs.append(str(args.traj_in))
        else:
            trajs = [generate_trajectory(mix_seed(args.seed, z), ny, args.preset) for z in range(nz)]
        _check_ordering(trajs, ordering, args.mode)
        data = np.stack(
            [corrupt_slice(vol.data[z], trajs[z], vol.spacing[:2], args.pe_only) for z in range(nz)]
        )
        corrupted = vol.with_data(data)
    else:
        if args.traj_in:
            trajs = [load_trajectory(args.traj_in)]
            manifest.inputs.append(str(args.traj_in))
        else:
            dc = (nz // 2) * ny + ny // 2
            trajs = [generate_trajectory(args.seed, ny * nz, args.preset, Ordering.POINTS3D, dc_index=dc)]
        _check_ordering(trajs, ordering, args.mode)
        corrupted = corrupt_volume(vol, trajs[0], args.pe_only)

    save_volume(corrupted, out)
    traj_dir.mkdir(parents=True, exist_ok=True)
    for z, traj in enumerate(trajs):
        path = traj_dir / (f"slice_{z:03d}.mtraj" if args.mode == "2d" else "volume.mtraj")
        save_trajectory(traj, path)
    manifest.outputs += [str(out), str(traj_dir)]
    manifest.config = {
        "preset": None if args.traj_in else args.preset,
        "mode": args.mode,
        "pe_only": args.pe_only,
        "replayed": bool(args.traj_in),
    }
    manifest.seeds = {"seed": args.seed}

    p = SsimParams()
    per = [image_metrics(corrupted.data[z], vol.data[z], p) for z in range(nz)]
    finite_psnr = [m["psnr"] for m in per if np.isfinite(m["psnr"])]
    print(f"corrupted {args.input} ({args.mode}, preset {args.preset}) -> {out}")
    print(
        f"vs input: SSIM {np.mean([m['ssim'] for m in per]):.4f}  MSE {np.mean([m['mse'] for m in per]):.4g}  "
        f"PSNR {np.mean(finite_psnr) if finite_psnr else float('inf'):.2f} dB"
    )
    return out.parent


def cmd_severity_study(args, manifest):
    vols = list(load_volume_dir(args.phantoms).values())
    seeds = [mix_seed(args.seeds, i) for i in range(len(vols))]
    study = severity_study(vols, seeds)
    out = Path(args.out or default_out("severity"))
    write_severity_study(study, out)
    manifest.inputs.append(str(args.phantoms))
    manifest.outputs += [str(out / "severity_scatter.csv"), str(out / "severity_r2.json")]
    manifest.seeds = {"base": args.seeds, "per_volume": seeds}
    manifest.config = {"presets": ["mild", "moderate", "severe"], "n_volumes": len(vols)}
    for name, m in study["means"].items():
        print(f"{name:9s} SSIM {m['ssim']:.4f}  MSE {m['mse']:.4g}  PSNR {m['psnr']:.2f}")
    for metric, pairs in study["r2"].items():
        print(metric, " ".join(f"{k}={v:.4f}" for k, v in pairs.items()))
    print("reference SSIM R2:", " ".join(f"{k}={v}" for k, v in study["reference_ssim_r2"].items()))
    return out


def cmd_train(args, manifest):
    from .training import build_dataset, split_subjects, train, write_curves

    cfg, data_seed, resolved = resolve_train_config(args.config, args.set)
    volumes = load_volume_dir(args.data)
    extra = cfg.net.n_priors in (1, 3)
    samples = build_dataset(volumes, data_seed, cfg.presets, extra_prior=extra)
    split = split_subjects(list(volumes), data_seed)
    resume = load_checkpoint(args.resume, expect=cfg.net) if args.resume else None
    out = Path(args.out or default_out("train"))
    out.mkdir(parents=True, exist_ok=True)

    def progress(h):
        print(f"epoch {h['epoch']:3d}  lr {h['lr']:.3g}  train {h['train_loss']:.4f}  val {h['val_loss']:.4f}", flush=True)

    result = train(cfg, samples, split, resume=resume, deterministic=args.deterministic, progress=progress)
    for ckpt in (result.best, result.last):
        ckpt.meta["data_seed"] = data_seed
    save_checkpoint(result.best, out / "best.mckpt")
    save_checkpoint(result.last, out / "last.mckpt")
    write_curves(result.history, out / "curves.csv")
    (out / "batch_log.json").write_text(json.dumps(result.batch_log))
    (out / "split.json").write_text(json.dumps(split.to_json(), indent=2))
    manifest.inputs.append(str(args.data))
    if args.resume:
        manifest.inputs.append(str(args.resume))
    manifest.outputs += [str(out / n) for n in ("best.mckpt", "last.mckpt", "curves.csv", "batch_log.json", "split.json")]
    manifest.config = resolved
    manifest.seeds = {"train": cfg.seed, "data": data_seed}
    return out


def cmd_evaluate(args, manifest):
    from .training import DatasetSplit, TrainConfig, build_dataset, evaluate_predictions
    from .model import predict
    from .volume_io import Volume

    ckpt = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig.from_json(ckpt.train_config) if ckpt.train_config else TrainConfig(net=ckpt.net)
    data_seed = ckpt.meta.get("data_seed", tcfg.seed)
    volumes = load_volume_dir(args.data)
    samples = build_dataset(volumes, data_seed, tcfg.presets, extra_prior=ckpt.net.n_priors in (1, 3))
    if "split" in ckpt.meta and not args.all_subjects:
        test_ids = set(DatasetSplit.from_json(ckpt.meta["split"]).test_subjects)
        missing = test_ids - set(volumes)
        if missing:
            raise ConfigError("data", f"test subjects missing from data: {sorted(missing)}")
        samples = [s for s in samples if s.subject_id in test_ids]
    preds = predict(ckpt.params, ckpt.net, [s.triplet for s in samples])
    report = evaluate_predictions(samples, preds)

    out = Path(args.out or default_out("evaluate"))
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    manifest.outputs += [str(out / "metrics.csv"), str(out / "metrics.json")]
    if args.diff_maps:
        diff_dir = out / "diff"
        diff_dir.mkdir(exist_ok=True)
        by_subject = {}
        for s, pred in zip(samples, preds):
            by_subject.setdefault(s.subject_id, {})[s.slice_index] = np.clip(pred, 0, 1) - s.target
        for sid, slices in by_subject.items():
            stack = np.stack([slices[z] for z in sorted(slices)])
            if args.abs_diff:
                stack = np.abs(stack)
            path = diff_dir / f"{sid}.mvol"
            save_volume(Volume(stack, volumes[sid].spacing), path)
            manifest.outputs.append(str(path))
    manifest.inputs += [str(args.checkpoint), str(args.data)]
    manifest.config = {
        "train_config": ckpt.train_config,
        "data_seed": data_seed,
        "diff_maps": args.diff_maps,
        "abs_diff": args.abs_diff,
        "all_subjects": args.all_subjects,
    }
    manifest.seeds = {"data": data_seed}
    print(_report_line(f"{len(report.rows)} images", report.aggregates()))
    return out


def _ablation_volumes(spec):
    if "data" in spec:
        return load_volume_dir(spec["data"])
    ph = spec.get("phantoms", {})
    dims = tuple(ph.get("dims", (64, 64, 16)))
    seed = int(ph.get("seed", 0))
    return {
        f"phantom_{i:03d}": make_phantom(PhantomSpec(seed=seed + i, dims=dims)) for i in range(int(ph.get("count", 10)))
    }


def cmd_ablate(args, manifest):
    from .training import AblationSpec, TrainConfig, run_ablation, write_ablation

    spec = apply_overrides(read_json(args.spec) if args.spec else {}, args.set)
    train_cfg = TrainConfig.from_json(_merge(TrainConfig().to_json(), spec.get("train", {})))
    tables = tuple(int(t) for t in spec.get("tables", [1]))
    data_seed = int(spec.get("data_seed", 0))
    ablation = AblationSpec(_ablation_volumes(spec), train_cfg, tables, data_seed)
    rows = run_ablation(ablation, deterministic=args.deterministic)
    out = Path(args.out or default_out("ablate"))
    out.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, out / "ablation.csv", out / "ablation.json")
    manifest.inputs += [str(args.spec)] if args.spec else []
    manifest.outputs += [str(out / "ablation.csv"), str(out / "ablation.json")]
    manifest.config = {"spec": spec, "train": train_cfg.to_json(), "tables": list(tables)}
    manifest.seeds = {"data": data_seed, "train": train_cfg.seed}
    print(f"{'table':>5} {'experiment':26s} {'SSIM%':>7} {'MSE':>9} {'PSNR':>6} | {'ref SSIM%':>9} {'ref MSE':>8} {'ref PSNR':>8}")
    for r in rows:
        print(
            f"{r['table']:>5} {r['experiment']:26s} {r['ssim_pct']:7.2f} {r['mse']:9.4g} {r['psnr']:6.2f} | "
            f"{r['ref_ssim_pct']:9.2f} {r['ref_mse']:8.2f} {r['ref_psnr']:8.2f}"
        )
    return out


def cmd_gradcheck(args, manifest):
    from .gradsuite import CASES, GRADCHECK_TOLERANCE, run_suite

    names = list(CASES) if args.ops == "all" else [n.strip() for n in args.ops.split(",")]
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError("ops", f"unknown op(s) {unknown}; choose from {sorted(CASES)}")
    results = run_suite(names, args.trials, args.seed)
    out = Path(args.out or default_out("gradcheck"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2))
    manifest.outputs.append(str(out / "gradcheck.json"))
    manifest.config = {"ops": names, "trials": args.trials, "tolerance": GRADCHECK_TOLERANCE}
    manifest.seeds = {"seed": args.seed}
    failed = []
    print(f"{'op':22s} {'max rel err':>12}  status")
    for r in results:
        ok = r["max_rel_error"] < GRADCHECK_TOLERANCE
        if not ok:
            failed.append(r["op"])
        print(f"{r['op']:22s} {r['max_rel_error']:12.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        # second arg tells main() where the manifest goes
        raise NumericalError(f"gradient check above {GRADCHECK_TOLERANCE} for: {', '.join(failed)}", out)
    return out


def cmd_replay(args, manifest):
    recorded = read_json(args.manifest)
    argv = recorded["argv"]
    if argv and argv[0] == "replay":
        raise ConfigError("manifest", "refusing to replay a replay")
    # argv paths are relative to the original working directory
    prev = os.getcwd()
    os.chdir(recorded.get("cwd", prev))
    try:
        return main(argv)
    finally:
        os.chdir(prev)


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="motioncorr", description="Motion artifact simulation and correction for MR slices.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument(
        "--deterministic", action="store_true", help="single-threaded BLAS and fixed reduction order"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic head phantoms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="64,64,32", help="NX,NY,NZ")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--n-structures", type=int, default=6)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/phantoms)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="corrupt a volume with rigid motion")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="moderate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="corrupted .mvol path")
    p.add_argument("--traj-out", help="directory for the .mtraj files")
    p.add_argument("--traj-in", help=".mtraj file (or directory of per-slice files) to replay")
    p.add_argument("--pe-only", action="store_true", help="translate along the phase-encode axis only")
    p.add_argument("--mode", choices=("2d", "3d"), default="2d")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("severity-study", help="metric distributions and R2 across presets")
    p.add_argument("--phantoms", required=True, help="directory of .mvol volumes")
    p.add_argument("--seeds", type=int, default=0, help="base seed; volume i uses a seed derived from (base, i)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_severity_study)

    p = sub.add_parser("train", help="train the correction network")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--data", required=True, help="directory of clean .mvol volumes")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. net.levels=3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="before/after metrics on held-out subjects")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--diff-maps", action="store_true", help="write per-subject difference volumes")
    p.add_argument("--abs-diff", action="store_true", help="absolute rather than signed (pred - clean) maps")
    p.add_argument("--all-subjects", action="store_true", help="ignore the stored split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation rows")
    p.add_argument("--spec", help="JSON ablation spec")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--ops", default="all", help="'all' or comma-separated names")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    if args.command == "replay":
        try:
            return cmd_replay(args, None)
        except (FormatError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO

    manifest = RunManifest(command=args.command, argv=argv, config={})
    started = time.perf_counter()
    out_dir = None
    try:
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            guard = threadpool_limits(limits=1)
        else:
            guard = contextlib.nullcontext()
        with guard:
            out_dir = args.func(args, manifest)
        code = EXIT_OK
    except NumericalError as exc:
        print(f"numerical error: {exc.args[0]}", file=sys.stderr)
        code = EXIT_NUMERICAL
        out_dir = exc.args[1] if len(exc.args) > 1 else None
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    manifest.config.setdefault("deterministic", args.deterministic)
    manifest.duration_s = time.perf_counter() - started
    if out_dir is not None:
        manifest.write(Path(out_dir) / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
