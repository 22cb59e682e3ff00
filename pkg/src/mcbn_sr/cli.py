"""``mcbn-sr`` command line: train, estimate-stats, super-resolve, evaluate, benchmark.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import data, mcbn, metrics
from .config import ConfigError, RunConfig, file_digest, load_config, stream_rng, stream_seed
from .network import (FormatError, NetworkConfig, NonFiniteError, Schedule, build_network,
                      load_checkpoint, save_checkpoint, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad user input: missing files, empty directories and the like."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _image_files(directory: str, manifest: str = "", what: str = "image") -> list[Path]:
    if not directory:
        raise InputError(f"no {what} directory configured")
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{what} directory not found: {d}")
    files = data.list_images(d, manifest or None)
    missing = [f for f in files if not f.is_file()]
    if missing:
        raise InputError(f"{what} manifest lists missing files: {', '.join(map(str, missing[:5]))}")
    if not files:
        raise InputError(f"{what} directory {d} contains no PNG images")
    return files


def _network_plane(img: np.ndarray, color_mode: str) -> np.ndarray:
    """Y plane (H, W) or RGB planes (3, H, W) from a loaded image."""
    if color_mode == "y":
        return data.rgb_to_y(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.moveaxis(img, -1, 0)


def _load_planes(files, cfg: RunConfig) -> list[np.ndarray]:
    return [_network_plane(data.load_png(f), cfg.run.color_mode) for f in files]


def _network_config(cfg: RunConfig) -> NetworkConfig:
    return NetworkConfig(cfg.network.depth, cfg.network.channels, cfg.network.kernel,
                         image_channels=1 if cfg.run.color_mode == "y" else 3)


def _load_checkpoint(cfg: RunConfig):
    path = Path(cfg.paths.checkpoint)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_stats(cfg: RunConfig):
    path = Path(cfg.paths.stats_file)
    if not path.is_file():
        raise InputError(f"stats file not found: {path}; run estimate-stats first")
    return mcbn.load_stats(path)


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(cfg: RunConfig, path: Path, files, root) -> None:
    text = cfg.to_ini()
    text += "\n[manifest]\n"
    text += f"dataset_sha256 = {file_digest(files, root)}\n"
    text += f"dataset_files = {len(files)}\n"
    path.write_text(text)


def _training_lr_planes(cfg: RunConfig) -> list[np.ndarray]:
    files = _image_files(cfg.paths.train_dir, cfg.paths.train_manifest, "training")
    s = cfg.run.scale
    return [data.make_interpolated_lr(data.crop_to_multiple(p, s), s) for p in _load_planes(files, cfg)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> dict:
    files = _image_files(cfg.paths.train_dir, cfg.paths.train_manifest, "training")
    tr = cfg.training
    dataset = data.PatchDataset(_load_planes(files, cfg), cfg.run.scale, tr.patch_size, tr.batch_size, tr.augment)
    validation = None
    if cfg.paths.val_dir:
        val_files = _image_files(cfg.paths.val_dir, what="validation")
        validation = data.validation_patches(_load_planes(val_files, cfg), cfg.run.scale,
                                             tr.patch_size, tr.val_patches_per_image)
    params = build_network(_network_config(cfg), stream_rng(cfg.run.seed, "init"))
    schedule = Schedule(tr.iterations, tr.lr, tr.lr_halve_every, tr.val_every, tr.val_stat_batches)
    _log(f"training {params.parameter_count()} parameters on {len(files)} images for {tr.iterations} updates")
    best, log = train_loop(params, dataset, schedule, stream_rng(cfg.run.seed, "train"), validation,
                           val_rng_seed=stream_seed(cfg.run.seed, "validation"), log_fn=_log)

    out = _output_dir(cfg)
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, ckpt)
    val = dict(log.val)
    with open(out / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "lr", "loss", "val_loss"])
        for k, (lr, loss) in enumerate(zip(log.lr, log.loss), start=1):
            w.writerow([k, repr(lr), repr(loss), repr(val[k]) if k in val else ""])
    root = Path(cfg.paths.train_dir)
    data.write_manifest([f.relative_to(root) for f in files], out / "train_dataset.txt",
                        header=f"training images under {root}")
    _write_manifest(cfg, out / "train_manifest.ini", files, root)
    _log(f"wrote {ckpt} (best update {log.best_iteration})")
    return {"checkpoint": ckpt, "log": log}


def cmd_estimate_stats(cfg: RunConfig) -> mcbn.StatsSets:
    params = _load_checkpoint(cfg)
    planes = _training_lr_planes(cfg)
    tr = cfg.training
    stats = mcbn.estimate_stats_sets(params, planes, cfg.run.T, tr.batch_size, tr.patch_size,
                                     stream_rng(cfg.run.seed, "stats"), cfg.stats.patches_per_image or None)
    path = Path(cfg.paths.stats_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    mcbn.save_stats(stats, path)
    files = _image_files(cfg.paths.train_dir, cfg.paths.train_manifest, "training")
    _write_manifest(cfg, _output_dir(cfg) / "stats_manifest.ini", files, Path(cfg.paths.train_dir))
    print(f"stats sets: layers={stats.layers} T={stats.T} channels={','.join(map(str, stats.channels()))}")
    print(f"wrote {path}")
    return stats


def cmd_super_resolve(cfg: RunConfig, image_path: str) -> dict:
    src = Path(image_path)
    if not src.is_file():
        raise InputError(f"input image not found: {src}")
    params = _load_checkpoint(cfg)
    stats = _load_stats(cfg)
    lr = data.load_png(src)
    if cfg.run.color_mode == "y" and params.config.image_channels != 1:
        raise InputError("checkpoint is an RGB model but run.color_mode = y")
    sr, var, mc = mcbn.reconstruct_full(params, lr, stats, min(cfg.run.T, stats.T), cfg.run.scale,
                                        clip=cfg.run.clip_samples)
    out = _output_dir(cfg)
    stem = src.stem
    paths = {
        "sr": out / f"{stem}_sr.png",
        "uncertainty": out / f"{stem}_uncertainty.png",
        "sidecar": out / f"{stem}_uncertainty.txt",
        "variance": out / f"{stem}_variance.varm",
    }
    data.save_png(sr, paths["sr"])
    rgb, (vmin, vmax) = mcbn.render_uncertainty_map(var, cfg.evaluate.colormap)
    data.save_png(rgb, paths["uncertainty"])
    mcbn.write_norm_sidecar(paths["sidecar"], vmin, vmax, cfg.evaluate.colormap)
    mcbn.save_variance_grid(var, paths["variance"])
    print(f"super-resolved {src.name} x{cfg.run.scale} with T={mc.T}: {sr.shape[1]}x{sr.shape[0]}")
    return {**paths, "mc": mc}


def _evaluate_images(cfg: RunConfig, bypass: bool):
    files = _image_files(cfg.paths.test_dir, what="test")
    s = cfg.run.scale
    out = []
    for f in files:
        hr = data.crop_to_multiple(_network_plane(data.load_png(f), cfg.run.color_mode), s)
        out.append((f.stem, hr, None if bypass else data.make_interpolated_lr(hr, s)))
    return out


def cmd_evaluate(cfg: RunConfig, sweep: bool = False, bypass: bool = False,
                 correlation: bool = False) -> metrics.MetricsReport:
    images = _evaluate_images(cfg, bypass)
    t_values = cfg.evaluate.sweep_T if sweep else [cfg.run.T]
    params = stats = None
    if not bypass:
        params = _load_checkpoint(cfg)
        stats = _load_stats(cfg)
        too_many = [t for t in t_values if t > stats.T]
        if too_many:
            raise InputError(f"T values {too_many} exceed the {stats.T} stats sets in {cfg.paths.stats_file}")
    crop = cfg.eval_crop
    report = metrics.MetricsReport()
    for t in t_values:
        for name, hr, lr in images:
            start = time.perf_counter()
            if bypass:
                mu, var = hr, np.zeros_like(hr)
            else:
                mc = mcbn.mc_infer_fast(params, lr, stats, t, clip=cfg.run.clip_samples)
                mu, var = mc.mean_image, mc.variance_map
            elapsed = time.perf_counter() - start
            hr_c, mu_c, var_c = (data.crop_boundary(a, crop) for a in (hr, mu, var))
            if hr_c.ndim == 3:
                # RGB mode: score the luma of each plane stack
                hr_c, mu_c = (data.rgb_to_y(np.moveaxis(a, 0, -1)) for a in (hr_c, mu_c))
                var_c = var_c.mean(axis=0)
            report.rows.append(metrics.score_image(name, mu_c, var_c, hr_c, t, cfg.run.var_floor, elapsed))
    out = _output_dir(cfg)
    csv_path = out / ("metrics_sweep.csv" if sweep else "metrics.csv")
    report.write_csv(csv_path)
    for t, group in report.by_T().items():
        agg = group.aggregate()
        print(f"T={t}: PSNR {agg['psnr_db']:.4f} dB  SSIM {agg['ssim']:.6f}  PLL {agg['pll_sum']:.3f}  "
              f"CRPS {agg['crps_mean']:.6f}  mean var {agg['mean_uncertainty']:.3e}")
    if correlation:
        rows = report.by_T()[t_values[-1]].rows
        corr = metrics.correlation_report(rows)
        metrics.write_scatter(corr["scatter"], out / "scatter.csv")
        (out / "correlation.txt").write_text(f"pearson_mean_uncertainty_psnr = {corr['pearson']!r}\n")
        print(f"Pearson(mean uncertainty, PSNR) = {corr['pearson']:.4f}")
    print(f"wrote {csv_path}")
    return report


BENCHMARK_COLUMNS = ["T", "naive_median_s", "fast_median_s", "ratio", "repeats"]


def cmd_benchmark(cfg: RunConfig) -> list[dict]:
    params = _load_checkpoint(cfg)
    bm, tr = cfg.benchmark, cfg.training
    n = bm.image_size
    hr = data.synthetic_image(n, n, stream_rng(cfg.run.seed, "benchmark"))
    if params.config.image_channels == 3:
        hr = np.repeat(hr[None], 3, axis=0)
    hr = data.crop_to_multiple(hr, cfg.run.scale)
    lr = data.make_interpolated_lr(hr, cfg.run.scale)
    train_planes = _training_lr_planes(cfg)
    t_max = max(bm.T_values)
    path = Path(cfg.paths.stats_file)
    stats = mcbn.load_stats(path) if path.is_file() else None
    if stats is None or stats.T < t_max:
        stats = mcbn.estimate_stats_sets(params, train_planes, t_max, tr.batch_size, tr.patch_size,
                                         stream_rng(cfg.run.seed, "stats"))
    naive_patch = None if bm.naive_patch == "image" else tr.patch_size
    if naive_patch is None and not any(min(p.shape[-2:]) >= min(lr.shape[-2:]) for p in train_planes):
        raise InputError(
            f"naive MCBN crops training batches at the test size ({lr.shape[-1]}x{lr.shape[-2]}) but no "
            f"training image is that large; use larger training images or benchmark.naive_patch = train"
        )
    rows = []
    for t in bm.T_values:
        naive_times, fast_times = [], []
        for r in range(bm.repeats):
            start = time.perf_counter()
            mcbn.mc_infer_fast(params, lr, stats, t)
            fast_times.append(time.perf_counter() - start)
            rng = np.random.default_rng(np.random.SeedSequence(stream_seed(cfg.run.seed, "naive"), spawn_key=(t, r)))
            start = time.perf_counter()
            mcbn.mc_infer_naive(params, lr, train_planes, t, tr.batch_size, rng, patch=naive_patch)
            naive_times.append(time.perf_counter() - start)
        naive_med, fast_med = statistics.median(naive_times), statistics.median(fast_times)
        rows.append({"T": t, "naive_median_s": naive_med, "fast_median_s": fast_med,
                     "ratio": naive_med / fast_med, "repeats": bm.repeats})
        _log(f"T={t}: naive {naive_med:.3f}s fast {fast_med:.3f}s ratio {naive_med / fast_med:.2f}")
    out = _output_dir(cfg) / "benchmark.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(",".join(BENCHMARK_COLUMNS))
    for row in rows:
        print(",".join(f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in BENCHMARK_COLUMNS))
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--T", type=int, dest="T", help="number of MC samples / stats sets")
    common.add_argument("--scale", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--checkpoint")
    common.add_argument("--stats-file")

    p = argparse.ArgumentParser(prog="mcbn-sr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a BN-VDSR model")
    sub.add_parser("estimate-stats", parents=[common], help="collect T BN stats sets from training batches")
    sr = sub.add_parser("super-resolve", parents=[common], help="super-resolve one image with an uncertainty map")
    sr.add_argument("image", help="low-resolution PNG")
    ev = sub.add_parser("evaluate", parents=[common], help="score the test set")
    ev.add_argument("--sweep-T", action="store_true", help="evaluate every T in evaluate.sweep_T")
    ev.add_argument("--bypass", action="store_true", help="score each HR image against itself with zero variance")
    ev.add_argument("--correlation", action="store_true", help="write the uncertainty/PSNR correlation report")
    sub.add_parser("benchmark", parents=[common], help="time naive vs fast MC sampling")
    return p


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("seed", "run.seed"), ("T", "run.T"), ("scale", "run.scale"),
                      ("output_dir", "paths.output_dir"), ("checkpoint", "paths.checkpoint"),
                      ("stats_file", "paths.stats_file")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "estimate-stats":
            cmd_estimate_stats(cfg)
        elif args.command == "super-resolve":
            cmd_super_resolve(cfg, args.image)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.sweep_T, args.bypass, args.correlation)
        elif args.command == "benchmark":
            cmd_benchmark(cfg)
    except NonFiniteError as exc:
        _log(f"error: numeric failure: {exc}")
        return EXIT_NUMERIC
    except (InputError, ConfigError, FormatError, data.InsufficientPatchesError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
