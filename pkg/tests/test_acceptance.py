"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[ACCEPTANCE n] PASS|FAIL`` line with the measured
numbers before asserting. Criteria 2, 3, 7, 8 and 9 share one desk-scale model
trained through the CLI on eight 96x96 synthetic images.
"""
import math
import statistics
import time

import numpy as np
import pytest

from mcbn_sr import cli, data, mcbn, metrics, tensor as T
from mcbn_sr import network as N
from mcbn_sr.config import stream_seed
from conftest import desk_config, write_synthetic_dataset
from oracles import central_difference, rel_error


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[ACCEPTANCE {n}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = write_synthetic_dataset(tmp_path_factory.mktemp("desk"), n_train=8, size=96, seed=7)
    cfg = desk_config(root)
    start = time.perf_counter()
    result = cli.cmd_train(cfg)
    train_s = time.perf_counter() - start
    stats = cli.cmd_estimate_stats(cfg)
    params = N.load_checkpoint(cfg.paths.checkpoint)
    hr = data.crop_to_multiple(data.load_png(root / "test" / "test00.png"), cfg.run.scale)
    return {"root": root, "cfg": cfg, "log": result["log"], "train_s": train_s, "params": params,
            "stats": stats, "hr": hr, "lr": data.make_interpolated_lr(hr, cfg.run.scale),
            "train_planes": cli._training_lr_planes(cfg)}


# ---------------------------------------------------------------- 1


def _op_checks(rng):
    """(name, analytic from float32 storage, float64 central difference) triples."""
    x = rng.standard_normal((4, 4, 8, 8)).astype(np.float32)
    w = (rng.standard_normal((4, 4, 3, 3)) * 0.3).astype(np.float32)
    g = rng.standard_normal((4, 4, 8, 8)).astype(np.float32)
    x64, w64, g64 = (a.astype(np.float64) for a in (x, w, g))

    gx, gw = T.conv2d_backward(g, x, w)
    conv = lambda: float(np.sum(T.conv2d_forward(x64, w64) * g64))  # noqa: E731
    yield "conv dx", gx, central_difference(conv, x64, 1e-4)
    yield "conv dw", gw, central_difference(conv, w64, 1e-4)

    gamma = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    beta = rng.uniform(-0.5, 0.5, 4).astype(np.float32)
    _, _, _, cache = T.batchnorm_train_forward(x, T.BnLayerParams(gamma, beta))
    bgx, bgg, bgb = T.batchnorm_backward(g, cache)
    p64 = T.BnLayerParams(gamma.astype(np.float64), beta.astype(np.float64))
    bn = lambda: float(np.sum(T.batchnorm_train_forward(x64, p64)[0] * g64))  # noqa: E731
    yield "bn dx", bgx, central_difference(bn, x64, 1e-4)
    yield "bn dgamma", bgg, central_difference(bn, p64.gamma, 1e-4)
    yield "bn dbeta", bgb, central_difference(bn, p64.beta, 1e-4)

    # keep inputs clear of the kink so the difference never straddles it
    r = rng.uniform(0.05, 2, (4, 4, 8, 8)) * rng.choice([-1, 1], (4, 4, 8, 8))
    r32, r64 = r.astype(np.float32), r.astype(np.float64)
    yield "relu", T.relu_backward(g, r32), central_difference(lambda: float(np.sum(T.relu_forward(r64) * g64)), r64, 1e-3)

    pred, target = x[:2, :1], g[:2, :1]
    pred64, target64 = pred.astype(np.float64), target.astype(np.float64)
    yield "mse", T.mse_loss(pred, target)[1], central_difference(lambda: T.mse_loss(pred64, target64)[0], pred64, 1e-4)


H_NET = 1e-6


def _network_checks(rng):
    p = N.build_network(N.NetworkConfig(depth=4, channels=4), np.random.default_rng(5))
    for bn in p.bn:
        bn.gamma[...] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta[...] = rng.uniform(-0.2, 0.2, bn.beta.shape)
    x = rng.uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1).astype(np.float32)
    _, grads = N.loss_and_grads(p, x, y)
    p64 = N.ModelParams(p.config, [w.astype(np.float64) for w in p.weights],
                        [T.BnLayerParams(b.gamma.astype(np.float64), b.beta.astype(np.float64), b.eps) for b in p.bn])
    x64, y64 = x.astype(np.float64), y.astype(np.float64)
    names = []
    for l in range(len(p.weights)):
        names += [f"W{l + 1}"] + ([f"gamma{l + 1}", f"beta{l + 1}"] if l < len(p.bn) else [])
    for name, arr, grad in zip(names, p64.arrays(), grads):
        # up to 6 entries per array; a small float64 step keeps the difference off ReLU kinks
        picks = [np.unravel_index(i, arr.shape) for i in rng.choice(arr.size, min(6, arr.size), replace=False)]
        fd, an = [], []
        for idx in picks:
            orig = arr[idx]
            arr[idx] = orig + H_NET
            fp = N.loss_and_grads(p64, x64, y64)[0]
            arr[idx] = orig - H_NET
            fm = N.loss_and_grads(p64, x64, y64)[0]
            arr[idx] = orig
            fd.append((fp - fm) / (2 * H_NET))
            an.append(grad[idx])
        yield f"net {name}", np.array(an), np.array(fd)


def test_criterion_1_gradient_suite(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors = {name: rel_error(np.asarray(a, np.float64), fd)
              for name, a, fd in [*_op_checks(rng), *_network_checks(rng)]}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    report(1, errors[worst] < 1e-3 and elapsed < 60,
           f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_fast_naive_equivalence(desk, report):
    params, cfg = desk["params"], desk["cfg"]
    lr = desk["lr"][:64, :64]
    start = time.perf_counter()
    stats = mcbn.estimate_stats_sets(params, desk["train_planes"], 5, cfg.training.batch_size, lr.shape,
                                     np.random.default_rng(31))
    fast = mcbn.mc_infer_fast(params, lr, stats, 5)
    naive = mcbn.mc_infer_naive(params, lr, desk["train_planes"], 5, cfg.training.batch_size,
                                np.random.default_rng(31))
    elapsed = time.perf_counter() - start
    diff = float(np.max(np.abs(fast.samples - naive.samples)))
    report(2, diff < 1e-5 and elapsed < 30, f"max abs sample diff {diff:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_speedup(desk, report, tmp_path):
    # naive MCBN crops training batches at the test size, so the batch source must be >= 276 px
    params, cfg = desk["params"], desk["cfg"]
    big = [data.make_interpolated_lr(data.synthetic_image(300, 300, np.random.default_rng([7, 300 + i])), 2)
           for i in range(4)]
    lr = data.make_interpolated_lr(data.synthetic_image(276, 276, np.random.default_rng([7, 276])), 2)
    stats = mcbn.estimate_stats_sets(params, desk["train_planes"], 15, cfg.training.batch_size,
                                     cfg.training.patch_size, np.random.default_rng(3))
    rows = []
    for t in (5, 10, 15):
        fast_s, naive_s = [], []
        for r in range(3):
            start = time.perf_counter()
            mcbn.mc_infer_fast(params, lr, stats, t)
            fast_s.append(time.perf_counter() - start)
            rng = np.random.default_rng(np.random.SeedSequence(stream_seed(0, "naive"), spawn_key=(t, r)))
            start = time.perf_counter()
            mcbn.mc_infer_naive(params, lr, big, t, cfg.training.batch_size, rng)
            naive_s.append(time.perf_counter() - start)
        rows.append((t, statistics.median(naive_s), statistics.median(fast_s)))
    ratios_ok = all(n >= 2 * f for _, n, f in rows)
    grows = all(a[1] < b[1] for a, b in zip(rows, rows[1:]))
    table = ", ".join(f"T={t}: {n:.2f}s/{f:.2f}s={n / f:.1f}x" for t, n, f in rows)
    report(3, ratios_ok and grows, f"naive/fast medians {table}")


# ---------------------------------------------------------------- 4-6


def test_criterion_4_crps(report):
    grid = [(z, s) for z in (-2, -1, 0, 1, 2) for s in (0.1, 0.5, 1.0, 3.0, 10.0)]
    worst = 0.0
    for z, sigma in grid:
        f = metrics.PredictiveField(np.array([0.3]), np.array([sigma ** 2]), 0.0)
        worst = max(worst, abs(metrics.crps(f, np.array([0.3 + z * sigma])) - metrics.crps_numeric(0.3, sigma ** 2, 0.3 + z * sigma)))
    std_normal = metrics.crps(metrics.PredictiveField(np.zeros(1), np.ones(1), 0.0), np.zeros(1))
    perfect = metrics.crps(metrics.PredictiveField(np.full((8, 8), 0.4), np.zeros((8, 8))), np.full((8, 8), 0.4))
    ok = worst < 1e-6 and abs(std_normal - 0.2336949773) < 1e-6 and perfect < 1e-4
    report(4, ok, f"grid max diff {worst:.1e}, CRPS(N(0,1),0)={std_normal:.10f}, perfect={perfect:.2e}")


def test_criterion_5_pll(report):
    f = metrics.PredictiveField(np.zeros((5, 5)), np.ones((5, 5)), 0.0)
    per_pixel = metrics.pll(f, np.zeros((5, 5)))[1]
    rng = np.random.default_rng(55)
    error_mono = var_mono = True
    for _ in range(500):
        mu, s2 = rng.uniform(-1, 1), rng.uniform(1e-4, 4)
        near, far = np.sort(rng.uniform(0, 1, 2))
        field = metrics.PredictiveField(np.array([mu]), np.array([s2]))
        if far - near > 1e-6:
            error_mono &= metrics.pll(field, np.array([mu + near]))[0] > metrics.pll(field, np.array([mu + far]))[0]
        lo, hi = np.sort(rng.uniform(1e-4, 4, 2))
        at = lambda v: metrics.pll(metrics.PredictiveField(np.zeros(1), np.array([v])), np.zeros(1))[0]  # noqa: E731
        if hi - lo > 1e-9:
            var_mono &= at(lo) > at(hi)
    ok = abs(per_pixel + 0.918939) < 1e-6 and error_mono and var_mono
    report(5, ok, f"per-pixel at mean {per_pixel:.7f}, error monotone {error_mono}, variance monotone {var_mono}")


def test_criterion_6_metric_sanity(report):
    from oracles import ssim_windows

    rng = np.random.default_rng(66)
    a = rng.uniform(size=(24, 24))
    self_ssim = metrics.ssim(a, a)
    p = metrics.psnr(np.full((10, 10), 0.5), np.zeros((10, 10)))
    worst = 0.0
    for _ in range(20):
        x = rng.uniform(size=(16, 20))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        worst = max(worst, abs(metrics.ssim(x, y) - ssim_windows(x, y)))
    ok = self_ssim == 1.0 and abs(p - 6.0206) < 1e-4 and worst < 1e-6
    report(6, ok, f"ssim(a,a)={self_ssim!r}, psnr={p:.5f} dB, ssim vs window reference {worst:.1e}")


# ---------------------------------------------------------------- 7


def test_criterion_7_desk_training(desk, report):
    cfg, log = desk["cfg"], desk["log"]
    mc = mcbn.mc_infer_fast(desk["params"], desk["lr"], desk["stats"], cfg.run.T)
    crop = lambda a: data.crop_boundary(a, cfg.eval_crop)  # noqa: E731
    base = metrics.psnr(crop(desk["lr"]), crop(desk["hr"]))
    net = metrics.psnr(crop(mc.mean_image), crop(desk["hr"]))
    window = np.convolve(np.asarray(log.loss), np.ones(50) / 50, "valid")
    k = len(window) // 3
    first, last = window[:k].mean(), window[-k:].mean()
    ok = (len(log.loss) >= 500 and net - base >= 0.3 and last <= first and desk["train_s"] < 600)
    report(7, ok, f"{len(log.loss)} updates in {desk['train_s']:.0f}s, bicubic {base:.3f} dB, "
                  f"net {net:.3f} dB (+{net - base:.3f}), windowed loss first/last third {first:.5f}/{last:.5f}")


# ---------------------------------------------------------------- 8


def test_criterion_8_mc_count_stabilization(desk, report):
    params, cfg = desk["params"], desk["cfg"]
    means = {3: [], 25: []}
    for k in range(20):
        rng = np.random.default_rng(np.random.SeedSequence(stream_seed(cfg.run.seed, "stats"), spawn_key=(1000 + k,)))
        stats = mcbn.estimate_stats_sets(params, desk["train_planes"], 25, cfg.training.batch_size,
                                         cfg.training.patch_size, rng, cfg.stats.patches_per_image)
        for t in means:
            means[t].append(mcbn.mc_infer_fast(params, desk["lr"], stats, t).mean_image)
    spread = {t: float(np.std(np.stack(v), axis=0).mean()) for t, v in means.items()}
    report(8, spread[25] <= spread[3], f"pixel-mean std of MC mean: T=3 {spread[3]:.3e}, T=25 {spread[25]:.3e}")


# ---------------------------------------------------------------- 9


def test_criterion_9_aggregation_invariants(desk, report):
    params, stats, lr = desk["params"], desk["stats"], desk["lr"]
    out = mcbn.mc_infer_fast(params, lr, stats, stats.T)
    rng = np.random.default_rng(99)
    perm_diff = 0.0
    for _ in range(3):
        shuffled = mcbn.mc_infer_fast(params, lr, stats.subset(rng.permutation(stats.T)), stats.T)
        perm_diff = max(perm_diff, float(np.max(np.abs(shuffled.mean_image - out.mean_image))),
                        float(np.max(np.abs(shuffled.variance_map - out.variance_map))))
    single = mcbn.mc_infer_fast(params, lr, stats, 1)
    ok = bool(np.all(out.variance_map >= 0)) and perm_diff < 1e-6 and not single.variance_map.any()
    report(9, ok, f"min variance {out.variance_map.min():.2e}, permutation diff {perm_diff:.1e}, "
                  f"T=1 max variance {float(single.variance_map.max())!r}")


# ---------------------------------------------------------------- 10


def test_criterion_10_rerun_from_manifest(tmp_path, report):
    # desk architecture and data, shortened schedule: byte identity does not depend on run length
    root = write_synthetic_dataset(tmp_path / "data", n_train=8, size=96, seed=7)
    cfg = desk_config(root, ["training.iterations=40", "training.val_every=20"])
    cli.cmd_train(cfg)
    cli.cmd_estimate_stats(cfg)
    out = root / "out"
    redo = tmp_path / "redo"
    reroute = ["--set", f"paths.output_dir={redo}", "--checkpoint", str(redo / "model.mcsr"),
               "--stats-file", str(redo / "stats.mcbn")]
    codes = (cli.main(["train", "--config", str(out / "train_manifest.ini"), *reroute]),
             cli.main(["estimate-stats", "--config", str(out / "stats_manifest.ini"), *reroute]))
    same_ckpt = (redo / "model.mcsr").read_bytes() == (out / "model.mcsr").read_bytes()
    same_stats = (redo / "stats.mcbn").read_bytes() == (out / "stats.mcbn").read_bytes()
    report(10, codes == (0, 0) and same_ckpt and same_stats,
           f"exit codes {codes}, checkpoint identical {same_ckpt}, stats identical {same_stats}")
