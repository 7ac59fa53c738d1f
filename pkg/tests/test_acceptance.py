"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at the
end of the run lists every criterion. The trained model used by criteria 8, 10
and 12 is trained once per session (about half an hour on one CPU core) and
cached in pytest's cache directory; ``--cache-clear`` forces a fresh run.
"""

import hashlib
import json
import math
import time
import tracemalloc
from fractions import Fraction

import numpy as np
import pytest
from scipy import ndimage
from skimage.metrics import structural_similarity

from rddpm import tinycnn
from rddpm.degrade import DegradationSpec, degrade, make_textures
from rddpm.denoiser import OracleGaussian, TinyCNN, TrainConfig, train
from rddpm.metrics import enl, epi, psnr, seam_ratio, ssim, to_intensity
from rddpm.regional import (
    independent_windows_despeckle,
    plan_windows,
    regional_despeckle,
    regional_epsilon,
)
from rddpm.sampler import SamplerConfig, sample
from rddpm.schedule import (
    build_linear_schedule,
    posterior_mean,
    q_sample,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def record(acceptance_log):
    def _record(num, name, passed, detail):
        acceptance_log.append((num, name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {num} {name}: {detail}")
        assert passed, detail

    return _record


@pytest.fixture(scope="module")
def s():
    return build_linear_schedule(1000, 1e-4, 0.02)


# ---------------------------------------------------------------- 1


def exact_alpha_bar(T, b0, b1, upto):
    """Exact rational product of (1 - beta_t) with linearly spaced betas."""
    b0, b1 = Fraction(b0), Fraction(b1)
    prod = Fraction(1)
    for t in range(1, upto + 1):
        beta = b0 + (b1 - b0) * (t - 1) / (T - 1)
        prod *= 1 - beta
    return prod


def test_c01_schedule(record):
    t0 = time.perf_counter()
    s = build_linear_schedule(1000, 1e-4, 0.02)
    b = s.betas
    checks = {
        "endpoints": b[0] == 1e-4 and b[-1] == 0.02,
        "monotone": bool(np.all(np.diff(b) > 0)),
        "range": bool(np.all((b > 0) & (b < 1))),
        "alpha": bool(np.all(s.alphas == 1 - b)),
        "alpha_bar": bool(np.allclose(s.alpha_bars, np.cumprod(1 - b), rtol=1e-14, atol=0)),
        "alpha_bar decreasing": bool(np.all(np.diff(s.alpha_bars) < 0)) and s.alpha_bar(0) == 1.0,
        "posterior var": bool(np.allclose(s.posterior_variances[1:],
                                          (1 - s.alpha_bars[:-1]) / (1 - s.alpha_bars[1:]) * b[1:],
                                          rtol=1e-13, atol=0)) and s.posterior_variance(1) == 0.0,
    }
    ab = s.alpha_bar(1000)
    exact = float(exact_alpha_bar(1000, Fraction(1, 10000), Fraction(2, 100), 1000))
    err = abs(ab - exact)
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and err <= 1e-12 and elapsed < 1.0
    failed = [k for k, v in checks.items() if not v]
    record(1, "schedule suite", ok,
           f"alpha_bar_1000={ab:.6e} exact={exact:.6e} |diff|={err:.1e} (<=1e-12); "
           f"invariants {'ok' if not failed else failed}; {elapsed:.2f}s")


# ---------------------------------------------------------------- 2


def test_c02_forward_marginal(record, s):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    x0 = 0.6
    worst = 0.0
    rows = []
    for t in (1, 250, 500, 1000):
        eps = rng.standard_normal(100_000)
        xt = q_sample(np.full(100_000, x0), t, eps, s)
        mean_want = math.sqrt(s.alpha_bar(t)) * x0
        std_want = math.sqrt(1 - s.alpha_bar(t))
        # the mean can be ~0 at t=T, so its 1% is taken relative to the marginal scale
        mean_rel = abs(xt.mean() - mean_want) / max(abs(mean_want), std_want)
        std_rel = abs(xt.std() - std_want) / std_want
        worst = max(worst, mean_rel, std_rel)
        rows.append(f"t={t}: mean {mean_rel:.2%} std {std_rel:.2%}")
    elapsed = time.perf_counter() - t0
    record(2, "forward marginal", worst <= 0.01 and elapsed < 10,
           f"worst relative error {worst:.3%} (<=1%); " + "; ".join(rows) + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_c03_posterior_mean_algebra(record):
    t0 = time.perf_counter()
    s = build_linear_schedule(1000, 1e-4, 0.02)
    # independent schedule tables from the exact product
    rng = np.random.default_rng(303)
    worst = 0.0
    ts = (1, 2, 3, 10, 100, 250, 500, 750, 999, 1000)
    exact = {}
    prod = Fraction(1)
    for t in range(1, 1001):
        beta = Fraction(1, 10000) + (Fraction(2, 100) - Fraction(1, 10000)) * (t - 1) / 999
        prev = prod
        prod *= 1 - beta
        if t in ts:
            exact[t] = (float(beta), float(prev), float(prod))
    for t in ts:
        beta, ab_prev, ab = exact[t]
        c_x0 = math.sqrt(ab_prev) * beta / (1 - ab)
        c_xt = math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)
        for _ in range(100):
            x0 = rng.uniform(-1, 1, (4, 4))
            eps = rng.standard_normal((4, 4))
            xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
            want = c_x0 * x0 + c_xt * xt
            got = posterior_mean(xt, eps, t, s)
            worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - t0
    record(3, "posterior mean algebra", worst <= 1e-10 and elapsed < 5,
           f"max |mu(eps) - mu(x0)| = {worst:.1e} (<=1e-10) over {len(ts)} t x 100 grids; {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_c04_oracle_ddpm(record, s):
    t0 = time.perf_counter()
    mu0, s0_sq, chains = 0.3, 0.04, 1000
    out = sample(np.zeros((1, chains, 1)), OracleGaussian(mu0, s0_sq), s, SamplerConfig(seed=404)).ravel()
    se = math.sqrt(s0_sq / chains)
    mean_ok = abs(out.mean() - mu0) <= 3 * se
    var_rel = abs(out.var(ddof=1) - s0_sq) / s0_sq
    elapsed = time.perf_counter() - t0
    record(4, "oracle end-to-end DDPM", mean_ok and var_rel <= 0.15 and elapsed < 120,
           f"mean {out.mean():.4f} ({abs(out.mean() - mu0) / se:.2f} SE, <=3), "
           f"variance {out.var(ddof=1):.4f} ({var_rel:.1%} off, <=15%); {elapsed:.1f}s")


# ---------------------------------------------------------------- 5


def test_c05_ddim_consistency(record, s):
    t0 = time.perf_counter()
    oracle = OracleGaussian(0.3, 0.04)
    cond = np.zeros((1, 1000, 1))
    runs = [sample(cond, oracle, s, SamplerConfig(kind="ddim", num_inference_steps=50, eta=0.0,
                                                  seed=505, noise_seed=k)) for k in (0, 1, 2)]
    identical = all(np.array_equal(runs[0], r) for r in runs[1:])
    mean_err = abs(runs[0].mean() - 0.3)
    elapsed = time.perf_counter() - t0
    record(5, "DDIM eta=0 consistency", identical and mean_err <= 0.05 and elapsed < 60,
           f"bit-identical across 3 noise seeds: {identical}; 50-step mean {runs[0].mean():.4f} "
           f"(|err| {mean_err:.4f} <= 0.05); {elapsed:.1f}s")


# ---------------------------------------------------------------- 6


def _random_cnn(seed):
    arch = tinycnn.Architecture()
    params = (np.random.default_rng(seed).standard_normal(arch.num_params) * 0.1).astype(np.float32)
    return TinyCNN(arch, params)


def test_c06_regional_equivalence(record, s):
    t0 = time.perf_counter()
    cnn = _random_cnn(606)
    rng = np.random.default_rng(6)
    x, c = rng.standard_normal((96, 96, 1)), rng.uniform(-1, 1, (96, 96, 1))
    plan = plan_windows(96, 96, 64, 16)
    # brute force: materialize all 9 window outputs, then per-pixel mean in row-major window order
    outs = {o: cnn.predict(x[o[0]:o[0] + 64, o[1]:o[1] + 64], c[o[0]:o[0] + 64, o[1]:o[1] + 64], 321, s)
            for o in plan.origins}
    want = np.empty_like(x)
    for i in range(96):
        for j in range(96):
            covering = [o for o in plan.origins if o[0] <= i < o[0] + 64 and o[1] <= j < o[1] + 64]
            acc = np.zeros(1)
            for o in covering:
                acc = acc + outs[o][i - o[0], j - o[1]]
            want[i, j] = acc / len(covering)
    got = regional_epsilon(x, c, 321, cnn, plan, s, batch_size=4)
    brute_ok = np.array_equal(got, want)

    small = build_linear_schedule(50, 1e-3, 0.1)
    cond = rng.uniform(-1, 1, (64, 64, 1))
    cfg = SamplerConfig(seed=66)
    single_ok = np.array_equal(regional_despeckle(cond, cnn, small, cfg, 64, 16), sample(cond, cnn, small, cfg))
    elapsed = time.perf_counter() - t0
    record(6, "regional equivalence", brute_ok and single_ok and elapsed < 30,
           f"96x96 vs brute force bit-identical: {brute_ok} (max diff {np.max(np.abs(got - want)):.1e}); "
           f"single window == global sampler: {single_ok}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 7


def test_c07_coverage(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    cases = []
    while len(cases) < 20:
        n = int(rng.choice([1, 2, 4, 8, 16]))
        m = n * int(rng.integers(1, 9))
        if m > 128:
            continue
        cases.append((int(rng.integers(1, 129)), int(rng.integers(1, 129)), m, n))
    bad = []
    for H, W, m, n in cases:
        p = plan_windows(H, W, m, n)
        brute = np.zeros((p.padded_height, p.padded_width), dtype=int)
        for r, c in p.origins:
            brute[r:r + m, c:c + m] += 1
        if not (np.array_equal(p.coverage, brute) and brute.min() >= 1):
            bad.append((H, W, m, n))
    elapsed = time.perf_counter() - t0
    record(7, "coverage counts", not bad and elapsed < 10,
           f"{len(cases) - len(bad)}/20 random plans match brute-force membership counts; {elapsed:.1f}s")


# ---------------------------------------------------------------- 9


def test_c09_gradient(record):
    t0 = time.perf_counter()
    arch = tinycnn.Architecture(channels=1)
    rng = np.random.default_rng(909)
    params = rng.standard_normal(arch.num_params) * 0.2
    x = rng.standard_normal((2, 8, 8, 2))
    temb = tinycnn.time_embedding(np.array([37, 800]), 1000, arch.temb_dim)
    up = rng.standard_normal((2, 8, 8, 1))
    grad = tinycnn.backward(arch, params, x, temb, up)

    def loss(p):
        return float(np.sum(tinycnn.forward(arch, p, x, temb) * up))

    h = 1e-6
    fd = np.empty_like(params)
    p = params.copy()
    for k in range(params.size):
        p[k] = params[k] + h
        lp = loss(p)
        p[k] = params[k] - h
        lm = loss(p)
        p[k] = params[k]
        fd[k] = (lp - lm) / (2 * h)
    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd))
    worst_block = max(
        np.linalg.norm(g - f) / max(np.linalg.norm(g), np.linalg.norm(f), 1e-12)
        for g, f in zip(arch.unpack(grad).values(), arch.unpack(fd).values())
    )
    elapsed = time.perf_counter() - t0
    record(9, "gradient correctness", max(rel, worst_block) <= 1e-4 and elapsed < 60,
           f"relative error {rel:.1e} overall, {worst_block:.1e} worst tensor (<=1e-4), "
           f"{params.size} parameters, float64; {elapsed:.1f}s")


# ---------------------------------------------------------------- 11


def test_c11_metric_sanity(record):
    t0 = time.perf_counter()
    checks = {}
    a = np.random.default_rng(0).random((16, 16))
    checks["psnr identical = inf"] = psnr(a, a) == math.inf
    z = np.zeros((16, 16))
    checks["psnr +0.1 = 20 dB"] = abs(psnr(z, z + 0.1) - 20.0) < 1e-12
    one = np.zeros((8, 8))
    one[2, 5] = 1.0
    checks["psnr one pixel = 18.0618"] = round(psnr(z[:8, :8], one), 4) == 18.0618
    checks["ssim identical = 1"] = ssim(a, a) == 1.0
    checks["enl constant = inf"] = enl(np.full((4, 4), 0.5)) == math.inf
    checks["enl {1,1,3,3} = 3"] = abs(enl(np.array([[1.0, 1.0], [3.0, 3.0]])) - 3.0) < 1e-12
    speckle = np.random.default_rng(1).gamma(4, 1 / 4, (100, 100))
    checks["enl gamma L=4 in [3.7,4.3]"] = 3.7 <= enl(speckle) <= 4.3
    ref = ndimage.gaussian_filter(np.random.default_rng(2).random((64, 64)), 2)
    checks["epi identical = 1"] = epi(ref, ref) == 1.0
    checks["epi blurred < 1"] = epi(ndimage.uniform_filter(ref, 3), ref) < 1
    checker = 0.1 * ((np.indices(ref.shape).sum(axis=0) % 2) * 2 - 1)
    checks["epi + checkerboard > 1"] = epi(ref + checker, ref) > 1
    worst = 0.0
    rng = np.random.default_rng(3)
    for k in range(5):
        x = ndimage.gaussian_filter(rng.random((64, 64)), 1 + k % 3)
        y = np.clip(x + rng.normal(0, 0.03 * (k + 1), x.shape), 0, 1)
        ref_val = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
        worst = max(worst, abs(ssim(x, y) - ref_val))
    checks["ssim vs skimage <= 1e-4"] = worst <= 1e-4
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    record(11, "metric sanity", not failed and elapsed < 10,
           f"{len(checks) - len(failed)}/{len(checks)} examples hold"
           f"{'' if not failed else ' (failed: ' + ', '.join(failed) + ')'}; "
           f"ssim max |diff| vs skimage {worst:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------- trained model


TRAIN = {
    "textures": 2000,
    "held_out": 50,
    "size": 64,
    "sigma": 0.2,
    "texture_seed": 1,
    "noise_seed": 2,
    "learning_rate": 2e-5,
    "batch_size": 4,
    "iterations": 20000,
    "model_seed": 0,
}


def _texture_data():
    n = TRAIN["textures"] + TRAIN["held_out"]
    clean = make_textures(n, TRAIN["size"], seed=TRAIN["texture_seed"])
    noisy = degrade(clean, DegradationSpec(sigma=TRAIN["sigma"]), np.random.default_rng(TRAIN["noise_seed"]))
    k = TRAIN["textures"]
    return clean[:k], noisy[:k], clean[k:], noisy[k:]


@pytest.fixture(scope="session")
def trained(request):
    """(model, held-out clean, held-out noisy, schedule, info)."""
    s = build_linear_schedule()
    train_c, train_n, test_c, test_n = _texture_data()
    key = hashlib.sha256(json.dumps(TRAIN, sort_keys=True).encode()).hexdigest()[:16]
    cached = request.config.cache.get(f"rddpm/trained/{key}", None)
    arch = tinycnn.Architecture(channels=1)
    if cached is not None:
        model = TinyCNN(arch, np.array(cached["params"], dtype=np.float32), seed=TRAIN["model_seed"])
        info = dict(cached["info"], source="cache")
    else:
        model = TinyCNN(arch, seed=TRAIN["model_seed"])
        cfg = TrainConfig(learning_rate=TRAIN["learning_rate"], batch_size=TRAIN["batch_size"],
                          num_iterations=TRAIN["iterations"], seed=TRAIN["model_seed"])
        t0 = time.perf_counter()
        losses = train(model, train_c.astype(np.float32), train_n.astype(np.float32), s, cfg)
        info = {"iterations": len(losses), "final_loss": float(np.mean(losses[-500:])),
                "train_seconds": time.perf_counter() - t0}
        request.config.cache.set(f"rddpm/trained/{key}", {"params": model.params.tolist(), "info": info})
        info = dict(info, source="trained this session")
    return model, test_c, test_n, s, info


# full-length ancestral sampling, the package default
EVAL_SAMPLER = SamplerConfig(seed=1010)


# ---------------------------------------------------------------- 10


def test_c10_efficacy(record, trained):
    model, clean, noisy, s, info = trained
    t0 = time.perf_counter()
    out = sample(noisy, model, s, EVAL_SAMPLER)
    ci, ni, oi = to_intensity(clean), to_intensity(noisy), to_intensity(out)
    p_noisy = np.mean([psnr(n, c) for n, c in zip(ni, ci)])
    p_out = np.mean([psnr(o, c) for o, c in zip(oi, ci)])
    s_noisy = np.mean([ssim(n, c) for n, c in zip(ni, ci)])
    s_out = np.mean([ssim(o, c) for o, c in zip(oi, ci)])
    gain = p_out - p_noisy
    elapsed = time.perf_counter() - t0 + info.get("train_seconds", 0.0)
    record(10, "despeckling efficacy", gain >= 2.0 and s_out > s_noisy and elapsed < 7200,
           f"PSNR {p_noisy:.2f} -> {p_out:.2f} dB (gain {gain:+.2f}, need >=2); "
           f"SSIM {100 * s_noisy:.2f} -> {100 * s_out:.2f}; {len(clean)} held-out images; "
           f"model {info['source']}, {info['iterations']} iterations, loss {info['final_loss']:.4f}")


# ---------------------------------------------------------------- 8


def test_c08_seams(record, trained):
    model, _, _, s, _ = trained
    t0 = time.perf_counter()
    clean = make_textures(1, 192, seed=808)[0]
    noisy = degrade(clean, DegradationSpec(sigma=TRAIN["sigma"]), np.random.default_rng(809))
    regional = regional_despeckle(noisy, model, s, EVAL_SAMPLER, m=64, n=16)
    naive = independent_windows_despeckle(noisy, model, s, EVAL_SAMPLER, m=64, n=64)
    r_reg, r_naive = seam_ratio(regional, 64), seam_ratio(naive, 64)
    elapsed = time.perf_counter() - t0
    record(8, "seam artifacts", r_reg <= 1.1 and r_naive >= 1.3 and elapsed < 600,
           f"regional m=64 n=16 seam ratio {r_reg:.3f} (<=1.1); naive per-block chains {r_naive:.3f} (>=1.3); "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 12


def _memory_budget(H, W, C, m, n, batch_size, arch):
    """Bytes allowed: O(H*W) float64 image grids plus O(m^2) float32 window scratch.

    16 padded grids cover x_t, the condition, their padded copies, the
    accumulator, noise and step temporaries. Scratch is 8 padded feature maps
    per window in a batch. Nothing may scale with the number of windows.
    """
    plan = plan_windows(H, W, m, n)
    grids = 16 * plan.padded_height * plan.padded_width * C * 8
    per_window = m * (m + 3) * arch.features * 4
    scratch = 8 * min(batch_size, plan.num_windows) * per_window
    return grids + scratch + (2 << 20)


def test_c12_arbitrary_scale(record, trained):
    model, _, _, s, _ = trained
    t0 = time.perf_counter()
    cfg = SamplerConfig(kind="ddim", num_inference_steps=2, seed=1212)
    rows, ok = [], True
    for H, W in ((64, 64), (130, 257), (512, 512)):
        noisy = degrade(make_textures(1, max(H, W), seed=H)[0][:H, :W],
                        DegradationSpec(sigma=0.2), np.random.default_rng(W))
        tracemalloc.start()
        out = regional_despeckle(noisy, model, s, cfg, m=64, n=16, batch_size=8)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        budget = _memory_budget(H, W, 1, 64, 16, 8, model.arch)
        good = out.shape == noisy.shape and np.isfinite(out).all() and peak <= budget
        ok &= good
        rows.append(f"{H}x{W}: peak {peak / 2**20:.1f} MiB / budget {budget / 2**20:.1f} MiB")
    elapsed = time.perf_counter() - t0
    record(12, "arbitrary scale", ok, "; ".join(rows) + f"; one model, no retraining; {elapsed:.0f}s")
