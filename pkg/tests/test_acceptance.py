"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 8-10 share one desk-scale SFT run (session fixture); 12 drives
the CLI twice with a reduced budget and compares artifact digests.
"""

import json
import time

import numpy as np
import pytest

from flowsr import cli
from flowsr.data import build_dataset
from flowsr.metrics import psnr
from flowsr.model import Architecture, ConditionTag, LowRankAdapter, VelocityModel, forward, merge_adapter
from flowsr.reward import FIRST, SECOND, TIE, calibrate, compass_reward, gated_gain_reward, pairwise_rank
from flowsr.rl import NFTConfig, filter_group, nft_loss, nft_objective, normalize_rewards, policy_fn
from flowsr.sampler import SampleConfig, initial_noise, sample

from gradcheck import worst_relative_error


def test_c01_reward_algebra(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    q_lr, q_sr = rng.uniform(1, 5, 1000), rng.uniform(1, 5, 1000)
    err_f1 = np.max(np.abs(compass_reward(np.ones(1000), q_lr, q_sr) - q_sr))
    r0 = compass_reward(np.zeros(1000), q_lr, q_sr)
    gains = [gated_gain_reward(0.8, q, q + 1.0, 7.0) for q in (2.0, 3.0, 4.0)]
    mono = gains[0] - gains[1] > 1e-12 and gains[1] - gains[2] > 1e-12
    dt = time.perf_counter() - t0
    ok = err_f1 <= 1e-12 and np.all(r0 == 0) and mono and dt < 1.0
    criterion(1, ok, f"max|R(F=1)-Q_SR|={err_f1:.1e}, R(F=0)==0: {bool(np.all(r0 == 0))}, "
                     f"gain terms {gains[0]:.6f}>{gains[1]:.6f}>{gains[2]:.6f}, {dt:.3f}s")
    assert ok


def test_c02_calibration_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = -np.inf
    for _ in range(100):
        n = int(rng.integers(3, 13))
        r, q = rng.random(n), rng.uniform(1, 5, n)
        a, b, _ = calibrate(r, q)
        sa, sb = 3 * max(abs(a), 1e-3), 3 * max(abs(b), 1e-3)
        A, B = np.meshgrid(np.linspace(-sa, sa, 201), np.linspace(-sb, sb, 201), indexing="ij")
        grid = ((A[..., None] * r + B[..., None] - q) ** 2).sum(-1)
        ols = ((a * r + b - q) ** 2).sum()
        worst = max(worst, ols - grid.min())
    a2, b2, qh = calibrate([0, 1], [2, 4])
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and (a2, b2) == (2.0, 2.0) and dt < 30
    criterion(2, ok, f"max(OLS - best grid residual)={worst:.2e}, 2-point fit=({a2}, {b2}), {dt:.1f}s")
    assert ok


def test_c03_normalization(criterion):
    r = normalize_rewards([1, 2, 3])
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        s = rng.normal(0, 3, int(rng.integers(2, 25)))
        worst = max(worst, np.max(np.abs(normalize_rewards(2.5 * s - 1) - normalize_rewards(s))))
    ok = np.array_equal(r, [0.0, 0.5, 1.0]) and worst <= 1e-12
    criterion(3, ok, f"normalize(1,2,3)={r.tolist()}, affine max dev={worst:.1e}")
    assert ok


def test_c04_filtering(criterion):
    cfg = NFTConfig()
    a = filter_group(np.array([0.92, 0.95, 0.98]) * 9, cfg)
    b = filter_group(np.array([0.2, 0.8]) * 9, cfg)
    zero = [filter_group(np.full(k, v), cfg).kept for k in (2, 5, 24) for v in (0.0, 1.0, 4.5, 9.0, -1.3)]
    ok = (not a.kept) and b.kept and not any(zero)
    criterion(4, ok, f"{{.92,.95,.98}} kept={a.kept} ({a.reason}); {{.2,.8}} kept={b.kept}; "
                     f"zero-variance kept={sum(zero)}/{len(zero)}")
    assert ok


def _nft_fd_error(m, ad, x_t, t, lr, ids, v_old, v, r, g, h=1e-5, n_probe=4):
    """Central differences of the NFT loss (v_old frozen) on a few entries of every block."""
    L = lambda: nft_objective(forward(m, x_t, t, lr, ids, ad), v_old, v, r)[0]
    rng, worst = np.random.default_rng(0), 0.0
    for key in g:
        layer, which = key.rsplit(".", 1) if key.endswith((".A", ".B")) else (None, None)
        arr = (ad.A if which == "A" else ad.B)[layer] if which else m.params[key]
        for flat in rng.choice(arr.size, size=min(n_probe, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            keep = arr[idx]
            arr[idx] = keep + h
            lp = L()
            arr[idx] = keep - h
            lm = L()
            arr[idx] = keep
            num, ana = (lp - lm) / (2 * h), g[key][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def test_c05_nft_identities(criterion):
    t0 = time.perf_counter()
    arch = Architecture(patch=4, width=8, depth=1, time_dim=4, prompt_dim=2, n_prompts=2)
    rng = np.random.default_rng(5)
    m = VelocityModel.init(arch, rng, dtype=np.float64)
    ad = LowRankAdapter.init(m, 2, 4.0, rng)
    for k in ad.B:
        ad.B[k] = 0.1 * rng.standard_normal(ad.B[k].shape)
    x_sr, lr = rng.random((3, 8, 8, 1)), rng.random((3, 8, 8, 1))
    ids, t, eps = np.array([0, 1, 0]), rng.uniform(0.1, 0.9, 3), rng.standard_normal((3, 8, 8, 1))
    x_t, v = (1 - t[:, None, None, None]) * x_sr + t[:, None, None, None] * eps, eps - x_sr
    old = policy_fn(m, ad.copy())
    v_old = old(x_t, t, lr, ids)
    fm_loss = float(np.mean((v_old - v) ** 2))
    _, fm_grads = nft_loss(m, ad, old, x_sr, lr, ids, np.ones(3), 1.0, t=t, eps=eps, base_grads=True)
    loss_err, grad_err, fd_err = 0.0, 0.0, 0.0
    for r in (0.0, 0.5, 1.0):
        rr = np.full(3, r)
        loss, g = nft_loss(m, ad, old, x_sr, lr, ids, rr, 1.0, t=t, eps=eps, base_grads=True)
        loss_err = max(loss_err, abs(loss - fm_loss))
        for k in g:
            want = (2 * r - 1) * fm_grads[k]
            scale = max(np.abs(want).max(), 1e-12)
            grad_err = max(grad_err, np.abs(g[k] - want).max() / (scale if r != 0.5 else 1.0))
        if r != 0.5:
            fd_err = max(fd_err, _nft_fd_error(m, ad, x_t, t, lr, ids, v_old, v, rr, g))
    dt = time.perf_counter() - t0
    ok = loss_err <= 1e-10 and grad_err < 1e-4 and fd_err < 1e-4 and dt < 60
    criterion(5, ok, f"|loss-FM| max={loss_err:.1e}, grad vs (2r-1)FM max rel={grad_err:.1e}, "
                     f"FD rel err={fd_err:.1e}, {dt:.1f}s")
    assert ok


def test_c06_gradient_correctness(criterion):
    t0 = time.perf_counter()
    arch = Architecture(patch=2, width=8, depth=2, time_dim=4, prompt_dim=3, n_prompts=3)
    rng = np.random.default_rng(6)
    m = VelocityModel.init(arch, rng, dtype=np.float64)
    for k in m.params:
        m.params[k] = m.params[k] + 0.05 * rng.standard_normal(m.params[k].shape)
    ad = LowRankAdapter.init(m, 2, 4.0, rng)
    for k in ad.B:
        ad.B[k] = 0.1 * rng.standard_normal(ad.B[k].shape)
    x, lr = rng.standard_normal((2, 8, 8, 1)), rng.random((2, 8, 8, 1))
    w = rng.standard_normal(x.shape)
    worst = worst_relative_error(m, ad, x, rng.uniform(0.05, 0.95, 2), lr, np.array([0, 2]), w, n_probe=10)
    name = max(worst, key=worst.get)
    dt = time.perf_counter() - t0
    ok = worst[name] < 1e-4 and dt < 120
    criterion(6, ok, f"{len(worst)} parameter blocks, worst rel err {worst[name]:.1e} ({name}), {dt:.1f}s")
    assert ok


def test_c07_sampler_exactness(criterion):
    rng = np.random.default_rng(7)
    hr = rng.random((16, 16, 1))
    eps = initial_noise(hr.shape, seed=11)
    field = lambda x, t, lr, ids: eps - hr
    errs = {n: np.abs(sample(field, ConditionTag(np.zeros_like(hr)), SampleConfig(steps=n, seed=11)) - hr).max()
            for n in (1, 6, 40)}
    m = VelocityModel.init(Architecture(width=48, depth=2), rng, dtype=np.float64)
    ad = LowRankAdapter.init(m, 32, 64.0, rng)
    for k in ad.B:
        ad.B[k] = 0.02 * rng.standard_normal(ad.B[k].shape)
    cond = ConditionTag(build_dataset(1).lr_up(0))
    cfg = SampleConfig(steps=40, seed=3)
    merge_err = np.abs(sample(merge_adapter(m, ad), cond, cfg) - sample(m, cond, cfg, adapter=ad)).max()
    ok = max(errs.values()) <= 1e-6 and merge_err <= 1e-6
    criterion(7, ok, "constant field err " + ", ".join(f"{n} steps {e:.1e}" for n, e in errs.items())
              + f"; merged vs on-the-fly {merge_err:.1e}")
    assert ok


@pytest.mark.slow
def test_c08_cold_start_efficacy(desk, criterion):
    t0 = time.perf_counter()
    base, sft = desk.models
    train_s = desk.sft_seconds if desk.sft_seconds is not None else float("nan")
    agg = desk.sft_report.aggregate()
    gain = agg["SFT"]["psnr"] - agg["bicubic"]["psnr"]
    steps = desk.cfg["sft.steps"]
    elapsed = time.perf_counter() - t0
    ok = gain >= 1.0 and steps <= 5000 and elapsed <= 20 * 60
    criterion(8, ok, f"SFT {agg['SFT']['psnr']:.2f} dB vs cubic {agg['bicubic']['psnr']:.2f} dB "
                     f"(+{gain:.2f}) on {len(desk.data[1])} held-out images after {steps} steps; "
                     f"train {train_s:.0f}s, total {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c09_rl_trend(desk, criterion):
    t0 = time.perf_counter()
    desk.models
    sft = desk.sft_report.aggregate()["SFT"]
    _, rep, _ = desk.arm("full")
    rl = rep.aggregate()[rep.meta["label"]]
    dq, df = rl["Q"] - sft["Q"], sft["F"] - rl["F"]
    elapsed = time.perf_counter() - t0
    ok = dq > 0 and df < 0.05 and elapsed <= 45 * 60
    criterion(9, ok, f"Q {sft['Q']:.4f} -> {rl['Q']:.4f} (d={dq:+.4f}), F {sft['F']:.4f} -> {rl['F']:.4f} "
                     f"(drop {df:+.4f}), {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c10_reward_hacking_ablation(desk, criterion):
    sft = desk.sft_report.aggregate()["SFT"]
    _, full, _ = desk.arm("full")
    _, gain, _ = desk.arm("gain_only")
    f_full = full.aggregate()[full.meta["label"]]["F"]
    f_gain = gain.aggregate()[gain.meta["label"]]["F"]
    q_gain = gain.aggregate()[gain.meta["label"]]["Q"]
    drop_full, drop_gain = sft["F"] - f_full, sft["F"] - f_gain
    ok = drop_gain > drop_full
    criterion(10, ok, f"F drop gain_only {drop_gain:+.4f} vs full {drop_full:+.4f} (gain_only Q {q_gain:.4f})")
    assert ok


def test_c11_pairwise_ranking(criterion):
    def order(values):
        return lambda a, b: FIRST if values[a] > values[b] else SECOND if values[a] < values[b] else TIE
    r2, _ = pairwise_rank(order([1, 0]), [0, 1])
    r4, _ = pairwise_rank(order([4, 3, 2, 1]), [0, 1, 2, 3])
    beats = {(0, 1), (1, 2), (2, 0)}
    cyc = lambda a, b: FIRST if (a, b) in beats else SECOND
    r3, _ = pairwise_rank(cyc, [0, 1, 2])
    ok = (r2.tolist() == [1.0, 0.0] and np.array_equal(r4, [1, 2 / 3, 1 / 3, 0])
          and r3.tolist() == [0.5, 0.5, 0.5])
    criterion(11, ok, f"N=2 {r2.tolist()}, N=4 {np.round(r4, 6).tolist()}, 3-cycle {r3.tolist()}")
    assert ok


SMOKE = [
    "data.n_train=24", "data.n_heldout=6", "data.n_unpaired=8", "model.width=32", "model.depth=2",
    "sft.steps=60", "sft.warmup=10", "sft.base_snapshot_step=20", "sft.log_every=10", "rl.K=6", "rl.fr_rounds=3",
    "rl.nr_rounds=3", "rl.groups_per_round=1", "rl.rank=8", "rl.alpha=16", "sampler.inference_steps=8",
    "eval.n_images=6",
]


def _pipeline(root, seed):
    sets = [a for kv in SMOKE + [f"master_seed={seed}"] for a in ("--set", kv)]
    dirs, codes = {}, []

    def run(name, *args):
        d = root / name
        codes.append(cli.main(sets + ["--set", f"run_dir={d}"] + list(args)))
        dirs[name] = d
        return d

    data = run("data", "synth-data")
    sft = run("sft", "train-sft", "--data", str(data))
    fr = run("fr", "train-rl", "--stage", "fr", "--data", str(data), "--sft", str(sft))
    nr = run("nr", "train-rl", "--stage", "nr", "--data", str(data), "--sft", str(sft), "--fr", str(fr))
    merged = run("merged", "merge", "--sft", str(sft), "--adapter", str(nr))
    run("eval", "evaluate", "--model", str(merged), "--data", str(data))
    digests = {k: json.loads((d / "summary.json").read_text())["artifacts"] for k, d in dirs.items()}
    return codes, digests


@pytest.mark.slow
def test_c12_end_to_end_smoke(tmp_path, criterion):
    t0 = time.perf_counter()
    codes_a, dig_a = _pipeline(tmp_path / "a", 3)
    codes_b, dig_b = _pipeline(tmp_path / "b", 3)
    n_art = sum(len(v) for v in dig_a.values())
    same = dig_a == dig_b
    elapsed = time.perf_counter() - t0
    ok = codes_a == [0] * 6 and codes_b == [0] * 6 and same and n_art > 0 and elapsed <= 3600
    criterion(12, ok, f"exit codes {codes_a} / {codes_b}, {n_art} artifacts, digests identical={same}, "
                      f"{elapsed:.0f}s")
    assert ok
