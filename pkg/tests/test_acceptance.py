"""Acceptance gate: twelve checks, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
under plain ``pytest`` the per-test PASSED/FAILED verdicts carry the same
information.
"""

import time

import numpy as np
import pytest

from nfar.blocks import BlockPlan
from nfar.convkv import (
    cache_append,
    cache_roll,
    compress_segment,
    compressor_arrays,
    coverage_accounting,
    new_cache,
    set_reference,
)
from nfar.model import (
    DenoiserConfig,
    RopeFrequencies,
    block_causal_mask,
    init_params,
    rope_apply,
    wrap_params,
)
from nfar.numerics import Tensor, finite_difference_grad, grad_of, sum_all
from nfar.rng import STREAM_DATA, make_rng
from nfar.schedule import GenericSchedule, SamplerConfig, expected_neighbor_distance, monte_carlo_prop2
from nfar.streaming import (
    bench_overhead,
    generate_full_recompute,
    generate_stream,
    zero_shot_experiment,
)
from nfar.synthdata import (
    Dataset,
    LatentDynamics,
    check_prop1,
    condition_vector,
    generate_state_path,
    make_dataset,
    render_and_encode,
)
from nfar.training import TrainConfig, neighbor_forcing_loss, smoothed, train_stage1
from nfar.model import denoiser_forward


def report(name: str, ok: bool, metric: str, budget: float, elapsed: float):
    print(f"\nCHECK {name} {'PASS' if ok else 'FAIL'} {metric} ({elapsed:.1f}s / budget {budget:.0f}s)")
    assert ok, f"{name}: {metric}"
    assert elapsed < budget, f"{name}: took {elapsed:.1f}s, budget {budget:.0f}s"


def randomized(config, seed, scale=0.05):
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed)
    for name in params.denoiser_names():
        params.values[name] = params.values[name] + scale * rng.standard_normal(params.values[name].shape)
    return params


def test_01_prop2_closed_form():
    t0 = time.monotonic()
    rng = make_rng(0, STREAM_DATA)
    worst = 0.0
    for alpha, sigma in ((1.0, 0.0), (0.5, 0.5), (0.0, 1.0)):
        schedule = GenericSchedule(steps=(0.5,), alphas=(alpha,), sigmas=(sigma,))
        for d in (4, 16):
            for scale in (0.1, 2.0):
                za = rng.standard_normal(d)
                zb = za + scale * rng.standard_normal(d)
                exact = expected_neighbor_distance(alpha, sigma, d, float(((zb - za) ** 2).sum()))
                est = monte_carlo_prop2((za, zb), schedule, 0.5, 100_000, seed=1)
                worst = max(worst, abs(est - exact) / exact)
    report("prop2-closed-form", worst < 0.02, f"max_rel_err={worst:.5f} (tol 0.02, 1e5 samples)",
           30, time.monotonic() - t0)


def test_02_prop1_bound():
    t0 = time.monotonic()
    worst, violations = 0.0, 0
    for i in range(20):
        dyn = LatentDynamics.create(seed=100 + i)
        u = generate_state_path(500, dyn.delta_u, seed=100 + i)
        _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=600 + i)
        rep = check_prop1(dyn, z0, u)
        worst = max(worst, rep.tightness)
        violations += 0 if rep.holds else 1
    dyn = LatentDynamics.create(seed=100)
    u = generate_state_path(500, dyn.delta_u, seed=100)
    _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=600)
    z0 = z0.copy()
    z0[250, 0] += 2.0 * dyn.neighbor_bound
    planted = not check_prop1(dyn, z0, u).holds
    ok = violations == 0 and planted
    report("prop1-bound", ok,
           f"violations={violations}/20 worst_tightness={worst:.4f} planted_detected={planted}",
           10, time.monotonic() - t0)


def test_03_mask_correctness():
    t0 = time.monotonic()
    ok = True
    for m in (1, 2, 3, 8):
        for n_blocks in range(1, 40 // m + 1):
            n = m * n_blocks
            got = block_causal_mask(BlockPlan.uniform(n_blocks, m))
            want = np.fromfunction(lambda i, j: (j // m <= i // m).astype(float), (n, n))
            # Double-loop oracle, written out:
            for i in range(n):
                for j in range(n):
                    ok &= got[i, j] == (1.0 if j // m <= i // m else 0.0)
            ok &= np.array_equal(got, want)
    boundary = block_causal_mask(BlockPlan.default(3))
    ok &= boundary[5, 0] == 1.0 and boundary[5, 6] == 0.0
    report("mask-correctness", ok, "floor-oracle m in {1,2,3,8}, n<=40; (6,8) boundary pair",
           1, time.monotonic() - t0)


def test_04_causality_bitwise():
    t0 = time.monotonic()
    config = DenoiserConfig(n_layers=2, n_heads=2, d_model=16, d_latent=4, d_cond=8, d_ff=16)
    params = randomized(config, seed=7)
    pt = wrap_params(params)
    plan = BlockPlan((2, 2, 2))
    mask = block_causal_mask(plan)
    rng = np.random.default_rng(3)
    tokens = rng.standard_normal((6, 4))
    cond = rng.standard_normal(8)
    pos = np.arange(6)

    def outputs_and_grad(toks):
        x = Tensor(toks)
        vel, _ = denoiser_forward(pt, config, x, pos, 0.4, cond, mask)
        early = sum_all(vel * Tensor(np.array([[1.0]] * 2 + [[0.0]] * 4) * np.ones((6, 4))))
        (g,) = grad_of(early, [x])
        return vel.data, g

    base_out, base_grad = outputs_and_grad(tokens)
    ok = True
    for j in range(6):
        pert = tokens.copy()
        pert[j] += 10.0
        out, grad = outputs_and_grad(pert)
        for i in range(6):
            if i // 2 < j // 2:
                ok &= np.array_equal(out[i], base_out[i])
        if j // 2 > 0:  # perturbing beyond block 0: block-0 loss gradient rows unchanged
            ok &= np.array_equal(grad[:2], base_grad[:2])
    ok &= (base_grad[2:] == 0.0).all()  # later blocks never reach the early loss
    report("causality-bitwise", ok, "exhaustive (i, j) pairs over a 3-block toy, exact",
           10, time.monotonic() - t0)


def test_05_step_aligned_kv_reuse():
    t0 = time.monotonic()
    config = DenoiserConfig(n_layers=2, n_heads=2, d_model=32, d_latent=8, d_cond=16, d_ff=32)
    plan = BlockPlan.default(4)
    sampler = SamplerConfig.uniform(3)
    worst = 0.0
    for seed in range(10):
        params = randomized(config, seed=seed)
        rng = np.random.default_rng(seed + 50)
        x_ref = rng.standard_normal((2, config.d_latent))
        cond = rng.standard_normal(config.d_cond)
        a, _ = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=False, seed=seed)
        b = generate_full_recompute(params, x_ref, cond, plan, sampler, seed=seed)
        worst = max(worst, float(np.abs(a.values - b.values).max()))
    report("step-aligned-kv-reuse", worst <= 1e-10,
           f"max_abs_diff={worst:.3e} (tol 1e-10, 10 seeds, N=4, T=3)",
           60, time.monotonic() - t0)


def test_06_constant_memory():
    t0 = time.monotonic()
    config = DenoiserConfig(n_layers=2, n_heads=2, d_model=32, d_latent=8, d_cond=16, d_ff=32)
    params = randomized(config, seed=4)
    rng = np.random.default_rng(4)
    x_ref = rng.standard_normal((2, config.d_latent))
    cond = rng.standard_normal(config.d_cond)
    sampler = SamplerConfig.uniform(2)
    plan = BlockPlan.default(200)
    _, bounded = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=True, seed=1)
    ok = all(c == 6 for c in bounded.context_chunks[2:])
    _, unbounded = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=False, seed=1)
    grow = unbounded.context_chunks
    # Context before generating block N (1-based): 2 refs + all prior chunks.
    expected = [2] + [2 + 6 + 8 * (b - 1) for b in range(1, 200)]
    ok &= grow == expected
    ok &= all(b > a for a, b in zip(grow, grow[1:]))
    report("constant-memory", ok,
           f"bounded context==6 for blocks 3..200; unbounded strictly grows to {grow[-1]}",
           300, time.monotonic() - t0)


def test_07_coverage_ledger():
    t0 = time.monotonic()
    config = DenoiserConfig()
    comp = compressor_arrays(init_params(config, seed=0))
    cache = new_cache(config.n_layers, config.d_model, step_tag=0.5)
    rng = np.random.default_rng(0)
    kv = lambda n: [(rng.standard_normal((n, config.d_model)),
                     rng.standard_normal((n, config.d_model))) for _ in range(config.n_layers)]
    set_reference(cache, kv(2), [-2, -1])
    ok, total = True, 0
    for roll in range(100):
        n = 6 if roll == 0 else 8
        cache_append(cache, kv(n), list(range(total, total + n)), 0.5)
        total += n
        cache_roll(cache, comp)
        acc = coverage_accounting(cache)
        ok &= sorted(sum(acc.values(), [])) == list(range(total))
        ok &= cache.pending.n_chunks < cache.lam
    report("coverage-ledger", ok, f"100 rolls, {total} chunks each accounted exactly once",
           10, time.monotonic() - t0)


def test_08_averaging_fixed_point():
    t0 = time.monotonic()
    config = DenoiserConfig()
    comp = compressor_arrays(init_params(config, seed=0))
    rng = np.random.default_rng(5)
    K = rng.standard_normal((5, config.d_model))
    V = rng.standard_normal((5, config.d_model))
    kw, kb, vw, vb = comp[0]
    m_k, m_v, s = compress_segment(kw, kb, vw, vb, K, V, 11.0, 5)
    err = max(np.abs(m_k - K.mean(axis=0)).max(), np.abs(m_v - V.mean(axis=0)).max())
    freqs = RopeFrequencies.create(config.head_dim, config.rope_base)
    hd = config.head_dim
    consumed = rope_apply(Tensor(m_k[:, :hd]), np.array([s]), freqs).data[0]
    ang = s * freqs.freqs
    manual = np.concatenate([
        m_k[0, :hd // 2] * np.cos(ang) - m_k[0, hd // 2:hd] * np.sin(ang),
        m_k[0, :hd // 2] * np.sin(ang) + m_k[0, hd // 2:hd] * np.cos(ang),
    ])
    rope_err = np.abs(consumed - manual).max()
    ok = err < 1e-12 and rope_err < 1e-12 and s == 11.0
    report("averaging-fixed-point", ok,
           f"mean_err={err:.2e} rope_reset_err={rope_err:.2e} (tol 1e-12)",
           1, time.monotonic() - t0)


def test_09_gradient_integrity():
    t0 = time.monotonic()
    config = DenoiserConfig(n_layers=2, n_heads=2, d_model=8, d_latent=4, d_cond=8, d_ff=8)
    params = init_params(config, seed=9)
    rng = np.random.default_rng(9)
    for name in params.values:
        params.values[name] = params.values[name] + 0.05 * rng.standard_normal(params.values[name].shape)
    plan_s1 = BlockPlan((2, 2))
    plan_s2 = BlockPlan.default(3)  # (6, 8, 8): long enough for a compression span
    from nfar.training import default_compress_spec
    spec = default_compress_spec(plan_s2)
    assert spec is not None and spec.n_mem > 0
    worst = 0.0
    for batch in range(3):
        brng = np.random.default_rng(1000 + batch)
        seqs1 = brng.standard_normal((1, 4, 4))
        conds = brng.standard_normal((1, 8))
        t = brng.uniform(0.1, 0.9, size=1)
        eps1 = brng.standard_normal((1, 4, 4))
        seqs2 = brng.standard_normal((1, plan_s2.total_chunks, 4))
        eps2 = brng.standard_normal((1, plan_s2.total_chunks, 4))

        def loss_of(values, name, x, which):
            vals = dict(values)
            vals[name] = x
            pt = {k: Tensor(v) for k, v in vals.items()}
            if which == 1:
                return neighbor_forcing_loss(pt, config, seqs1, conds, t, eps1, plan_s1)
            return neighbor_forcing_loss(pt, config, seqs2, conds, t, eps2, plan_s2,
                                         compress_spec=spec)

        for name in params.values:
            which = 2 if name.startswith("compressor.") else 1
            pt = {k: Tensor(v) for k, v in params.values.items()}
            if which == 1:
                loss = neighbor_forcing_loss(pt, config, seqs1, conds, t, eps1, plan_s1)
            else:
                loss = neighbor_forcing_loss(pt, config, seqs2, conds, t, eps2, plan_s2,
                                             compress_spec=spec)
            (g,) = grad_of(loss, [pt[name]])
            fd = finite_difference_grad(
                lambda x, n=name, w=which: loss_of(params.values, n, x, w).item(),
                params.values[name])
            rel = float(np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8))
            worst = max(worst, rel)
    report("gradient-integrity", worst < 1e-4,
           f"max_rel_err={worst:.2e} over every parameter, 3 batches (tol 1e-4)",
           300, time.monotonic() - t0)


def test_10_training_efficacy():
    t0 = time.monotonic()
    # Default synthetic dataset: smoothed loss at step 2000 under half of start.
    dyn = LatentDynamics.create(seed=0)
    plan = BlockPlan.default(3)
    ds = make_dataset(dyn, 32, plan.total_chunks, seed=1)
    tc = TrainConfig(total_steps=2000, plan=plan, seed=1)
    _, hist = train_stage1(tc, ds, init_params(DenoiserConfig(), seed=2))
    sm = smoothed([h[1] for h in hist])
    ratio = sm[-1] / sm[49]
    # Linearly-solvable micro-dataset: constant-direction latents.
    d = 16
    v = np.ones(d) / np.sqrt(d)
    amps = np.array([0.75, 1.0, 1.25, 1.5])
    seqs = np.stack([a * np.tile(v, (plan.total_chunks, 1)) for a in amps])
    conds = np.stack([condition_vector(s) for s in seqs])
    micro = Dataset(sequences=seqs, conditions=conds, dynamics=dyn)
    tc2 = TrainConfig(total_steps=5000, plan=plan, seed=2, batch_size=8,
                      learning_rate=1e-3, lr_schedule="cosine")
    _, hist2 = train_stage1(tc2, micro, init_params(DenoiserConfig(), seed=3))
    micro_final = smoothed([h[1] for h in hist2])[-1]
    ok = ratio < 0.5 and micro_final < 1e-3
    report("training-efficacy", ok,
           f"smoothed ratio@2000={ratio:.3f} (<0.5); micro smoothed@5000={micro_final:.2e} (<1e-3)",
           900, time.monotonic() - t0)


def test_11_zero_shot_direction():
    t0 = time.monotonic()
    dyn = LatentDynamics.create(seed=0)
    plan_train = BlockPlan.default(3)
    ds = make_dataset(dyn, 32, plan_train.total_chunks, seed=1)
    tc = TrainConfig(total_steps=1200, plan=plan_train, seed=1, mask_mode="none")
    params, _ = train_stage1(tc, ds, init_params(DenoiserConfig(), seed=2))
    plan = BlockPlan.default(6)
    sampler = SamplerConfig.uniform(3)
    res = {}
    for s in range(20):
        u = generate_state_path(plan.total_chunks, dyn.delta_u, seed=1000 + s)
        _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=2000 + s)
        scores = zero_shot_experiment(params, z0[:2], condition_vector(z0), plan, sampler, seed=s)
        for k, val in scores.items():
            res.setdefault(k, []).append(val)
    medians = {k: float(np.median(vals)) for k, vals in res.items()}
    ok = medians["same-step"] < medians["independent-noise"]
    report("zero-shot-direction", ok,
           "medians over 20 seeds: " + " ".join(f"{k}={v:.3f}" for k, v in sorted(medians.items())),
           600, time.monotonic() - t0)


def test_12_overhead_sanity():
    t0 = time.monotonic()
    config = DenoiserConfig()
    params = randomized(config, seed=12)
    rng = np.random.default_rng(12)
    x_ref = rng.standard_normal((2, config.d_latent))
    cond = rng.standard_normal(config.d_cond)
    plan = BlockPlan.default(50)
    result = bench_overhead(params, x_ref, cond, plan, SamplerConfig.uniform(2),
                            repetitions=5, seed=12)
    ok = result["overhead_fraction"] < 0.10
    ok &= result["bounded_last_block"] < result["unbounded_last_block"]
    report("overhead-sanity", ok,
           f"overhead={result['overhead_fraction']:+.3f} (<0.10); "
           f"block50 bounded={result['bounded_last_block']*1e3:.2f}ms "
           f"unbounded={result['unbounded_last_block']*1e3:.2f}ms",
           300, time.monotonic() - t0)
