"""Command-line entry point: data, train, generate, verify, bench, zeroshot.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 runtime abort.
Verification results are emitted as machine-readable lines
``CHECK <name> PASS|FAIL <metric>``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import convkv, io
from .blocks import BlockPlan
from .model import DenoiserConfig, block_causal_mask, init_params
from .numerics import Tensor, finite_difference_grad, grad_of
from .rng import STREAM_DATA, make_rng
from .schedule import GenericSchedule, SamplerConfig, monte_carlo_prop2, expected_neighbor_distance
from .streaming import (
    GenerationAborted,
    bench_overhead,
    generate_full_recompute,
    generate_stream,
    zero_shot_experiment,
)
from .synthdata import LatentDynamics, check_prop1, generate_state_path, make_dataset, render_and_encode, condition_vector
from .training import (
    TrainConfig,
    TrainingDiverged,
    neighbor_forcing_loss,
    train_stage1,
    train_stage2_convkv,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3


def _check(name: str, ok: bool, metric) -> bool:
    print(f"CHECK {name} {'PASS' if ok else 'FAIL'} {metric}")
    return bool(ok)


def _echo_config(out_dir: Path, args: argparse.Namespace, keys: list[str]) -> None:
    resolved = {k: str(getattr(args, k)) for k in keys}
    (out_dir / "config.txt").write_text(io.dump_config_text(resolved), encoding="utf-8")


def _plan(n_blocks: int) -> BlockPlan:
    return BlockPlan.default(n_blocks)


def _reference_inputs(dyn: LatentDynamics, seed: int, n_frames: int):
    """Deterministic (x_ref, cond) derived from one synthetic trajectory."""
    u = generate_state_path(n_frames, dyn.delta_u, seed=seed, state_dim=dyn.state_dim)
    _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=seed + 500_000)
    return z0[:2], condition_vector(z0)


# -- data ----------------------------------------------------------------------

def cmd_data(args) -> int:
    out = Path(args.out)
    dyn = LatentDynamics.create(
        seed=args.seed, delta_u=args.delta_u, residual_bound=args.residual_bound
    )
    dataset = make_dataset(dyn, args.sequences, args.frames, seed=args.seed)
    io.save_dataset(out, dataset, seed=args.seed)
    _echo_config(out, args, ["seed", "sequences", "frames", "delta_u", "residual_bound"])
    report = [
        check_prop1(dyn, dataset.sequences[i], None) for i in range(args.sequences)
    ]
    worst = max((r.tightness for r in report), default=0.0)
    print(f"wrote {args.sequences} sequences of {args.frames} frames to {out}")
    print(f"neighbor bound {dyn.neighbor_bound:.6f}, worst tightness {worst:.4f}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.stage == 2 and args.init is None:
        print("error: --stage 2 requires --init <stage1 checkpoint>", file=sys.stderr)
        return EXIT_USAGE
    dataset, _ = io.load_dataset(args.data)
    n_frames = dataset.sequences.shape[1]
    plan = _plan(args.blocks) if args.blocks else None
    if plan is None or plan.total_chunks != n_frames:
        sizes, remaining = [6], n_frames - 6
        while remaining > 0:
            sizes.append(min(8, remaining))
            remaining -= 8
        plan = BlockPlan(tuple(sizes))
    tc = TrainConfig(
        total_steps=args.steps,
        plan=plan,
        learning_rate=args.lr,
        batch_size=args.batch,
        seed=args.seed,
        stage=args.stage,
        mask_mode=args.mask,
    )
    if args.init is not None:
        init = io.load_checkpoint(args.init)
    else:
        config = DenoiserConfig(d_latent=dataset.sequences.shape[2],
                                d_cond=2 * dataset.sequences.shape[2])
        init = init_params(config, seed=args.seed)
    try:
        if args.stage == 1:
            params, history = train_stage1(tc, dataset, init)
        else:
            params, history = train_stage2_convkv(tc, dataset, init)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ABORTED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(out / "model.ckpt", params)
    with open(out / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss,t_mean\n")
        for step, loss, t_mean in history:
            fh.write(f"{step},{loss!r},{t_mean!r}\n")
    _echo_config(out, args, ["data", "stage", "steps", "seed", "batch", "lr", "mask"])
    final = history[-1][1] if history else 0.0
    print(f"stage {args.stage} done: {len(history)} steps, final loss {final:.6f}")
    return EXIT_OK if np.isfinite(final) else EXIT_ABORTED


# -- generate --------------------------------------------------------------------

def cmd_generate(args) -> int:
    params = io.load_checkpoint(args.ckpt)
    plan = _plan(args.blocks)
    sampler = SamplerConfig.uniform(args.steps)
    dyn = LatentDynamics.create(seed=args.seed,
                                latent_dim=params.config.d_latent)
    x_ref, cond = _reference_inputs(dyn, args.seed, max(plan.total_chunks, 2))
    dtype = np.float32 if args.dtype == "f32" else np.float64
    try:
        seq, report = generate_stream(
            params, x_ref, cond, plan, sampler,
            use_convkv=(args.convkv == "on"), seed=args.seed, dtype=dtype,
        )
    except GenerationAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ABORTED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_latents(out / "latents.bin", seq.values.astype(dtype))
    with open(out / "report.csv", "w", encoding="utf-8") as fh:
        fh.write("block,seconds,context_chunks,context_floats\n")
        for b in range(plan.n_blocks):
            fh.write(f"{b},{report.block_times[b]!r},{report.context_chunks[b]},"
                     f"{report.context_floats[b]}\n")
    _echo_config(out, args, ["ckpt", "blocks", "steps", "convkv", "seed", "dtype"])
    print("context chunks per block:", report.context_chunks)
    print(report.summary())
    return EXIT_OK


# -- verify ----------------------------------------------------------------------

def _verify_prop2(args) -> bool:
    ok = True
    worst = 0.0
    rng = make_rng(args.seed, STREAM_DATA)
    for alpha, sigma in ((1.0, 0.0), (0.5, 0.5), (0.0, 1.0)):
        schedule = GenericSchedule(steps=(0.5,), alphas=(alpha,), sigmas=(sigma,))
        for d in (4, 16):
            for scale in (0.1, 2.0):
                za = rng.standard_normal(d)
                zb = za + scale * rng.standard_normal(d)
                exact = expected_neighbor_distance(alpha, sigma, d, float(((zb - za) ** 2).sum()))
                est = monte_carlo_prop2((za, zb), schedule, 0.5, 100_000, args.seed)
                rel = abs(est - exact) / exact
                worst = max(worst, rel)
                ok &= rel < 0.02
    return _check("prop2", ok, f"max_rel_err={worst:.5f}")


def _verify_prop1(args) -> bool:
    ok = True
    worst = 0.0
    for i in range(20):
        dyn = LatentDynamics.create(seed=args.seed + i)
        u = generate_state_path(500, dyn.delta_u, seed=args.seed + i)
        _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=args.seed + i + 1)
        rep = check_prop1(dyn, z0, u)
        worst = max(worst, rep.tightness)
        ok &= rep.holds
    # Planted out-of-bound jump must be flagged.
    dyn = LatentDynamics.create(seed=args.seed)
    u = generate_state_path(500, dyn.delta_u, seed=args.seed)
    _, z0 = render_and_encode(dyn, u, dyn.residual_bound, seed=args.seed + 1)
    z0 = z0.copy()
    direction = np.zeros(dyn.latent_dim)
    direction[0] = 1.0
    z0[250] += direction * 2.0 * dyn.neighbor_bound
    planted = not check_prop1(dyn, z0, u).holds
    ok &= planted
    return _check("prop1", ok, f"worst_tightness={worst:.4f} planted_detected={planted}")


def _verify_mask(args) -> bool:
    ok = True
    for m in (1, 2, 3, 8):
        for n in range(m, 41, m):
            plan = BlockPlan.uniform(n // m, m)
            got = block_causal_mask(plan)
            want = np.zeros((n, n))
            for i in range(n):
                for j in range(n):
                    want[i, j] = 1.0 if j // m <= i // m else 0.0
            ok &= np.array_equal(got, want)
    return _check("mask", ok, "uniform plans m in {1,2,3,8}, n<=40")


def _verify_grad(args) -> bool:
    config = DenoiserConfig(n_layers=2, n_heads=2, d_model=8, d_latent=4, d_cond=8, d_ff=8)
    params = init_params(config, seed=args.seed)
    rng = make_rng(args.seed, STREAM_DATA)
    for name in params.values:
        params.values[name] = params.values[name] + 0.05 * rng.standard_normal(params.values[name].shape)
    plan = BlockPlan((2, 2))
    seqs = rng.standard_normal((1, 4, 4))
    conds = rng.standard_normal((1, 8))
    t = np.array([0.37])
    eps = rng.standard_normal((1, 4, 4))
    names = ["input.w", "layers.0.attn.q.0", "layers.1.ffn.w1", "output.w", "final.mod.w"]

    def loss_fn(values):
        pt = {k: Tensor(v) for k, v in values.items()}
        return neighbor_forcing_loss(pt, config, seqs, conds, t, eps, plan)

    worst = 0.0
    for name in names:
        pt = {k: Tensor(v) for k, v in params.values.items()}
        loss = neighbor_forcing_loss(pt, config, seqs, conds, t, eps, plan)
        (g,) = grad_of(loss, [pt[name]])

        def f(x, name=name):
            vals = dict(params.values)
            vals[name] = x
            return loss_fn(vals).item()

        fd = finite_difference_grad(f, params.values[name])
        denom = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(g - fd).max() / denom))
    ok = worst < 1e-4
    return _check("grad", ok, f"max_rel_err={worst:.2e}")


def _toy_generation_setup(seed: int):
    config = DenoiserConfig()
    params = init_params(config, seed=seed)
    rng = make_rng(seed, STREAM_DATA)
    for name in params.denoiser_names():
        params.values[name] = params.values[name] + 0.05 * rng.standard_normal(params.values[name].shape)
    x_ref = rng.standard_normal((2, config.d_latent))
    cond = rng.standard_normal(config.d_cond)
    return params, x_ref, cond


def _verify_cache_equivalence(args) -> bool:
    params, x_ref, cond = _toy_generation_setup(args.seed)
    plan = _plan(3)
    sampler = SamplerConfig.uniform(3)
    a, _ = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=False, seed=args.seed)
    b = generate_full_recompute(params, x_ref, cond, plan, sampler, seed=args.seed)
    diff = float(np.abs(a.values - b.values).max())
    return _check("cache-equivalence", diff <= 1e-10, f"max_abs_diff={diff:.3e}")


def _verify_memory_bound(args) -> bool:
    params, x_ref, cond = _toy_generation_setup(args.seed)
    plan = _plan(50)
    sampler = SamplerConfig.uniform(2)
    _, bounded = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=True, seed=args.seed)
    _, unbounded = generate_stream(params, x_ref, cond, plan, sampler, use_convkv=False, seed=args.seed)
    ok = all(c == 6 for c in bounded.context_chunks[2:])
    grow = unbounded.context_chunks
    ok &= all(b > a for a, b in zip(grow, grow[1:]))
    return _check("memory-bound", ok, f"bounded_tail={bounded.context_chunks[-1]} unbounded_tail={grow[-1]}")


def _verify_ledger(args) -> bool:
    config = DenoiserConfig()
    params = init_params(config, seed=args.seed)
    comp = convkv.compressor_arrays(params)
    cache = convkv.new_cache(config.n_layers, config.d_model, step_tag=0.5)
    rng = make_rng(args.seed, STREAM_DATA)
    ok = True
    total = 0
    for roll in range(100):
        n = 6 if roll == 0 else 8
        kv = [(rng.standard_normal((n, config.d_model)),
               rng.standard_normal((n, config.d_model))) for _ in range(config.n_layers)]
        convkv.cache_append(cache, kv, list(range(total, total + n)), 0.5)
        total += n
        convkv.cache_roll(cache, comp)
        acc = convkv.coverage_accounting(cache)
        ids = sorted(sum(acc.values(), []))
        ok &= ids == list(range(total))            # each chunk exactly once
        ok &= cache.pending.n_chunks < cache.lam   # pending below a window
    return _check("ledger", ok, f"rolls=100 chunks={total}")


_VERIFY_CHECKS = {
    "prop1": _verify_prop1,
    "prop2": _verify_prop2,
    "grad": _verify_grad,
    "mask": _verify_mask,
    "cache-equivalence": _verify_cache_equivalence,
    "memory-bound": _verify_memory_bound,
    "ledger": _verify_ledger,
}


def cmd_verify(args) -> int:
    names = list(_VERIFY_CHECKS) if args.check == "all" else [args.check]
    ok = all(_VERIFY_CHECKS[name](args) for name in names)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- bench -----------------------------------------------------------------------

def cmd_bench(args) -> int:
    params = io.load_checkpoint(args.ckpt)
    plan = _plan(args.blocks)
    sampler = SamplerConfig.uniform(args.steps)
    dyn = LatentDynamics.create(seed=args.seed, latent_dim=params.config.d_latent)
    x_ref, cond = _reference_inputs(dyn, args.seed, max(plan.total_chunks, 2))
    result = bench_overhead(params, x_ref, cond, plan, sampler,
                            repetitions=args.reps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", encoding="utf-8") as fh:
        fh.write("block,mode,median_seconds\n")
        for b in range(plan.n_blocks):
            fh.write(f"{b},convkv,{result['per_block_with'][b]!r}\n")
            fh.write(f"{b},no-compression-ops,{result['per_block_without'][b]!r}\n")
    print(f"compression overhead fraction: {result['overhead_fraction']:.4f}")
    print(f"bounded last-block latency:   {result['bounded_last_block']:.4f}s")
    print(f"unbounded last-block latency: {result['unbounded_last_block']:.4f}s")
    return EXIT_OK


# -- zeroshot --------------------------------------------------------------------

def cmd_zeroshot(args) -> int:
    params = io.load_checkpoint(args.ckpt)
    if params.meta.get("mask_mode") != "none":
        print("error: zero-shot experiment requires a checkpoint trained with --mask none",
              file=sys.stderr)
        return EXIT_USAGE
    plan = _plan(args.blocks)
    sampler = SamplerConfig.uniform(args.steps)
    dyn = LatentDynamics.create(seed=args.seed, latent_dim=params.config.d_latent)
    per_variant: dict[str, list[float]] = {}
    for s in range(args.seeds):
        x_ref, cond = _reference_inputs(dyn, args.seed + s, max(plan.total_chunks, 2))
        scores = zero_shot_experiment(params, x_ref, cond, plan, sampler, seed=args.seed + s)
        for k, v in scores.items():
            per_variant.setdefault(k, []).append(v)
    print("variant,median_discontinuity")
    for k, vals in per_variant.items():
        print(f"{k},{np.median(vals):.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfar",
        description="Step-consistent block-autoregressive latent generation with bounded KV memory.",
    )
    parser.add_argument("--config", help="key = value config file; flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="generate a synthetic latent dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=22)
    p.add_argument("--delta-u", dest="delta_u", type=float, default=0.1)
    p.add_argument("--residual-bound", dest="residual_bound", type=float, default=0.01)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="train stage 1 (denoiser) or stage 2 (compressor)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--blocks", type=int, default=0, help="0 = infer plan from frames")
    p.add_argument("--mask", choices=("causal", "none"), default="causal")
    p.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="stream blocks from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--convkv", choices=("on", "off"), default="on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="run invariant checks")
    p.add_argument("check", choices=tuple(_VERIFY_CHECKS) + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="compression-overhead benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=50)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("zeroshot", help="zero-shot chaining of a bidirectional model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_zeroshot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, remaining = parser.parse_known_args(argv)
    if remaining:
        parser.error(f"unrecognized arguments: {' '.join(remaining)}")
    if args.config:
        # Config file sets defaults for the chosen subcommand; explicit flags win.
        sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        actions = {
            a.dest: a
            for a in sub_action.choices[args.command]._actions
            if a.option_strings and a.dest != "help"
        }
        defaults = {dest: str(a.default) for dest, a in actions.items()}
        resolved = io.parse_config_text(Path(args.config).read_text(encoding="utf-8"), defaults)
        argv_list = set(sys.argv[1:] if argv is None else argv)
        for key, value in resolved.items():
            action = actions[key]
            if set(action.option_strings) & argv_list or value == str(action.default):
                continue
            setattr(args, key, (action.type or str)(value))
    try:
        return args.func(args)
    except (io.FormatError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationAborted, TrainingDiverged, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
