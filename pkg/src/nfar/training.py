"""Two-stage optimization: step-aligned AR training, then compressor training.

Stage 1 trains the denoiser with every chunk of a sequence noised at one
shared diffusion step (the step-aligned regime). Stage 2 freezes the
denoiser (by default) and trains the KV compressor under an attention
mask where late blocks see compressed-memory tokens instead of the raw
chunks those tokens summarize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockPlan
from .model import (
    DenoiserParams,
    InlineMemorySpec,
    block_causal_mask,
    denoiser_forward,
    expand_mask_with_ref,
    wrap_params,
)
from .numerics import ShapeError, Tensor, grad_of, mean_all, mul, slice2d, sub
from .rng import STREAM_TRAIN, make_rng
from .synthdata import Dataset


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: DenoiserParams, history: list):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class CompressSpec:
    """Which raw-chunk spans are summarized and who must use the summaries."""

    spans: tuple[tuple[int, int], ...]
    query_blocks: tuple[int, ...]
    ratio: int = 5

    def __post_init__(self):
        spans = sorted(self.spans)
        for (s, e) in spans:
            if e - s < self.ratio:
                raise ValueError(f"span {(s, e)} shorter than one window of {self.ratio}")
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError(f"overlapping compression spans {self.spans}")

    def n_mem_of(self, span: tuple[int, int]) -> int:
        return (span[1] - span[0]) // self.ratio

    @property
    def n_mem(self) -> int:
        return sum(self.n_mem_of(sp) for sp in self.spans)

    def mem_positions(self) -> list[float]:
        out = []
        for s, e in self.spans:
            out.extend(float(s + w * self.ratio) for w in range(self.n_mem_of((s, e))))
        return out


def default_compress_spec(plan: BlockPlan, ratio: int = 5, short_term: int = 2) -> CompressSpec | None:
    """Summarize everything older than the last block's short-term window.

    The span is floored to whole windows; the (< ratio) remainder stays a
    raw, attendable chunk, mirroring the inference-side pending buffer.
    """
    last = plan.n_blocks - 1
    start_last = plan.starts[last]
    span_end = ((start_last - short_term) // ratio) * ratio
    if span_end < ratio:
        return None
    return CompressSpec(spans=((0, span_end),), query_blocks=(last,), ratio=ratio)


def build_stage2_mask(plan: BlockPlan, spec: CompressSpec) -> np.ndarray:
    """Chunk-level mask with memory tokens appended on the key axis.

    Queries in the designated blocks lose the raw chunks of every span and
    gain the span's memory columns; everyone else keeps plain block-causal
    attention and never sees memory.
    """
    base = block_causal_mask(plan)
    F = base.shape[0]
    mask = np.concatenate([base, np.zeros((F, spec.n_mem))], axis=1)
    blk = plan.block_of()
    late = np.isin(blk, spec.query_blocks)
    for b in spec.query_blocks:
        if plan.starts[b] < max(e for _, e in spec.spans):
            raise ValueError(f"query block {b} starts before a compressed span ends")
    col = F
    for s, e in spec.spans:
        n_m = spec.n_mem_of((s, e))
        mask[late, s:e] = 0.0
        mask[late, col:col + n_m] = 1.0
        col += n_m
    return mask


def _inline_memory(spec: CompressSpec, n_ref: int) -> InlineMemorySpec:
    token_spans = tuple((s + n_ref, s + n_ref + spec.n_mem_of((s, e)) * spec.ratio) for s, e in spec.spans)
    return InlineMemorySpec(spans=token_spans, mem_positions=tuple(spec.mem_positions()), ratio=spec.ratio)


def neighbor_forcing_loss(
    ptensors: dict[str, Tensor],
    config,
    sequences: np.ndarray,
    conds: np.ndarray,
    t_shared: np.ndarray,
    eps: np.ndarray,
    plan: BlockPlan,
    compress_spec: CompressSpec | None = None,
    mask_mode: str = "causal",
    block_choice: np.ndarray | None = None,
) -> Tensor:
    """Mean squared velocity error with one shared step per batch element.

    With ``mask_mode="none"`` each element trains a single block (picked by
    ``block_choice``) under full bidirectional attention — the non-AR
    backbone used by the zero-shot experiment.
    """
    if sequences.shape[0] != t_shared.shape[0] or sequences.shape != eps.shape:
        raise ShapeError(
            f"batch shapes disagree: sequences {sequences.shape}, eps {eps.shape}, t {t_shared.shape}"
        )
    if sequences.shape[1] != plan.total_chunks:
        raise ShapeError(f"sequence length {sequences.shape[1]} != plan chunks {plan.total_chunks}")
    n_ref = config.n_ref_chunks
    batch = sequences.shape[0]
    memory = _inline_memory(compress_spec, n_ref) if compress_spec is not None else None
    if compress_spec is not None:
        chunk_mask = build_stage2_mask(plan, compress_spec)
    elif mask_mode == "causal":
        chunk_mask = block_causal_mask(plan)
    loss = None
    for i in range(batch):
        x0 = sequences[i]
        t = float(t_shared[i])  # one step for every chunk of this element
        x_t = (1.0 - t) * x0 + t * eps[i]
        target = eps[i] - x0
        if mask_mode == "none":
            b = int(block_choice[i])
            s, e = plan.chunk_range(b)
            tokens = np.concatenate([x0[:n_ref], x_t[s:e]])
            positions = np.concatenate([np.arange(-n_ref, 0), np.arange(s, e)])
            mask = np.ones((tokens.shape[0], tokens.shape[0]))
            tgt = target[s:e]
        else:
            tokens = np.concatenate([x0[:n_ref], x_t])
            positions = np.concatenate([np.arange(-n_ref, 0), np.arange(plan.total_chunks)])
            mask = expand_mask_with_ref(chunk_mask, n_ref)
            tgt = target
        vel, _ = denoiser_forward(
            ptensors, config, tokens, positions, t, conds[i], mask, memory=memory
        )
        vel_chunks = slice2d(vel, rows=slice(n_ref, None))
        diff = sub(vel_chunks, Tensor(tgt))
        term = mean_all(mul(diff, diff))
        loss = term if loss is None else loss + term
    return mul(loss, 1.0 / batch)


@dataclass
class TrainConfig:
    total_steps: int
    plan: BlockPlan
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    t_range: tuple[float, float] = (0.02, 0.98)
    stage: int = 1
    log_every: int = 10
    freeze_denoiser: bool = True      # stage 2 only
    mask_mode: str = "causal"         # "causal" or "none" (non-AR backbone)
    compress_ratio: int = 5
    lr_schedule: str = "constant"     # "constant" or "cosine" (decay to 0)

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.mask_mode not in ("causal", "none"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class Adam:
    def __init__(self, names: list[str], lr: float, betas: tuple[float, float], eps: float):
        self.names = names
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in self.names:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(values[name])
                self.m[name] = m
                self.v[name] = np.zeros_like(values[name])
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            values[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _stratified_t(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    # One draw per stratum keeps the per-step gradient spread across steps.
    u = rng.random(n)
    return lo + (hi - lo) * (np.arange(n) + u) / n


def _run_training(
    config: TrainConfig,
    dataset: Dataset,
    params: DenoiserParams,
    trainable: list[str],
    compress_spec: CompressSpec | None,
) -> tuple[DenoiserParams, list[tuple[int, float, float]]]:
    params = params.copy()
    rng = make_rng(config.seed, STREAM_TRAIN)
    opt = Adam(trainable, config.learning_rate, config.betas, config.adam_eps)
    n_seq, F, d = dataset.sequences.shape
    history: list[tuple[int, float, float]] = []
    last_good = params.copy()
    for step in range(config.total_steps):
        idx = rng.integers(0, n_seq, size=config.batch_size)
        t_shared = _stratified_t(rng, config.batch_size, *config.t_range)
        eps = rng.standard_normal((config.batch_size, F, d))
        block_choice = None
        if config.mask_mode == "none":
            block_choice = rng.integers(0, config.plan.n_blocks, size=config.batch_size)
        ptensors = wrap_params(params)
        loss = neighbor_forcing_loss(
            ptensors,
            params.config,
            dataset.sequences[idx],
            dataset.conditions[idx],
            t_shared,
            eps,
            config.plan,
            compress_spec=compress_spec,
            mask_mode=config.mask_mode,
            block_choice=block_choice,
        )
        loss_val = loss.item()
        history.append((step, loss_val, float(t_shared.mean())))
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, last_good, history)
        grads = grad_of(loss, [ptensors[n] for n in trainable])
        if config.lr_schedule == "cosine":
            opt.lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / config.total_steps))
        opt.step(params.values, dict(zip(trainable, grads)))
        if step % 200 == 0:
            last_good = params.copy()
    return params, history


def train_stage1(
    config: TrainConfig, dataset: Dataset, init: DenoiserParams
) -> tuple[DenoiserParams, list[tuple[int, float, float]]]:
    """Stage-1 step-aligned AR training of the denoiser weights."""
    params, history = _run_training(config, dataset, init, init.denoiser_names(), None)
    params.meta["stage"] = "1"
    params.meta["mask_mode"] = config.mask_mode
    return params, history


def train_stage2_convkv(
    config: TrainConfig, dataset: Dataset, stage1: DenoiserParams
) -> tuple[DenoiserParams, list[tuple[int, float, float]]]:
    """Stage-2 compressor training under the memory-extended mask."""
    spec = default_compress_spec(config.plan, ratio=config.compress_ratio)
    if spec is None:
        raise ValueError("block plan too short for any compression span")
    trainable = stage1.compressor_names()
    if not config.freeze_denoiser:
        trainable = trainable + stage1.denoiser_names()
    params, history = _run_training(config, dataset, stage1, trainable, spec)
    params.meta["stage"] = "2"
    params.meta.setdefault("mask_mode", "causal")
    return params, history


def evaluate_loss(
    params: DenoiserParams,
    dataset: Dataset,
    plan: BlockPlan,
    seed: int,
    t_values: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9),
    compress_spec: CompressSpec | None = None,
) -> float:
    """Deterministic held-out loss averaged over a fixed step grid."""
    rng = make_rng(seed, STREAM_TRAIN)
    ptensors = wrap_params(params)
    n_seq, F, d = dataset.sequences.shape
    total = 0.0
    for t in t_values:
        eps = rng.standard_normal((n_seq, F, d))
        loss = neighbor_forcing_loss(
            ptensors,
            params.config,
            dataset.sequences,
            dataset.conditions,
            np.full(n_seq, t),
            eps,
            plan,
            compress_spec=compress_spec,
        )
        total += loss.item()
    return total / len(t_values)


def smoothed(series: list[float], window: int = 50) -> list[float]:
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(series[lo:i + 1])))
    return out
