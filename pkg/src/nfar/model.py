"""Toy DiT-style velocity denoiser with block-causal attention.

One token per latent chunk. Rotary positions are assigned per chunk
index; the two reference chunks sit at positions -2 and -1, before
chunk 0. Step conditioning is adaLN-style: every modulation/gate head
reads a raw time-feature vector (which includes 1/t alongside the
sinusoids), so step-dependent rescalings of the velocity field are
inside the linear span of the heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockPlan
from .numerics import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d_strided,
    layer_norm,
    matmul,
    mul,
    slice2d,
    softmax_rows,
    tanh,
    transpose2d,
)
from .rng import STREAM_INIT, make_rng

T_FLOOR = 0.02  # clamp for the reciprocal time feature


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_latent: int = 16
    d_cond: int = 32
    d_ff: int = 128
    rope_base: float = 10000.0
    n_ref_chunks: int = 2
    compress_ratio: int = 5
    rope_on_values: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError(f"head_dim {self.d_model // self.n_heads} must be even for RoPE")
        if self.compress_ratio < 1:
            raise ValueError("compress_ratio must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class RopeFrequencies:
    """Per-dimension-pair angular frequencies; rotation at position 0 is identity."""

    freqs: np.ndarray  # (head_dim // 2,)

    @classmethod
    def create(cls, head_dim: int, base: float) -> "RopeFrequencies":
        if head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even, got {head_dim}")
        if base <= 0:
            raise ValueError("rope base must be positive")
        half = head_dim // 2
        return cls(base ** (-2.0 * np.arange(half) / head_dim))


def rope_apply(x, positions, freqs: RopeFrequencies) -> Tensor:
    """Rotate dimension pairs of (n, head_dim) rows by position * frequency."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != 2 * freqs.freqs.size:
        raise ShapeError(f"rope input shape {x.shape} incompatible with {freqs.freqs.size} pairs")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"positions shape {pos.shape} != ({x.shape[0]},)")
    angles = pos[:, None] * freqs.freqs[None, :]
    c = np.cos(angles).astype(x.dtype)
    s = np.sin(angles).astype(x.dtype)
    half = freqs.freqs.size
    x1, x2 = x.data[:, :half], x.data[:, half:]
    out = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=1)

    def vjp(g):
        g1, g2 = g[:, :half], g[:, half:]
        return (np.concatenate([g1 * c + g2 * s, -g1 * s + g2 * c], axis=1),)

    return Tensor(out, (x,), vjp)


def time_embed(t: float, d: int) -> np.ndarray:
    """Deterministic step embedding: [1, t, 1/max(t, floor), sin/cos bank]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if d < 4:
        raise ValueError("embedding dim must be >= 4")
    feats = np.zeros(d)
    feats[0] = 1.0
    feats[1] = t
    feats[2] = 1.0 / max(t, T_FLOOR)
    n_pairs = (d - 3) // 2
    if n_pairs > 0:
        j = np.arange(n_pairs)
        omega = 2.0 * math.pi * (200.0 ** (j / max(n_pairs - 1, 1)))
        feats[3:3 + n_pairs] = np.sin(omega * t)
        feats[3 + n_pairs:3 + 2 * n_pairs] = np.cos(omega * t)
    return feats


def block_causal_mask(plan: BlockPlan) -> np.ndarray:
    """Chunk-level mask: entry (i, j) = 1 iff block(j) <= block(i)."""
    blk = plan.block_of()
    if blk.size == 0:
        raise ValueError("empty block plan")
    return (blk[None, :] <= blk[:, None]).astype(np.float64)


def expand_mask_with_ref(mask: np.ndarray, n_ref: int) -> np.ndarray:
    """Prepend reference rows/cols: refs attend to refs; all chunks see refs."""
    n = mask.shape[0]
    out = np.zeros((n_ref + n, n_ref + mask.shape[1]))
    out[:n_ref, :n_ref] = 1.0
    out[n_ref:, :n_ref] = 1.0
    out[n_ref:, n_ref:] = mask
    return out


# -- parameters -------------------------------------------------------------

@dataclass
class DenoiserParams:
    """Flat name -> array store for all learnable weights (compressor included)."""

    config: DenoiserConfig
    values: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.values.items()}, dict(self.meta))

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            self.config, {k: v.astype(dtype) for k, v in self.values.items()}, dict(self.meta)
        )

    def equal(self, other: "DenoiserParams") -> bool:
        return set(self.values) == set(other.values) and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.values
        )

    def denoiser_names(self) -> list[str]:
        return [k for k in self.values if not k.startswith("compressor.")]

    def compressor_names(self) -> list[str]:
        return [k for k in self.values if k.startswith("compressor.")]


def averaging_compressor(config: DenoiserConfig) -> dict[str, np.ndarray]:
    """Window-averaging init: each output channel averages its own channel."""
    lam, c = config.compress_ratio, config.d_model
    w = np.zeros((lam, c, c))
    for k in range(lam):
        w[k] += np.eye(c) / lam
    out = {}
    for layer in range(config.n_layers):
        for kind in ("key", "val"):
            out[f"compressor.{layer}.{kind}.w"] = w.copy()
            out[f"compressor.{layer}.{kind}.b"] = np.zeros(c)
    return out


def init_params(config: DenoiserConfig, seed: int, meta: dict[str, str] | None = None) -> DenoiserParams:
    rng = make_rng(seed, STREAM_INIT)
    dm, hd, dc, dff, dl = config.d_model, config.head_dim, config.d_cond, config.d_ff, config.d_latent

    def gauss(shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    v: dict[str, np.ndarray] = {
        "input.w": gauss((dl, dm), dl),
        "input.b": np.zeros(dm),
        "final.mod.w": np.zeros((dm, 2 * dm)),
        "final.mod.b": np.zeros(2 * dm),
        "output.w": np.zeros((dm, dl)),  # zero-init head: untrained model predicts zero velocity
        "output.b": np.zeros(dl),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}"
        v[f"{p}.ln1.g"] = np.ones(dm)
        v[f"{p}.ln1.b"] = np.zeros(dm)
        v[f"{p}.mod1.w"] = np.zeros((dm, 2 * dm))
        v[f"{p}.mod1.b"] = np.zeros(2 * dm)
        for h in range(config.n_heads):
            v[f"{p}.attn.q.{h}"] = gauss((dm, hd), dm)
            v[f"{p}.attn.k.{h}"] = gauss((dm, hd), dm)
            v[f"{p}.attn.v.{h}"] = gauss((dm, hd), dm)
        v[f"{p}.attn.o.w"] = gauss((dm, dm), dm)
        v[f"{p}.attn.o.b"] = np.zeros(dm)
        v[f"{p}.gate1.w"] = np.zeros((dm, dm))
        v[f"{p}.gate1.b"] = np.zeros(dm)
        v[f"{p}.ln2.g"] = np.ones(dm)
        v[f"{p}.ln2.b"] = np.zeros(dm)
        v[f"{p}.cross.q"] = gauss((dm, dm), dm)
        v[f"{p}.cross.k"] = gauss((dc, dm), dc)
        v[f"{p}.cross.v"] = gauss((dc, dm), dc)
        v[f"{p}.cross.o.w"] = gauss((dm, dm), dm)
        v[f"{p}.cross.o.b"] = np.zeros(dm)
        v[f"{p}.gate2.w"] = np.zeros((dm, dm))
        v[f"{p}.gate2.b"] = np.zeros(dm)
        v[f"{p}.ln3.g"] = np.ones(dm)
        v[f"{p}.ln3.b"] = np.zeros(dm)
        v[f"{p}.mod3.w"] = np.zeros((dm, 2 * dm))
        v[f"{p}.mod3.b"] = np.zeros(2 * dm)
        v[f"{p}.ffn.w1"] = gauss((dm, dff), dm)
        v[f"{p}.ffn.b1"] = np.zeros(dff)
        v[f"{p}.ffn.w2"] = gauss((dff, dm), dff)
        v[f"{p}.ffn.b2"] = np.zeros(dm)
        v[f"{p}.gate3.w"] = np.zeros((dm, dm))
        v[f"{p}.gate3.b"] = np.zeros(dm)
    v.update(averaging_compressor(config))
    return DenoiserParams(config, v, dict(meta or {}))


def wrap_params(params: DenoiserParams) -> dict[str, Tensor]:
    """Leaf tensors for one loss evaluation."""
    return {k: Tensor(a) for k, a in params.values.items()}


# -- forward ----------------------------------------------------------------

@dataclass
class ContextKV:
    """Per-layer key/value context consumed by an incremental forward pass.

    Keys/values are stored un-rotated; rotation by the stored positions
    happens at consumption time (this realizes the RoPE reset exactly).
    """

    layers: list[tuple[np.ndarray, np.ndarray]]  # per layer (K, V), (n_ctx, d_model)
    positions: np.ndarray                        # (n_ctx,)
    step_tag: float | None = None

    @property
    def n_tokens(self) -> int:
        return self.layers[0][0].shape[0] if self.layers else 0


@dataclass(frozen=True)
class InlineMemorySpec:
    """Training-time compressed-memory layout (stage 2).

    Each span [s, e) of token rows is convolved down by `ratio`; the
    resulting memory tokens are appended after all raw tokens on the key
    axis, carrying the span's window start positions.
    """

    spans: tuple[tuple[int, int], ...]
    mem_positions: tuple[float, ...]
    ratio: int

    @property
    def n_mem(self) -> int:
        return sum((e - s) // self.ratio for s, e in self.spans)


class StepTagError(ValueError):
    """Cached context was produced at a different diffusion step."""


def denoiser_forward(
    ptensors: dict[str, Tensor],
    config: DenoiserConfig,
    x_tokens,
    positions,
    t: float,
    cond,
    mask: np.ndarray,
    ctx: ContextKV | None = None,
    memory: InlineMemorySpec | None = None,
) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
    """Predict per-token velocity; also return the new tokens' per-layer K/V.

    `mask` must cover (n_tokens, n_keys) where the key axis is
    [ctx || tokens] when a context is supplied, [tokens || memory] when an
    inline memory spec is supplied, and [tokens] otherwise.
    """
    if ctx is not None and memory is not None:
        raise ValueError("cached context and inline memory cannot be combined")
    dtype = ptensors["input.w"].dtype
    if isinstance(x_tokens, Tensor):
        x = x_tokens
    else:
        x = as_tensor(np.asarray(x_tokens).astype(dtype, copy=False))
    n = x.shape[0]
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (n,):
        raise ShapeError(f"positions shape {pos.shape} != ({n},)")
    if ctx is not None:
        if ctx.step_tag is not None and ctx.step_tag != t:
            raise StepTagError(f"cache step tag {ctx.step_tag} != forward step {t}")
        n_keys = ctx.n_tokens + n
        key_pos = np.concatenate([ctx.positions, pos])
    elif memory is not None:
        n_keys = n + memory.n_mem
        key_pos = np.concatenate([pos, np.asarray(memory.mem_positions, dtype=np.float64)])
    else:
        n_keys = n
        key_pos = pos
    if mask.shape != (n, n_keys):
        raise ShapeError(f"mask shape {mask.shape} != ({n}, {n_keys})")

    freqs = RopeFrequencies.create(config.head_dim, config.rope_base)
    phi = Tensor(time_embed(t, config.d_model).reshape(1, -1).astype(dtype))
    cond_t = as_tensor(np.asarray(cond).astype(dtype, copy=False).reshape(1, -1))
    if cond_t.shape[1] != config.d_cond:
        raise ShapeError(f"cond dim {cond_t.shape[1]} != {config.d_cond}")
    inv_hd = 1.0 / math.sqrt(config.head_dim)
    one = Tensor(np.ones((1, config.d_model), dtype=dtype))
    dm = config.d_model

    def modulate(u: Tensor, name: str) -> Tensor:
        m = add(matmul(phi, ptensors[f"{name}.w"]), ptensors[f"{name}.b"])
        gamma = slice2d(m, cols=slice(0, dm))
        beta = slice2d(m, cols=slice(dm, 2 * dm))
        return add(mul(u, add(one, gamma)), beta)

    def gate(name: str) -> Tensor:
        return add(matmul(phi, ptensors[f"{name}.w"]), ptensors[f"{name}.b"])

    h = add(matmul(x, ptensors["input.w"]), ptensors["input.b"])
    new_kv: list[tuple[np.ndarray, np.ndarray]] = []

    for l in range(config.n_layers):
        p = f"layers.{l}"
        u = modulate(layer_norm(h, ptensors[f"{p}.ln1.g"], ptensors[f"{p}.ln1.b"]), f"{p}.mod1")
        k_heads = [matmul(u, ptensors[f"{p}.attn.k.{i}"]) for i in range(config.n_heads)]
        v_heads = [matmul(u, ptensors[f"{p}.attn.v.{i}"]) for i in range(config.n_heads)]
        k_cat = concat(k_heads, axis=1)
        v_cat = concat(v_heads, axis=1)
        new_kv.append((k_cat.data.copy(), v_cat.data.copy()))

        if ctx is not None:
            K_all = concat([as_tensor(ctx.layers[l][0].astype(dtype, copy=False)), k_cat])
            V_all = concat([as_tensor(ctx.layers[l][1].astype(dtype, copy=False)), v_cat])
        elif memory is not None:
            mem_ks, mem_vs = [], []
            lam = memory.ratio
            for s, e in memory.spans:
                span_k = slice2d(k_cat, rows=slice(s, e))
                span_v = slice2d(v_cat, rows=slice(s, e))
                mem_ks.append(conv1d_strided(
                    span_k, ptensors[f"compressor.{l}.key.w"], ptensors[f"compressor.{l}.key.b"], lam, lam))
                mem_vs.append(conv1d_strided(
                    span_v, ptensors[f"compressor.{l}.val.w"], ptensors[f"compressor.{l}.val.b"], lam, lam))
            K_all = concat([k_cat] + mem_ks)
            V_all = concat([v_cat] + mem_vs)
        else:
            K_all, V_all = k_cat, v_cat

        outs = []
        for i in range(config.n_heads):
            colsl = slice(i * config.head_dim, (i + 1) * config.head_dim)
            q = rope_apply(matmul(u, ptensors[f"{p}.attn.q.{i}"]), pos, freqs)
            k = rope_apply(slice2d(K_all, cols=colsl), key_pos, freqs)
            v = slice2d(V_all, cols=colsl)
            if config.rope_on_values:
                v = rope_apply(v, key_pos, freqs)
            scores = mul(matmul(q, transpose2d(k)), inv_hd)
            outs.append(matmul(softmax_rows(scores, mask), v))
        attn = add(matmul(concat(outs, axis=1), ptensors[f"{p}.attn.o.w"]), ptensors[f"{p}.attn.o.b"])
        h = add(h, mul(attn, gate(f"{p}.gate1")))

        u2 = layer_norm(h, ptensors[f"{p}.ln2.g"], ptensors[f"{p}.ln2.b"])
        cq = matmul(u2, ptensors[f"{p}.cross.q"])
        ck = matmul(cond_t, ptensors[f"{p}.cross.k"])
        cv = matmul(cond_t, ptensors[f"{p}.cross.v"])
        cscores = mul(matmul(cq, transpose2d(ck)), 1.0 / math.sqrt(config.d_model))
        cp = softmax_rows(cscores, np.ones((n, 1)))
        cross = add(matmul(matmul(cp, cv), ptensors[f"{p}.cross.o.w"]), ptensors[f"{p}.cross.o.b"])
        h = add(h, mul(cross, gate(f"{p}.gate2")))

        u3 = modulate(layer_norm(h, ptensors[f"{p}.ln3.g"], ptensors[f"{p}.ln3.b"]), f"{p}.mod3")
        f1 = tanh(add(matmul(u3, ptensors[f"{p}.ffn.w1"]), ptensors[f"{p}.ffn.b1"]))
        f2 = add(matmul(f1, ptensors[f"{p}.ffn.w2"]), ptensors[f"{p}.ffn.b2"])
        h = add(h, mul(f2, gate(f"{p}.gate3")))

    out = modulate(h, "final.mod")
    vel = add(matmul(out, ptensors["output.w"]), ptensors["output.b"])
    if not np.isfinite(vel.data).all():
        raise FloatingPointError("denoiser produced non-finite velocities")
    return vel, new_kv
