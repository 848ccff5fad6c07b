"""File formats: latent binaries, checkpoints, configs, dataset directories.

All formats are little-endian and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import DenoiserConfig, DenoiserParams
from .synthdata import Dataset, LatentDynamics, condition_vector

LATENT_MAGIC = b"NFLAT\x00\x01\x00"
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class FormatError(ValueError):
    """A file does not parse as the format its reader expects."""


def write_latents(path, values: np.ndarray) -> None:
    """Binary 2-D float array: magic, u32 F, u32 d, u8 dtype code, payload."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"latent files hold 2-D arrays, got shape {values.shape}")
    if values.dtype == np.float64:
        code, payload = 0, values.astype("<f8")
    elif values.dtype == np.float32:
        code, payload = 1, values.astype("<f4")
    else:
        raise ValueError(f"unsupported dtype {values.dtype}")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<IIB3x", values.shape[0], values.shape[1], code))
        fh.write(payload.tobytes())


def read_latents(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != LATENT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        F, d, code = struct.unpack("<IIB3x", fh.read(12))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dt = _DTYPE_CODES[code]
        payload = fh.read(F * d * dt.itemsize)
        if len(payload) != F * d * dt.itemsize or fh.read(1):
            raise FormatError(f"{path}: payload size does not match header ({F}x{d})")
    return np.frombuffer(payload, dtype=dt).reshape(F, d).astype(dt.base)


# -- checkpoints --------------------------------------------------------------

_CONFIG_FIELDS = (
    "n_layers", "n_heads", "d_model", "d_latent", "d_cond", "d_ff",
    "rope_base", "n_ref_chunks", "compress_ratio", "rope_on_values",
)


def save_checkpoint(path, params: DenoiserParams) -> None:
    """Text manifest (config, meta, tensor table) + concatenated payloads."""
    lines = ["checkpoint v1"]
    for f in _CONFIG_FIELDS:
        lines.append(f"config.{f} = {getattr(params.config, f)}")
    for k in sorted(params.meta):
        lines.append(f"meta.{k} = {params.meta[k]}")
    offset = 0
    payloads = []
    for name in sorted(params.values):
        arr = params.values[name]
        le = arr.astype(arr.dtype.newbyteorder("<"))
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {offset} {shape}")
        payloads.append(le.tobytes())
        offset += len(payloads[-1])
    lines.append("payload")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in payloads:
            fh.write(p)


def _parse_config_value(field: str, raw: str):
    if field == "rope_on_values":
        return raw == "True"
    if field == "rope_base":
        return float(raw)
    return int(raw)


def load_checkpoint(path) -> DenoiserParams:
    blob = Path(path).read_bytes()
    marker = b"\npayload\n"
    split = blob.find(marker)
    if not blob.startswith(b"checkpoint v1\n") or split < 0:
        raise FormatError(f"{path}: not a checkpoint file")
    text = blob[:split + 1].decode("utf-8").splitlines()
    payload = blob[split + len(marker):]
    cfg_kwargs, meta, tensors = {}, {}, []
    for line in text[1:]:
        if line.startswith("config."):
            key, _, raw = line.partition(" = ")
            field = key[len("config."):]
            cfg_kwargs[field] = _parse_config_value(field, raw)
        elif line.startswith("meta."):
            key, _, raw = line.partition(" = ")
            meta[key[len("meta."):]] = raw
        elif line.startswith("tensor "):
            _, name, dtype, offset, shape = line.split(" ")
            tensors.append((name, np.dtype(dtype), int(offset),
                            tuple(int(s) for s in shape.split(",")) if shape else ()))
        else:
            raise FormatError(f"{path}: unrecognized manifest line {line!r}")
    config = DenoiserConfig(**cfg_kwargs)
    values = {}
    for name, dt, offset, shape in tensors:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = payload[offset:offset + n * dt.itemsize]
        if len(raw) != n * dt.itemsize:
            raise FormatError(f"{path}: tensor {name} payload truncated")
        values[name] = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
    return DenoiserParams(config=config, values=values, meta=meta)


# -- key = value configs -------------------------------------------------------

def parse_config_text(text: str, defaults: dict[str, str]) -> dict[str, str]:
    """Line-oriented `key = value`; unknown keys rejected; defaults filled in."""
    out = dict(defaults)
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise FormatError(f"line {ln}: expected `key = value`, got {line!r}")
        key = key.strip()
        if key not in defaults:
            raise FormatError(f"line {ln}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def dump_config_text(config: dict[str, str]) -> str:
    return "".join(f"{k} = {config[k]}\n" for k in sorted(config))


# -- dataset directories -------------------------------------------------------

def save_dataset(directory, dataset: Dataset, seed: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dyn = dataset.dynamics
    manifest = {
        "n_sequences": str(dataset.sequences.shape[0]),
        "n_frames": str(dataset.sequences.shape[1]),
        "latent_dim": str(dataset.sequences.shape[2]),
        "seed": str(seed),
        "delta_u": repr(dyn.delta_u),
        "residual_bound": repr(dyn.residual_bound),
        "lipschitz_render": repr(dyn.lipschitz_render),
        "lipschitz_encoder": repr(dyn.lipschitz_encoder),
        "neighbor_bound": repr(dyn.neighbor_bound),
    }
    (d / "manifest.txt").write_text(dump_config_text(manifest), encoding="utf-8")
    write_latents(d / "render_weight.bin", dyn.render_weight)
    write_latents(d / "encoder.bin", dyn.encoder)
    for i in range(dataset.sequences.shape[0]):
        write_latents(d / f"seq_{i:05d}.bin", dataset.sequences[i])


_MANIFEST_KEYS = {
    "n_sequences": "", "n_frames": "", "latent_dim": "", "seed": "",
    "delta_u": "", "residual_bound": "", "lipschitz_render": "",
    "lipschitz_encoder": "", "neighbor_bound": "",
}


def load_dataset(directory) -> tuple[Dataset, dict[str, str]]:
    d = Path(directory)
    manifest = parse_config_text((d / "manifest.txt").read_text(encoding="utf-8"), _MANIFEST_KEYS)
    dyn = LatentDynamics(
        render_weight=read_latents(d / "render_weight.bin"),
        encoder=read_latents(d / "encoder.bin"),
        delta_u=float(manifest["delta_u"]),
        residual_bound=float(manifest["residual_bound"]),
    )
    for key, stored in (("lipschitz_render", dyn.lipschitz_render),
                        ("lipschitz_encoder", dyn.lipschitz_encoder)):
        if abs(float(manifest[key]) - stored) > 1e-9:
            raise FormatError(f"{directory}: manifest {key} disagrees with stored maps")
    n = int(manifest["n_sequences"])
    seqs = np.stack([read_latents(d / f"seq_{i:05d}.bin") for i in range(n)]) if n else \
        np.zeros((0, int(manifest["n_frames"]), int(manifest["latent_dim"])))
    conds = np.stack([condition_vector(z) for z in seqs]) if n else \
        np.zeros((0, 2 * int(manifest["latent_dim"])))
    return Dataset(sequences=seqs, conditions=conds, dynamics=dyn), manifest
