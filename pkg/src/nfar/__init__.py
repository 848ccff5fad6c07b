"""Step-consistent block-autoregressive latent generation with bounded KV memory."""

from .blocks import BlockPlan
from .model import DenoiserConfig, DenoiserParams, init_params
from .schedule import FlowSchedule, SamplerConfig
from .streaming import generate_full_recompute, generate_stream
from .synthdata import LatentDynamics, make_dataset

__all__ = [
    "BlockPlan",
    "DenoiserConfig",
    "DenoiserParams",
    "FlowSchedule",
    "LatentDynamics",
    "SamplerConfig",
    "generate_full_recompute",
    "generate_stream",
    "init_params",
    "make_dataset",
]
