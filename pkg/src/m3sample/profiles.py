"""Named hyperparameter profiles for surface and volume clouds."""
from __future__ import annotations

from dataclasses import fields

from .partition import PartitionConfig
from .stratify import StratifyConfig

PROFILES: dict[str, dict] = {
    "surface": {"eps_refine": 0.05, "g_max": 8, "kappa": 32, "scalar_weights": 1.0,
                "vector_weights": 0.4, "K": 64, "rho": 1.0},
    "volume": {"eps_refine": 0.005, "g_max": 13, "kappa": 32, "scalar_weights": 1.0,
               "vector_weights": 0.4, "K": 64, "rho": 1.0},
}

_PARTITION_KEYS = {f.name for f in fields(PartitionConfig)} - {"directions"}
_STRATIFY_KEYS = {f.name for f in fields(StratifyConfig)}


def resolve(profile: str = "volume", overrides: dict | None = None) -> dict:
    """Profile values with ``overrides`` applied; unknown keys are kept as-is."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    out = dict(PROFILES[profile])
    out.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return out


def partition_config(resolved: dict) -> PartitionConfig:
    return PartitionConfig(**{k: resolved[k] for k in _PARTITION_KEYS if k in resolved})


def stratify_config(resolved: dict) -> StratifyConfig:
    return StratifyConfig(**{k: resolved[k] for k in _STRATIFY_KEYS if k in resolved})
