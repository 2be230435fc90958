"""Confidence-based safety filters for model-based reinforcement learning."""
__version__ = "0.1.0"
__all__ = [
    "autoconf",
    "backups",
    "certificates",
    "core",
    "envs",
    "filters",
    "io",
    "models",
    "objectives",
    "planners",
    "simulation",
    "values",
]

from confsafe import (
    autoconf,
    backups,
    certificates,
    core,
    envs,
    filters,
    io,
    models,
    objectives,
    planners,
    simulation,
    values,
)
