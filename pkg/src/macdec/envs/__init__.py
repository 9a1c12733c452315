"""Simulated domains: Box Pushing (``bp10``, ``bp30``) and Warehouse Tool Delivery (``wtd``)."""

from __future__ import annotations

from .boxpushing import BoxPushing, BPConfig
from .warehouse import Warehouse, WTDConfig

ENV_NAMES = ("bp10", "bp30", "wtd")


def make_env(name: str, horizon: int | None = None):
    if name == "bp10":
        return BoxPushing(BPConfig(grid_size=10, horizon=horizon))
    if name == "bp30":
        return BoxPushing(BPConfig(grid_size=30, horizon=horizon))
    if name == "wtd":
        return Warehouse(WTDConfig() if horizon is None else WTDConfig(horizon=horizon))
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


__all__ = ["BoxPushing", "BPConfig", "Warehouse", "WTDConfig", "make_env", "ENV_NAMES"]
