"""Simulation and analysis toolkit for DAG-based BFT consensus at ``n = k*f + 1``."""

from __future__ import annotations

__version__ = "0.1.0"
