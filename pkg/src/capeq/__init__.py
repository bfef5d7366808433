"""Risk-averse capacity investment equilibria under alternative contract regimes."""
from __future__ import annotations

__version__ = "0.1.0"
