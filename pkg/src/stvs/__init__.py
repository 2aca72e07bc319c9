"""Short-term voltage security tuning for inverter fault ride-through."""

__version__ = "0.1.0"
