"""Flow-matching super-resolution with a fidelity-gated reward and negative-aware RL, at desk scale."""

__version__ = "0.1.0"
