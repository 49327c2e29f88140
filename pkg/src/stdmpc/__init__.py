"""Self-triggered distributed MPC for path-parameterised multi-agent formations."""

__version__ = "0.1.0"
