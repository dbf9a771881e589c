"""ELM-based system identification and linearized MPC with a dual projected-gradient QP."""

__version__ = "0.1.0"
