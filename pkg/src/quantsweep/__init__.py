"""quantsweep: SLO-driven characterization of quantized LLM serving configs."""

__version__ = "0.1.0"
