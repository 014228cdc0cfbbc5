"""Discrete flow maps: simplex-valued mean denoisers, exact toy oracles,
consistency distillation and few-step sampling.

Submodules are imported on demand; ``dfm.cli`` must be able to cap the
numerical thread pools before numpy loads.
"""

__version__ = "0.1.0"
