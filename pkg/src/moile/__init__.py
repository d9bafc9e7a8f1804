"""Task-aware mixture of incremental LoRA experts, at desk scale.

Modules: ``numcore`` (autodiff and SVD), ``ctc`` (online task clustering),
``experts`` (LoRA experts and routers), ``incremental`` (SVD-partitioned
adapters and their penalties), ``model``, ``bench`` (synthetic task
streams), ``trainer``, ``metrics``, ``config`` and ``cli``.
"""
__version__ = "0.1.0"
