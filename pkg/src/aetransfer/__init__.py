"""Transferability of adversarial examples across regularized and ensemble CNNs.

Modules: ``ndtensor`` (autodiff), ``nn`` (models and training), ``ensemble``,
``attacks``, ``metrics``, ``harness`` (experiment protocol and presets),
``data``, ``store`` (artifact files), ``report`` (figures) and ``cli``.
"""

__version__ = "0.1.0"
