"""Toolkit for auditing attribute-bias removal against its information limit.

The package is organised around one inequality on a triple of random
variables (features Z, target Y, protected attribute A):

    0 <= I(Z;Y) <= I(Z;A) + H(Y|A)

`exact_info` computes every term in closed form on small finite joints,
`mi_estim` estimates the same terms from samples, `datagen` builds datasets
whose bias strength H(Y|A) is a control knob, `debias` trains desk-scale
bias-removal models, `stats` runs the one-sided Kolmogorov-Smirnov
breaking-point protocol, and `harness`/`cli` tie everything into
reproducible sweeps.
"""

__version__ = "0.1.0"

from . import datagen, debias, exact_info, harness, mi_estim, stats, tinynet

__all__ = [
    "datagen",
    "debias",
    "exact_info",
    "harness",
    "mi_estim",
    "stats",
    "tinynet",
]
