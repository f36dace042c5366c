"""Shape-constrained production function estimation.

CAP-NLS (adaptively partitioned concave least squares), CNLS, monotone CAP
and Cobb-Douglas fits, with a finite-population model-selection framework
and Monte Carlo tooling.
"""

__version__ = "0.1.0"
