"""trajflow: diverse and admissible multi-agent trajectory forecasting.

A desk-scale numpy implementation of a flow-based trajectory
forecaster: Kalman-smoothed data conditioning, drivable-area map
priors, an attention encoder-decoder with a constrained affine
normalizing-flow head trained by symmetric cross-entropy, and a
diversity/admissibility metrics suite.
"""

__version__ = "0.1.0"

from . import diffnet, episodes, metrics, model, objective, preprocess  # noqa: F401
from . import scenemap, synthetic, training, viz  # noqa: F401
