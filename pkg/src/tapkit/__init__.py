"""tapkit: temporal action parsing toolkit.

Learned pattern-bank attention parser, tolerance-based boundary metrics,
k-means / TCN parsing baselines, and a synthetic benchmark generator with
known sub-action boundaries.
"""

__version__ = "0.1.0"

FEATURE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
