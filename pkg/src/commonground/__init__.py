"""Label migration for bi-temporal land-cover classification.

Combines IRMAD unsupervised change detection with a two-stage
semi-supervised pseudo-labeling pipeline, and evaluates migration
strategies under a spatiotemporal leave-location-and-time-out protocol.
"""

__version__ = "0.1.0"

from . import (evaluation, forest, irmad, migration, preprocess, raster,
               synth)
from .errors import DataError, FormatError, ValidationError

__all__ = ["evaluation", "forest", "irmad", "migration", "preprocess",
           "raster", "synth", "DataError", "FormatError", "ValidationError",
           "__version__"]
