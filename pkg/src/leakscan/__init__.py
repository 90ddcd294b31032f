"""Oil-leak region assessment from instance-detection output.

Combines split-histogram image enhancement, a small CNN that classifies
the spatial relation of object pairs (above / nearby / other), and
trainable fuzzy rules that turn detections plus relations into a scene
leak probability with an interpretable winning rule and binding.
"""

from .errors import ConfigError, DataError, NumericError
from .scene import BBox, ClassLabel, DetectedObject, PolygonMask, Scene

__all__ = [
    "BBox",
    "ClassLabel",
    "ConfigError",
    "DataError",
    "DetectedObject",
    "NumericError",
    "PolygonMask",
    "Scene",
]

__version__ = "0.1.0"
