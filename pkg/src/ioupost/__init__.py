"""IoU-aware object-detection post-processing.

Exact differentiable region pooling, IoU-guided non-maximum suppression,
optimization-based bounding box refinement, synthetic scenes, and detection
metrics, exposed as a library, an HTTP service, and a thin CLI.
"""

from .geometry import BoundingBox, BoxDelta, Detection, GroundTruthBox

__version__ = "0.1.0"

__all__ = ["BoundingBox", "BoxDelta", "Detection", "GroundTruthBox", "__version__"]
