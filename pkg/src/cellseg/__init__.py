"""cellseg: image segmentation with a trainable cellular automaton."""

from .estimator import CellularSegmenter
from .model import ArchConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["CellularSegmenter", "ArchConfig", "Tensor", "__version__"]
