"""sconv: spatial-information-guided convolution with hand-written
gradients, a toy RGBD segmentation network, and a training/benchmark
harness. CPU only; numpy core with an optional compiled kernel backend.
"""

from .backend import BACKEND
from .tensor import ConvGeometry, load_tensor, save_tensor

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConvGeometry", "load_tensor", "save_tensor", "__version__"]
