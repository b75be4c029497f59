"""tinyqat: desk-scale quantization-aware training for tiny transformers.

Subpackages/modules:

* ``tensor``       float64 autodiff engine (tape-based reverse mode)
* ``quantizer``    learnable-scale fake quantization, STE gradients,
                   magnitude-aware gradient scaling, policy construction
* ``model``        tiny encoder transformer with per-head quantization sites
* ``losses``       distillation (vanilla and multi-crop) and the bin regularizer
* ``diagnostics``  oscillation tracking, SDAM, bin histograms, sensitivity grids
* ``hwcost``       MAC-level area/power cost model for bitwidth plans
* ``harness``      experiment configs, training loops, run directories
* ``kernels``      compiled hot-path kernels with a numpy fallback
* ``cli``          the ``tinyqat`` command
"""

from . import kernels
from .model import TinyTransformer, TransformerConfig
from .quantizer import fake_quantize, levels
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TinyTransformer",
    "TransformerConfig",
    "backward",
    "fake_quantize",
    "kernels",
    "levels",
    "no_grad",
    "__version__",
]
