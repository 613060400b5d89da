"""CS-Unet: a convolutional Swin-Unet for 2-D medical image segmentation, in numpy.

The package carries its own reverse-mode autodiff (:mod:`csunet.tensor`,
:mod:`csunet.ops`), the convolutional Swin transformer block
(:mod:`csunet.cst`), the U-shaped network (:mod:`csunet.network`), training
and evaluation (:mod:`csunet.trainer`) and the ``csunet`` command line.
"""

from .network import ModelConfig, ablation_config, count_params, forward, init_params, predict, tiny_config
from .tensor import ConfigError, ShapeError, Tensor, UsageError, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "UsageError",
    "ablation_config",
    "count_params",
    "forward",
    "init_params",
    "no_grad",
    "predict",
    "tiny_config",
]
