from .layers import NormLayer, gelu, softmax_cross_entropy
from .network import BlockNet, ModelConfig
from .optim import OptimConfig, OptState

__all__ = [
    "BlockNet",
    "ModelConfig",
    "NormLayer",
    "OptState",
    "OptimConfig",
    "gelu",
    "softmax_cross_entropy",
]
