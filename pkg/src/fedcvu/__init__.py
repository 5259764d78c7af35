"""fedcvu: a deterministic simulator for communication-efficient federated
learning across heterogeneous sensing views.

The package couples three mechanisms on top of a residual dense network
trained with federated averaging: view-specific normalization layers that
stay private to each client, a prototype bank on the server that pulls the
clients' class embeddings toward a shared space, and a byte-budgeted block
selection scheme that decides which parts of the model are worth shipping
every round.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, METHODS, load_config, method_toggles
from .data import SynthConfig, generate, load_dataset, save_dataset
from .errors import ConfigError, FedcvuError
from .experiment import emit_outputs, evaluate, run_experiment
from .nn import BlockNet, ModelConfig

__all__ = [
    "BlockNet",
    "ConfigError",
    "ExperimentConfig",
    "FedcvuError",
    "METHODS",
    "ModelConfig",
    "SynthConfig",
    "__version__",
    "emit_outputs",
    "evaluate",
    "generate",
    "load_config",
    "load_dataset",
    "method_toggles",
    "run_experiment",
    "save_dataset",
]
