"""Framework-free MSA2Net with the multi-scale adaptive spatial attention gate."""
from .errors import (ConfigError, ContractError, DataError, FormatError, Msa2NetError,
                     NumericalError, UsageError)
from .masag import MasagConfig, MasagParams, masag_forward
from .network import (NetworkConfig, build_model, count_parameters, estimate_flops,
                      load_checkpoint, make_ablation_variant, model_forward, save_checkpoint)
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "FormatError", "Msa2NetError", "NumericalError",
    "UsageError", "MasagConfig", "MasagParams", "masag_forward", "NetworkConfig", "build_model",
    "count_parameters", "estimate_flops", "load_checkpoint", "make_ablation_variant",
    "model_forward", "save_checkpoint", "Tensor", "backward", "no_grad", "precision",
]
