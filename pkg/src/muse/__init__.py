"""muse: hierarchical multimodal representation learning on a numpy autodiff core."""

from .autodiff import (ContractError, NumericError, ParamStore, ShapeError,
                       Tensor, gradcheck)
from .data import MultimodalDataset, load_mnist_pair, make_synthetic_bars
from .gaussians import DiagGaussian, kl_between, kl_to_standard, poe_combine, symmetric_kl
from .model import ModalitySpec, MuseModel, TrainConfig, VARIANTS, build_variant
from .likelihood import iw_conditional, iw_joint, iw_marginal, coherence_accuracy
from .envs import HyperhotEnv, PendulumEnv

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ParamStore", "gradcheck",
    "ShapeError", "NumericError", "ContractError",
    "DiagGaussian", "kl_to_standard", "kl_between", "symmetric_kl", "poe_combine",
    "MultimodalDataset", "make_synthetic_bars", "load_mnist_pair",
    "ModalitySpec", "MuseModel", "TrainConfig", "VARIANTS", "build_variant",
    "iw_marginal", "iw_joint", "iw_conditional", "coherence_accuracy",
    "PendulumEnv", "HyperhotEnv",
]
