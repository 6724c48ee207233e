"""Second-order supervision for variational autoencoders."""

from .autodiff import Tensor, ParamSet, grad_through_update
from .data import LabeledDataset
from .networks import Architecture
from .trainers import METHODS, ModelBundle, TrainConfig, train

__all__ = ["Tensor", "ParamSet", "grad_through_update", "LabeledDataset", "Architecture",
           "METHODS", "ModelBundle", "TrainConfig", "train"]
__version__ = "0.1.0"
