"""Tucker tensor train Taylor surrogates of implicit maps."""

from .surrogate import T4SModel, evaluate, lift_to_original
from .t3 import TensorTrain, Truncation, TuckerTensorTrain, t3_svd_dense, t3_svd_implicit

__all__ = [
    "T4SModel",
    "TensorTrain",
    "Truncation",
    "TuckerTensorTrain",
    "evaluate",
    "lift_to_original",
    "t3_svd_dense",
    "t3_svd_implicit",
]
