"""Parallel basis-update & Galerkin integrators for low-rank matrices, Tucker tensors and tree tensor networks."""

from .operators import SumOfProductsOperator
from .lowrank_matrix import LowRankMatrix, OperatorMatrixField
from .tucker import TensorField, TuckerTensor
from .ttn import Leaf, Node, TreeTensorNetwork, contract_full, load_ttn, save_ttn
from .ttn_integrator import RankGrowthError, StepConfig, integrate, ttn_step

__version__ = "0.1.0"

__all__ = [
    "SumOfProductsOperator", "LowRankMatrix", "OperatorMatrixField", "TensorField", "TuckerTensor",
    "Leaf", "Node", "TreeTensorNetwork", "contract_full", "load_ttn", "save_ttn",
    "RankGrowthError", "StepConfig", "integrate", "ttn_step",
]
