"""Group-sparse recovery from sparse expander sketches via l2,1 basis pursuit."""

from .block_model import (BlockSupport, GroupModel, ModelError, best_k_block_support,
                          group_norms, group_soft_threshold, l21_norm, random_block_sparse,
                          soft_threshold, tail_l21)
from .expander import (BipartiteExpander, ExpanderError, TensorExpander, adjoint_matvec,
                       certified_epsilon, check_expansion, construct_random, deserialize,
                       experimental_degree, matvec, required_degree, required_measurements,
                       serialize, tensor_adjoint_matvec, tensor_matvec)
from .solver import (Constraint, LinearOperator, RecoveryProblem, SolverConfig, SolverReport,
                     estimate_opnorm, expander_operator, make_gaussian, residuals, solve)

__version__ = "0.1.0"

__all__ = [
    "BlockSupport", "GroupModel", "ModelError", "best_k_block_support", "group_norms",
    "group_soft_threshold", "l21_norm", "random_block_sparse", "soft_threshold", "tail_l21",
    "BipartiteExpander", "ExpanderError", "TensorExpander", "adjoint_matvec",
    "certified_epsilon", "check_expansion", "construct_random", "deserialize",
    "experimental_degree", "matvec", "required_degree", "required_measurements", "serialize",
    "tensor_adjoint_matvec", "tensor_matvec",
    "Constraint", "LinearOperator", "RecoveryProblem", "SolverConfig", "SolverReport",
    "estimate_opnorm", "expander_operator", "make_gaussian", "residuals", "solve",
]
