"""Recursive robust PCA with support-predicted Modified-CS."""
from .pcp import PCPProblem, solve_pcp
from .pipeline import PipelineConfig, run_plain_rrpcp, run_suppred_modcs
from .sparse import AddLSDelParams, ModCSProblem, add_ls_del, solve_modcs
from .subspace import SubspaceEstimate, estimate_initial_pc, update_pc

__version__ = "0.1.0"
