"""Flocking certificates for Cucker-Smale and Motsch-Tadmor alignment on weighted digraphs."""

from .dynamics import AgentState, Trajectory, simulate, star_graph
from .flocking import (FlockingCertificate, check_general, check_hierarchical, check_reversible,
                       check_scrambling, envelope_max)
from .graph import (InteractionGraph, chain_graph, classify, cycle_graph, structural_constants,
                    uniform_graph)
from .kernel import PowerKernel, TableKernel, rate_matrix
from .markov import dobrushin, mc_velocity_estimate, sample_jump_process, solve_transition

__all__ = [
    "AgentState", "Trajectory", "simulate", "star_graph",
    "FlockingCertificate", "check_general", "check_hierarchical", "check_reversible",
    "check_scrambling", "envelope_max",
    "InteractionGraph", "chain_graph", "classify", "cycle_graph", "structural_constants",
    "uniform_graph",
    "PowerKernel", "TableKernel", "rate_matrix",
    "dobrushin", "mc_velocity_estimate", "sample_jump_process", "solve_transition",
]
