"""Topology-aware sample reweighting for node classification under distribution shift.

Node weights follow a gradient flow in the geometric Wasserstein space of the
data graph, so mass only travels along edges. Submodules:

* :mod:`geoflow.graph`: weighted undirected graphs and I/O.
* :mod:`geoflow.flow`: the reweighting flow and its Euler integrator.
* :mod:`geoflow.model`: a propagated-feature linear classifier.
* :mod:`geoflow.trainer`: the alternating reweight/descend training loop.
* :mod:`geoflow.data`: synthetic shift datasets and their on-disk format.
* :mod:`geoflow.oracle`: independent numerical checks of the flow.
"""

from .flow import FlowConfig, FlowTrace, euler_step, free_energy, gibbs_stationary, run_flow
from .graph import WeightedGraph, build_graph
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "FlowConfig", "FlowTrace", "TrainConfig", "TrainReport", "WeightedGraph",
    "build_graph", "euler_step", "free_energy", "gibbs_stationary", "run_flow", "train",
]
