"""Learnable min-cost network flow for multi-object tracking."""
from .cost import MlpParams, assemble_cost, init_params, load_checkpoint, mlp_forward, save_checkpoint
from .data import Sequence, SyntheticConfig, read_mot_csv, read_sequence, synth_generate, write_results
from .difflayer import backward_dc, loss_bce_edges, loss_l1, loss_l2
from .features import edge_features
from .graph import Detection, FlowGraph, build_constraints, build_graph, encode_ground_truth
from .metrics import EvalReport, evaluate
from .qp import QpSolution, round_solution, solve_flow_exact, solve_qp
from .tracking import TrackerConfig, Trajectory, track_sequence
from .training import TrainConfig, evaluate_affinity, split_sequence, train

__version__ = "0.1.0"

__all__ = [
    "Detection", "FlowGraph", "build_graph", "build_constraints", "encode_ground_truth",
    "edge_features", "MlpParams", "init_params", "mlp_forward", "assemble_cost",
    "save_checkpoint", "load_checkpoint", "QpSolution", "solve_qp", "solve_flow_exact",
    "round_solution", "backward_dc", "loss_l1", "loss_l2", "loss_bce_edges", "TrainConfig",
    "split_sequence", "train", "evaluate_affinity", "TrackerConfig", "Trajectory",
    "track_sequence", "EvalReport", "evaluate", "Sequence", "SyntheticConfig", "synth_generate",
    "read_mot_csv", "read_sequence", "write_results",
]
