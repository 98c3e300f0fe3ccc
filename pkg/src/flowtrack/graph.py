"""Flow graph construction, linear constraints and ground-truth flow encoding.

Variables are laid out in four contiguous blocks::

    [det (m) | en (m) | ex (m) | tran (E)]

so that a cost vector ``c = [c_det, c_en, c_ex, c_tran]`` lines up with the
flow indicator vector ``x``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DET, EN, EX, TRAN = "det", "en", "ex", "tran"


@dataclass(frozen=True)
class Detection:
    """A single box hypothesis. ``x, y`` are the top-left corner in pixels."""

    frame: int
    x: float
    y: float
    w: float
    h: float
    score: float = 1.0
    id: Optional[int] = None
    interpolated: bool = False

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    @property
    def box(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h


Gate = Callable[[Detection, Detection], bool]


def center_distance_gate(k: float = 2.0) -> Gate:
    """Keep a pair if its center distance is at most ``k * mean height`` per frame of gap."""

    def gate(di: Detection, dj: Detection) -> bool:
        gap = dj.frame - di.frame
        (xi, yi), (xj, yj) = di.center, dj.center
        dist = np.hypot(xj - xi, yj - yi)
        return dist <= k * 0.5 * (di.h + dj.h) * gap

    return gate


@dataclass(frozen=True)
class FlowGraph:
    detections: tuple[Detection, ...]
    transitions: tuple[tuple[int, int], ...]
    # position of each sorted detection in the caller's original list
    source_index: tuple[int, ...] = field(default=())

    @property
    def m(self) -> int:
        return len(self.detections)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def n(self) -> int:
        return 3 * self.m + len(self.transitions)

    def block(self, kind: str) -> slice:
        m = self.m
        return {
            DET: slice(0, m),
            EN: slice(m, 2 * m),
            EX: slice(2 * m, 3 * m),
            TRAN: slice(3 * m, self.n),
        }[kind]

    def variable_index(self, kind: str, key) -> int:
        """Map ``(kind, detection)`` or ``(TRAN, (i, j))`` to a column of ``x``."""
        if kind == TRAN:
            return 3 * self.m + self._transition_lookup[tuple(key)]
        if not 0 <= key < self.m:
            raise IndexError(key)
        return self.block(kind).start + int(key)

    def variable_info(self, k: int) -> tuple[str, object]:
        """Inverse of :meth:`variable_index`."""
        if not 0 <= k < self.n:
            raise IndexError(k)
        m = self.m
        if k < 3 * m:
            return (DET, EN, EX)[k // m], k % m
        return TRAN, self.transitions[k - 3 * m]

    @property
    def _transition_lookup(self) -> dict:
        cache = self.__dict__.get("_lookup")
        if cache is None:
            cache = {pair: e for e, pair in enumerate(self.transitions)}
            object.__setattr__(self, "_lookup", cache)
        return cache

    @property
    def transition_array(self) -> np.ndarray:
        if not self.transitions:
            return np.zeros((0, 2), dtype=np.int64)
        return np.asarray(self.transitions, dtype=np.int64)


def build_graph(
    detections: Sequence[Detection],
    max_gap: int = 5,
    spatial_gate: Optional[Gate] = None,
) -> FlowGraph:
    """Build the flow graph over ``detections``.

    Transition candidates are all pairs whose frame difference lies in
    ``[1, max_gap]`` and which pass ``spatial_gate`` (no gating if None).
    Detections are sorted by frame (stable) before indexing; the permutation
    is kept in ``FlowGraph.source_index``.
    """
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    order = sorted(range(len(detections)), key=lambda i: detections[i].frame)
    dets = tuple(detections[i] for i in order)
    frames = np.array([d.frame for d in dets], dtype=np.int64)

    transitions = []
    for i, di in enumerate(dets):
        lo = np.searchsorted(frames, di.frame + 1, side="left")
        hi = np.searchsorted(frames, di.frame + max_gap, side="right")
        for j in range(lo, hi):
            if spatial_gate is None or spatial_gate(di, dets[j]):
                transitions.append((i, j))
    return FlowGraph(dets, tuple(transitions), tuple(order))


@dataclass(frozen=True)
class ConstraintSet:
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[1]


def build_constraints(graph: FlowGraph) -> ConstraintSet:
    """Flow conservation rows plus the ``0 <= x <= 1`` box.

    Row ``2i`` is node ``i``'s in-balance ``en_i + sum_j tran_ji - det_i = 0``
    and row ``2i+1`` its out-balance ``det_i - ex_i - sum_j tran_ij = 0``.
    """
    m, n = graph.m, graph.n
    rows, cols, vals = [], [], []
    for i in range(m):
        rows += [2 * i, 2 * i, 2 * i + 1, 2 * i + 1]
        cols += [m + i, i, i, 2 * m + i]
        vals += [1.0, -1.0, 1.0, -1.0]
    for e, (i, j) in enumerate(graph.transitions):
        k = 3 * m + e
        rows += [2 * j, 2 * i + 1]
        cols += [k, k]
        vals += [1.0, -1.0]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(2 * m, n))
    eye = sp.identity(n, format="csr")
    G = sp.vstack([eye, -eye], format="csr")
    h = np.concatenate([np.ones(n), np.zeros(n)])
    return ConstraintSet(A=A, b=np.zeros(2 * m), G=G, h=h)


def check_feasible(constraints: ConstraintSet, x, tol: float = 1e-8) -> bool:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != constraints.n:
        raise ValueError(f"x has shape {x.shape}, expected ({constraints.n},)")
    eq = constraints.A @ x - constraints.b
    ineq = constraints.G @ x - constraints.h
    eq_ok = eq.size == 0 or np.max(np.abs(eq)) <= tol
    ineq_ok = ineq.size == 0 or np.max(ineq) <= tol
    return bool(eq_ok and ineq_ok)


@dataclass
class GroundTruthFlow:
    x_gt: np.ndarray
    n_splits: int = 0
    # per-transition binary labels (1 iff endpoints are consecutive in one gt identity)
    edge_labels: Optional[np.ndarray] = None


def encode_ground_truth(graph: FlowGraph, gt_tracks=None) -> GroundTruthFlow:
    """Binary flow of the ground-truth association on ``graph``.

    ``gt_tracks`` may be a list of :class:`~flowtrack.tracking.Trajectory`
    (matched to graph nodes by identity and frame). If omitted, the identities
    carried by the graph's own detections are used. Consecutive gt detections
    without a graph edge between them split the track; those events are counted
    in ``n_splits``.
    """
    m = graph.m
    x = np.zeros(graph.n)
    node_of = {}
    for i, d in enumerate(graph.detections):
        if d.id is not None:
            key = (d.id, d.frame)
            if key in node_of:
                raise ValueError(f"identity {d.id} appears twice in frame {d.frame}")
            node_of[key] = i

    if gt_tracks is None:
        chains = {}
        for i, d in enumerate(graph.detections):
            if d.id is not None:
                chains.setdefault(d.id, []).append(i)
        paths = [sorted(v, key=lambda i: graph.detections[i].frame) for _, v in sorted(chains.items())]
    else:
        paths = []
        for track in gt_tracks:
            nodes = []
            for d in track.detections:
                key = (track.id, d.frame)
                if key not in node_of:
                    raise ValueError(f"gt detection (id={track.id}, frame={d.frame}) not in graph")
                nodes.append(node_of[key])
            paths.append(nodes)

    lookup = graph._transition_lookup
    labels = np.zeros(graph.n_transitions)
    n_splits = 0
    for nodes in paths:
        if not nodes:
            continue
        x[nodes[0] + m] = 1.0
        for a, b in zip(nodes[:-1], nodes[1:]):
            e = lookup.get((a, b))
            if e is None:
                n_splits += 1
                x[a + 2 * m] = 1.0
                x[b + m] = 1.0
            else:
                x[3 * m + e] = 1.0
                labels[e] = 1.0
        x[nodes[-1] + 2 * m] = 1.0
        x[nodes] = 1.0
    if n_splits:
        logger.debug("ground truth split at %d missing edges", n_splits)
    return GroundTruthFlow(x_gt=x, n_splits=n_splits, edge_labels=labels)
