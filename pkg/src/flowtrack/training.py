"""End-to-end learning of the transition cost through the relaxed flow QP."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.metrics import roc_auc_score

from .cost import MlpParams, assemble_cost, init_params, mlp_forward, mlp_vjp, transition_cost_grad
from .data import label_detections
from .difflayer import LOSSES, DegenerateKKTError, backward_dc, loss_bce_edges
from .features import edge_features
from .graph import build_constraints, build_graph, center_distance_gate, encode_ground_truth
from .qp import OPTIMAL, solve_qp
from .tracking import batch_windows

logger = logging.getLogger(__name__)

LOSS_KINDS = ("L1", "L2", "BCE")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 15
    overlap: int = 5
    gamma: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    loss_kind: str = "L2"
    seed: int = 0
    hidden: int = 64
    entry_exit_cost: float = 1.0
    gate_k: float = 2.0
    max_drop_rate: float = 0.1

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 <= self.overlap < self.T:
            raise ValueError("overlap must satisfy 0 <= overlap < T")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainingGraph:
    graph: object
    constraints: object
    features: np.ndarray
    x_gt: np.ndarray
    edge_labels: np.ndarray
    det_cost: np.ndarray
    n_splits: int = 0


def make_training_graph(detections, embeddings, cfg: TrainConfig, max_gap: int = 1) -> TrainingGraph:
    """Graph over labelled detections with gt flow and training unary costs.

    Annotated detections (those carrying an identity) get ``c_det = -1``;
    unannotated ones keep ``-score``.
    """
    graph = build_graph(detections, max_gap, center_distance_gate(cfg.gate_k))
    emb = np.asarray(embeddings)[list(graph.source_index)] if len(detections) else np.zeros((0, 1))
    gt = encode_ground_truth(graph)
    det_cost = np.array([-1.0 if d.id is not None else -d.score for d in graph.detections])
    return TrainingGraph(graph, build_constraints(graph), edge_features(graph, emb), gt.x_gt,
                         gt.edge_labels, det_cost, gt.n_splits)


def split_sequence(sequence, cfg: TrainConfig) -> list:
    """Cut a labelled sequence into overlapping ``T``-frame windows (adjacent-frame edges only)."""
    if not sequence.detections:
        return []
    dets = label_detections(sequence.detections, sequence.gt)
    frames = np.array([d.frame for d in dets])
    out = []
    for start, stop in batch_windows(sequence.n_frames, cfg.T, cfg.overlap):
        idx = np.flatnonzero((frames >= start) & (frames < stop))
        if len(set(frames[idx].tolist())) < 2:
            logger.info("skipping window [%d, %d): fewer than 2 frames with detections", start, stop)
            continue
        out.append(make_training_graph([dets[i] for i in idx], sequence.embeddings[idx], cfg))
    return out


class Adam:
    """Adam with decoupled weight decay over :class:`MlpParams` fields."""

    names = ("W1", "b1", "W2", "b2")

    def __init__(self, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        if state:
            self.t = int(state["t"])
            self.m = {k: np.array(v, dtype=float) for k, v in state["m"].items()}
            self.v = {k: np.array(v, dtype=float) for k, v in state["v"].items()}

    def step(self, w: MlpParams, grad: MlpParams) -> MlpParams:
        self.t += 1
        new = {}
        for k in self.names:
            p = np.asarray(getattr(w, k), dtype=float)
            g = np.asarray(getattr(grad, k), dtype=float)
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            new[k] = p - self.lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * p)
        return MlpParams(new["W1"], new["b1"], new["W2"], float(new["b2"]))

    def state(self) -> dict:
        return {"t": self.t,
                "m": {k: np.asarray(v).tolist() for k, v in self.m.items()},
                "v": {k: np.asarray(v).tolist() for k, v in self.v.items()}}


def _zero_like(w: MlpParams) -> MlpParams:
    return MlpParams(np.zeros_like(w.W1), np.zeros_like(w.b1), np.zeros_like(w.W2), 0.0)


def _axpy(acc: MlpParams, g: MlpParams, a: float = 1.0) -> MlpParams:
    return MlpParams(acc.W1 + a * g.W1, acc.b1 + a * g.b1, acc.W2 + a * g.W2, acc.b2 + a * g.b2)


def graph_loss(w: MlpParams, tg: TrainingGraph, cfg: TrainConfig, need_grad: bool = True):
    """Loss on one training graph and (optionally) its gradient w.r.t. the MLP parameters.

    Raises :class:`RuntimeError` subclasses when the QP or backward solve fails.
    """
    if cfg.loss_kind == "BCE":
        if tg.features.shape[0] == 0:
            return 0.0, _zero_like(w) if need_grad else None
        p = mlp_forward(tg.features, w)
        loss, dp = loss_bce_edges(p, tg.edge_labels)
        return loss, (mlp_vjp(tg.features, w, dp)[0] if need_grad else None)
    cost = assemble_cost(tg.graph, tg.features, w, cfg.entry_exit_cost, det_cost=tg.det_cost)
    sol = solve_qp(cfg.gamma, cost, tg.constraints)
    if sol.status != OPTIMAL:
        raise DegenerateKKTError(f"QP status {sol.status}")
    loss, gx = LOSSES[cfg.loss_kind](sol.x, tg.x_gt)
    if not need_grad:
        return loss, None
    if tg.features.shape[0] == 0:
        return loss, _zero_like(w)
    dc = backward_dc(sol, tg.constraints, cfg.gamma, gx)
    m = tg.graph.m
    dp = dc[3 * m:] * transition_cost_grad(cost.p)
    return loss, mlp_vjp(tg.features, w, dp)[0]


def batch_gradient(w: MlpParams, batch, cfg: TrainConfig, jobs: int = 1):
    """Mean loss and mean gradient over the graphs of ``batch`` that solved.

    Returns ``(loss, grad, n_dropped)``.
    """
    def one(tg):
        try:
            return graph_loss(w, tg, cfg)
        except (DegenerateKKTError, RuntimeError, ValueError) as exc:
            logger.warning("dropping graph from batch: %s", exc)
            return None

    if jobs > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs, prefer="threads")(delayed(one)(tg) for tg in batch)
    else:
        results = [one(tg) for tg in batch]
    ok = [r for r in results if r is not None]
    dropped = len(results) - len(ok)
    if not ok:
        return float("nan"), _zero_like(w), dropped
    acc = _zero_like(w)
    total = 0.0
    for loss, g in ok:
        acc = _axpy(acc, g)
        total += loss
    k = len(ok)
    mean = MlpParams(acc.W1 / k, acc.b1 / k, acc.W2 / k, acc.b2 / k)
    return total / k, mean, dropped


def validation_loss(w: MlpParams, graphs, cfg: TrainConfig) -> float:
    vals = []
    for tg in graphs:
        try:
            vals.append(graph_loss(w, tg, cfg, need_grad=False)[0])
        except RuntimeError as exc:
            logger.warning("validation graph failed: %s", exc)
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainResult:
    params: MlpParams
    final_params: MlpParams
    trace: list  # (epoch, step, train_loss, val_loss)
    best_epoch: int
    step: int
    optimizer_state: dict = field(default_factory=dict)
    n_dropped: int = 0


def train(dataset, cfg: TrainConfig, val_graphs=None, init: Optional[MlpParams] = None,
          optimizer_state: Optional[dict] = None, start_epoch: int = 0, jobs: int = 1) -> TrainResult:
    """Mini-batch training (shuffled without replacement each epoch).

    Returns the parameters with the lowest validation loss (the final ones if
    no validation graphs are given).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    w = init.copy() if init is not None else init_params(cfg.hidden, cfg.seed)
    opt = Adam(cfg.lr, cfg.weight_decay, state=optimizer_state)
    # replay the shuffles of epochs already run so a resumed run matches an uninterrupted one
    for _ in range(start_epoch):
        rng.permutation(len(dataset))
    val_graphs = list(val_graphs or [])

    trace = []
    best = (math.inf, w.copy(), start_epoch)
    if val_graphs:
        v0 = validation_loss(w, val_graphs, cfg)
        trace.append((start_epoch, opt.t, float("nan"), v0))
        best = (v0, w.copy(), start_epoch)
    n_seen = n_dropped = 0
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[s:s + cfg.batch_size]]
            loss, grad, dropped = batch_gradient(w, batch, cfg, jobs)
            n_seen += len(batch)
            n_dropped += dropped
            if n_dropped > cfg.max_drop_rate * n_seen and n_seen >= 10:
                raise TrainingAborted(f"{n_dropped} of {n_seen} graphs failed to solve")
            if dropped == len(batch):
                continue
            w = opt.step(w, grad)
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        v = validation_loss(w, val_graphs, cfg) if val_graphs else float("nan")
        trace.append((epoch, opt.t, train_loss, v))
        logger.info("epoch %d step %d train %.6g val %.6g", epoch, opt.t, train_loss, v)
        if val_graphs and v < best[0]:
            best = (v, w.copy(), epoch)
    if not val_graphs:
        best = (math.nan, w.copy(), start_epoch + cfg.epochs)
    return TrainResult(params=best[1], final_params=w, trace=trace, best_epoch=best[2], step=opt.t,
                       optimizer_state=opt.state(), n_dropped=n_dropped)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "step", "train_loss", "val_loss"])
        for epoch, step, tl, vl in trace:
            wr.writerow([epoch, step, repr(float(tl)), repr(float(vl))])


def evaluate_affinity(model: MlpParams, val_graphs, gamma: float = 0.1, entry_exit_cost: float = 1.0) -> dict:
    """AUC and BCE of the edge probabilities; MSE and MSE_edge of the QP output.

    ``model`` is an :class:`MlpParams` or a callable mapping a
    :class:`TrainingGraph` to its edge probabilities.
    """
    ps, ys, sq_all, sq_edge = [], [], [], []
    for tg in val_graphs:
        if callable(model):
            cost = assemble_cost(tg.graph, tg.features, None, entry_exit_cost, det_cost=tg.det_cost,
                                 p=np.asarray(model(tg), dtype=float))
        else:
            cost = assemble_cost(tg.graph, tg.features, model, entry_exit_cost, det_cost=tg.det_cost)
        ps.append(cost.p)
        ys.append(tg.edge_labels)
        sol = solve_qp(gamma, cost, tg.constraints)
        r = sol.x - tg.x_gt
        sq_all.append(r * r)
        sq_edge.append(r[3 * tg.graph.m:] ** 2)
    p = np.concatenate(ps) if ps else np.zeros(0)
    y = np.concatenate(ys) if ys else np.zeros(0)
    auc = float(roc_auc_score(y, p)) if 0 < y.sum() < y.size else float("nan")
    return {
        "AUC": auc,
        "BCE": loss_bce_edges(p, y)[0] if p.size else float("nan"),
        "MSE": float(np.concatenate(sq_all).mean()) if sq_all else float("nan"),
        "MSE_edge": float(np.concatenate(sq_edge).mean()) if sq_edge else float("nan"),
    }
