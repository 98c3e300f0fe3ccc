"""Learnable transition cost (two-layer ReLU MLP) and fixed unary costs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .features import N_FEATURES

PROB_EPS = 1e-6
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    W1: np.ndarray  # (hidden, 6)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (1, hidden)
    b2: float

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": np.asarray(self.b2, dtype=float)}

    @classmethod
    def from_arrays(cls, d: dict) -> "MlpParams":
        return cls(
            W1=np.array(d["W1"], dtype=float),
            b1=np.array(d["b1"], dtype=float),
            W2=np.array(d["W2"], dtype=float).reshape(1, -1),
            b2=float(np.asarray(d["b2"])),
        )

    def copy(self) -> "MlpParams":
        return MlpParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), float(self.b2))

    @classmethod
    def zeros(cls, hidden: int = 64, n_in: int = N_FEATURES) -> "MlpParams":
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((1, hidden)), 0.0)


def init_params(hidden: int = 64, seed: int = 0, n_in: int = N_FEATURES) -> MlpParams:
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(1.0 / n_in)
    a2 = np.sqrt(1.0 / hidden)
    return MlpParams(
        W1=rng.uniform(-a1, a1, size=(hidden, n_in)),
        b1=rng.uniform(-a1, a1, size=hidden),
        W2=rng.uniform(-a2, a2, size=(1, hidden)),
        b2=float(rng.uniform(-a2, a2)),
    )


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def mlp_forward(e, w: MlpParams, return_cache: bool = False):
    """Matching probability ``sigmoid(W2 relu(W1 e + b1) + b2)``.

    ``e`` is a single 6-vector or an ``(E, 6)`` batch.
    """
    e = np.asarray(e, dtype=float)
    single = e.ndim == 1
    E = np.atleast_2d(e)
    pre = E @ w.W1.T + w.b1
    hid = np.maximum(pre, 0.0)
    z = hid @ w.W2[0] + w.b2
    p = _sigmoid(z)
    out = p[0] if single else p
    if return_cache:
        return out, (E, pre, hid, p)
    return out


def mlp_vjp(e, w: MlpParams, upstream):
    """Reverse-mode gradient of ``sum(upstream * mlp_forward(e, w))``.

    Returns ``(grads, dL_de)`` where ``grads`` is an :class:`MlpParams` holding
    the parameter gradients.
    """
    single = np.asarray(e).ndim == 1
    _, (E, pre, hid, p) = mlp_forward(e, w, return_cache=True)
    g = np.atleast_1d(np.asarray(upstream, dtype=float))
    dz = g * p * (1.0 - p)
    dW2 = (dz @ hid)[None, :]
    db2 = float(dz.sum())
    dhid = np.outer(dz, w.W2[0])
    dpre = dhid * (pre > 0)
    dW1 = dpre.T @ E
    db1 = dpre.sum(axis=0)
    de = dpre @ w.W1
    grads = MlpParams(dW1, db1, dW2, db2)
    return grads, (de[0] if single else de)


@dataclass
class CostVector:
    c: np.ndarray
    p: np.ndarray  # raw MLP probabilities per transition (pre-clamp)


def transition_cost(p, eps: float = PROB_EPS) -> np.ndarray:
    return -np.log(np.clip(p, eps, 1.0 - eps))


def transition_cost_grad(p, eps: float = PROB_EPS) -> np.ndarray:
    """d c_tran / d p, zero where the clamp is active."""
    p = np.asarray(p, dtype=float)
    inside = (p > eps) & (p < 1.0 - eps)
    return np.where(inside, -1.0 / np.where(inside, p, 1.0), 0.0)


def assemble_cost(graph, features, w: Optional[MlpParams] = None, entry_exit_cost: float = 1.0,
                  det_cost=None, p=None, eps: float = PROB_EPS) -> CostVector:
    """Full cost vector in graph layout.

    ``c_det`` defaults to ``-score`` per detection; pass ``det_cost`` to
    override (e.g. ``-1`` for annotated boxes in training graphs). Either
    ``w`` or precomputed probabilities ``p`` must be given.
    """
    features = np.asarray(features, dtype=float).reshape(-1, N_FEATURES)
    if features.shape[0] != graph.n_transitions:
        raise ValueError(f"{features.shape[0]} features for {graph.n_transitions} transitions")
    if p is None:
        if w is None:
            raise ValueError("need MLP parameters or probabilities")
        p = mlp_forward(features, w) if features.shape[0] else np.zeros(0)
    p = np.asarray(p, dtype=float)
    m = graph.m
    if det_cost is None:
        det_cost = -np.array([d.score for d in graph.detections], dtype=float)
    det_cost = np.broadcast_to(np.asarray(det_cost, dtype=float), (m,))
    c = np.concatenate([
        det_cost,
        np.full(m, float(entry_exit_cost)),
        np.full(m, float(entry_exit_cost)),
        transition_cost(p, eps),
    ])
    return CostVector(c=c, p=p)


def repr_17(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(path, w: MlpParams, extra: Optional[dict] = None) -> None:
    """JSON checkpoint; floats are written with 17 significant digits."""
    doc = {"version": CHECKPOINT_VERSION, "hidden": w.hidden, "n_in": w.W1.shape[1]}
    doc["weights"] = {k: {"shape": list(np.shape(v)), "data": [repr_17(x) for x in np.ravel(v)]}
                      for k, v in w.arrays().items()}
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Returns ``(MlpParams, extra_dict)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arrays = {k: np.array([float(x) for x in v["data"]], dtype=float).reshape(v["shape"])
              for k, v in doc["weights"].items()}
    w = MlpParams.from_arrays(arrays)
    if w.hidden != doc["hidden"]:
        raise ValueError("hidden size mismatch in checkpoint")
    return w, doc.get("extra", {})
