"""Edge features: relative geometry, appearance similarity and GIoU.

The feature order ``(dx, dy, log_h, log_w, cos_sim, giou)`` is part of the
checkpoint contract; a trained MLP is meaningless under any other order.
"""
from __future__ import annotations

import numpy as np

FEATURE_NAMES = ("dx", "dy", "log_h", "log_w", "cos_sim", "giou")
N_FEATURES = len(FEATURE_NAMES)


def normalize_embeddings(vecs) -> np.ndarray:
    """L2-normalise rows; zero rows are an error."""
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] == 0)
    if bad.size:
        raise ValueError(f"zero-norm embedding at rows {bad.tolist()}")
    return vecs / norms


def geometric_feature(di, dj) -> np.ndarray:
    s = di.h + dj.h
    return np.array([
        2.0 * (dj.x - di.x) / s,
        2.0 * (dj.y - di.y) / s,
        np.log(di.h / dj.h),
        np.log(di.w / dj.w),
    ])


def _iou_giou(bi, bj):
    xi, yi, wi, hi = bi
    xj, yj, wj, hj = bj
    ix = np.maximum(0.0, np.minimum(xi + wi, xj + wj) - np.maximum(xi, xj))
    iy = np.maximum(0.0, np.minimum(yi + hi, yj + hj) - np.maximum(yi, yj))
    inter = ix * iy
    union = wi * hi + wj * hj - inter
    cw = np.maximum(xi + wi, xj + wj) - np.minimum(xi, xj)
    ch = np.maximum(yi + hi, yj + hj) - np.minimum(yi, yj)
    enclose = cw * ch
    iou = inter / union
    return iou, iou - (enclose - union) / enclose


def iou(di, dj) -> float:
    return float(_iou_giou(di.box, dj.box)[0])


def giou(di, dj) -> float:
    return float(_iou_giou(di.box, dj.box)[1])


def cosine_similarity(a, b) -> float:
    return float(np.dot(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))


def edge_feature(di, dj, phi_i, phi_j) -> np.ndarray:
    return np.concatenate([
        geometric_feature(di, dj),
        [cosine_similarity(phi_i, phi_j), giou(di, dj)],
    ])


def edge_features(graph, embeddings) -> np.ndarray:
    """Features for every transition of ``graph`` as an ``(E, 6)`` array.

    ``embeddings`` rows are aligned with ``graph.detections`` (already sorted).
    """
    pairs = graph.transition_array
    if pairs.shape[0] == 0:
        return np.zeros((0, N_FEATURES))
    boxes = np.array([d.box for d in graph.detections], dtype=float)
    emb = np.asarray(embeddings, dtype=float)
    bi, bj = boxes[pairs[:, 0]].T, boxes[pairs[:, 1]].T
    s = bi[3] + bj[3]
    _, g = _iou_giou(bi, bj)
    cos = np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])
    return np.column_stack([
        2.0 * (bj[0] - bi[0]) / s,
        2.0 * (bj[1] - bi[1]) / s,
        np.log(bi[3] / bj[3]),
        np.log(bi[2] / bj[2]),
        cos,
        g,
    ])
