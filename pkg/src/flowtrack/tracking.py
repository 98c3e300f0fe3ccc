"""Inference: batched flow tracking, stitching, tracklet association, interpolation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cost import assemble_cost
from .features import edge_features
from .graph import Detection, FlowGraph, build_graph, center_distance_gate
from .qp import solve_flow_exact

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    id: int
    detections: list
    # positions of the detections in the sequence's detection list (-1 = interpolated)
    indices: Optional[list] = None
    embedding_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = [d.frame for d in self.detections]
        if not frames:
            raise ValueError("a trajectory needs at least one detection")
        if any(b <= a for a, b in zip(frames[:-1], frames[1:])):
            raise ValueError(f"trajectory {self.id}: frames must be strictly increasing")

    @property
    def start(self) -> int:
        return self.detections[0].frame

    @property
    def end(self) -> int:
        return self.detections[-1].frame

    def __len__(self):
        return len(self.detections)


@dataclass
class TrackerConfig:
    batch_len: int = 100
    batch_overlap: int = 10
    delta: int = 5
    tau_dist: float = 0.3
    second_stage: bool = True
    entry_exit_cost: float = 1.0
    second_stage_max_gap: int = 60
    gate_k: float = 2.0
    interpolate: bool = True

    def __post_init__(self):
        if not self.batch_len > self.batch_overlap >= self.delta >= 1:
            raise ValueError("need batch_len > batch_overlap >= delta >= 1")
        if not self.tau_dist > 0:
            raise ValueError("tau_dist must be > 0")
        if self.second_stage_max_gap < 1:
            raise ValueError("second_stage_max_gap must be >= 1")


def extract_tracks(graph: FlowGraph, x) -> list:
    """Read the unit-flow paths off a feasible binary flow."""
    x = np.asarray(x)
    m = graph.m
    if x.shape != (graph.n,):
        raise ValueError("flow has wrong length")
    xb = x > 0.5
    if np.any(np.abs(x - xb) > 1e-6):
        raise ValueError("flow is not binary")
    succ, n_in, n_out = {}, np.zeros(m, int), np.zeros(m, int)
    for e, (i, j) in enumerate(graph.transitions):
        if xb[3 * m + e]:
            succ[i] = j
            n_out[i] += 1
            n_in[j] += 1
    det, en, ex = xb[:m], xb[m:2 * m], xb[2 * m:3 * m]
    bad = np.flatnonzero((en + n_in != det) | (det != ex + n_out))
    if bad.size:
        raise ValueError(f"flow violates conservation at detections {bad.tolist()}")
    tracks = []
    for i in np.flatnonzero(en):
        nodes = [int(i)]
        while not ex[nodes[-1]]:
            nodes.append(succ[nodes[-1]])
        tracks.append(Trajectory(id=len(tracks), detections=[graph.detections[k] for k in nodes], indices=nodes))
    return tracks


def track_batch(detections, embeddings, model, cfg: TrackerConfig, indices=None) -> list:
    """First-stage association of one batch; ``indices`` are carried into the tracks."""
    if len(detections) == 0:
        return []
    indices = list(range(len(detections))) if indices is None else list(indices)
    graph = build_graph(detections, cfg.delta, center_distance_gate(cfg.gate_k))
    emb = np.asarray(embeddings)[list(graph.source_index)]
    feats = edge_features(graph, emb)
    cost = assemble_cost(graph, feats, model, cfg.entry_exit_cost)
    sol = solve_flow_exact(cost, graph)
    tracks = extract_tracks(graph, sol.x)
    for t in tracks:
        t.embedding_mean = emb[t.indices].mean(axis=0)
        t.indices = [indices[graph.source_index[k]] for k in t.indices]
    return tracks


def _key(d: Detection):
    return d.frame, d.x, d.y, d.w, d.h


def stitch_batches(tracks_prev, tracks_next, overlap_frames=None) -> list:
    """Merge tracks of consecutive batches that share detections.

    Each next-batch track merges into the previous track with which it shares
    the most detections (ties go to the smaller id); a previous track accepts
    at most one successor. Unmatched next tracks get fresh ids.
    """
    prev = [replace(t, detections=list(t.detections), indices=list(t.indices) if t.indices else None)
            for t in tracks_prev]
    owner = {}
    for pi, t in enumerate(prev):
        for d in t.detections:
            owner[_key(d)] = pi
    candidates = []
    for ni, t in enumerate(tracks_next):
        counts = {}
        for d in t.detections:
            if overlap_frames is not None and d.frame not in overlap_frames:
                continue
            pi = owner.get(_key(d))
            if pi is not None:
                counts[pi] = counts.get(pi, 0) + 1
        for pi, cnt in counts.items():
            candidates.append((-cnt, prev[pi].id, ni, pi))
    candidates.sort()
    used_prev, used_next, pairs = set(), set(), []
    for _, _, ni, pi in candidates:
        if ni in used_next or pi in used_prev:
            continue
        used_prev.add(pi)
        used_next.add(ni)
        pairs.append((pi, ni))
    if len(candidates) > len(pairs):
        logger.debug("stitching resolved %d ambiguous overlap matches", len(candidates) - len(pairs))

    claimed = set()
    for pi, ni in pairs:
        p, nt = prev[pi], tracks_next[ni]
        shared = [d for d in nt.detections if owner.get(_key(d)) == pi]
        f0 = shared[0].frame
        keep = [(d, k) for d, k in zip(p.detections, p.indices or [None] * len(p)) if d.frame < f0]
        tail = [(d, k) for d, k in zip(nt.detections, nt.indices or [None] * len(nt)) if d.frame >= f0]
        merged = keep + tail
        p.detections = [d for d, _ in merged]
        p.indices = [k for _, k in merged] if p.indices is not None else None
        p.embedding_mean = None
        claimed.update(_key(d) for d, _ in tail)

    out = []
    merged_ids = {prev[pi].id for pi, _ in pairs}
    for p in prev:
        if p.id not in merged_ids:
            pairs_ = [(d, k) for d, k in zip(p.detections, p.indices or [None] * len(p)) if _key(d) not in claimed]
            if not pairs_:
                continue
            p.detections = [d for d, _ in pairs_]
            p.indices = [k for _, k in pairs_] if p.indices is not None else None
        out.append(p)
    next_id = max((t.id for t in prev), default=-1) + 1
    for ni, t in enumerate(tracks_next):
        if ni in used_next:
            continue
        items = [(d, k) for d, k in zip(t.detections, t.indices or [None] * len(t)) if _key(d) not in owner]
        if not items:
            continue
        out.append(Trajectory(id=next_id, detections=[d for d, _ in items],
                              indices=[k for _, k in items] if t.indices is not None else None,
                              embedding_mean=t.embedding_mean))
        next_id += 1
    return out


def _mean_embedding(t: Trajectory, embeddings):
    if embeddings is not None and t.indices is not None:
        idx = [k for k in t.indices if k is not None and k >= 0]
        if idx:
            return np.asarray(embeddings)[idx].mean(axis=0)
    if t.embedding_mean is None:
        raise ValueError(f"tracklet {t.id} has no appearance information")
    return np.asarray(t.embedding_mean)


def implied_speed(a: Trajectory, b: Trajectory) -> float:
    """Center displacement from the end of ``a`` to the start of ``b`` per frame, in box heights."""
    da, db = a.detections[-1], b.detections[0]
    (xa, ya), (xb, yb) = da.center, db.center
    gap = db.frame - da.frame
    return float(np.hypot(xb - xa, yb - ya) / gap / (0.5 * (da.h + db.h)))


def second_stage(tracklets, embeddings, cfg: TrackerConfig) -> list:
    """Associate tracklets with a second flow problem over tracklet nodes.

    Transition cost is ``1 - f_a' f_b`` on mean appearance vectors, for
    temporally disjoint pairs within ``second_stage_max_gap`` frames whose
    implied speed does not exceed ``tau_dist``.
    """
    if not tracklets:
        return []
    nodes = sorted(tracklets, key=lambda t: (t.start, t.id))
    feats = [_mean_embedding(t, embeddings) for t in nodes]
    transitions, costs = [], []
    for a, ta in enumerate(nodes):
        for b in range(a + 1, len(nodes)):
            tb = nodes[b]
            gap = tb.start - ta.end
            if gap < 1 or gap > cfg.second_stage_max_gap:
                continue
            if implied_speed(ta, tb) > cfg.tau_dist:
                continue
            transitions.append((a, b))
            costs.append(1.0 - float(feats[a] @ feats[b]))
    graph = FlowGraph(tuple(t.detections[0] for t in nodes), tuple(transitions), tuple(range(len(nodes))))
    k = len(nodes)
    # Every tracklet is trusted, so each node must carry flow. With a node cost of
    # exactly -1 a lone tracklet path costs +1 and a linked pair 1 - cos >= 0, so the
    # free-flow optimum would be empty. A constant coverage bonus larger than any
    # path through one node makes covering all nodes optimal; it shifts every
    # full-coverage objective by the same amount, leaving the linking decision intact.
    bonus = 2.0 * cfg.entry_exit_cost + 3.0
    c = np.concatenate([np.full(k, -1.0 - bonus), np.full(2 * k, cfg.entry_exit_cost),
                        np.asarray(costs, dtype=float)])
    sol = solve_flow_exact(c, graph)
    groups = extract_tracks(graph, sol.x)
    covered = set()
    out = []
    for g in groups:
        members = [nodes[i] for i in g.indices]
        covered.update(g.indices)
        out.append(_join(members))
    # tracklets left out of the flow (never cheaper than the empty flow) stay as they are
    for i, t in enumerate(nodes):
        if i not in covered:
            out.append(_join([t]))
    return sorted(out, key=lambda t: (t.start, t.id))


def _join(members) -> Trajectory:
    dets, idx = [], []
    for t in members:
        dets.extend(t.detections)
        idx.extend(t.indices if t.indices is not None else [-1] * len(t))
    return Trajectory(id=members[0].id, detections=dets, indices=idx)


def interpolate_gaps(track: Trajectory) -> Trajectory:
    """Fill missing frames by linear interpolation of (x, y, w, h); filled boxes have score 0."""
    dets, idx = [], []
    src = track.indices if track.indices is not None else [-1] * len(track)
    for (d0, k0), (d1, _) in zip(zip(track.detections[:-1], src[:-1]), zip(track.detections[1:], src[1:])):
        dets.append(d0)
        idx.append(k0)
        gap = d1.frame - d0.frame
        for s in range(1, gap):
            a = s / gap
            dets.append(Detection(
                frame=d0.frame + s,
                x=(1 - a) * d0.x + a * d1.x, y=(1 - a) * d0.y + a * d1.y,
                w=(1 - a) * d0.w + a * d1.w, h=(1 - a) * d0.h + a * d1.h,
                score=0.0, id=track.id, interpolated=True))
            idx.append(-1)
    dets.append(track.detections[-1])
    idx.append(src[-1])
    return Trajectory(id=track.id, detections=dets, indices=idx, embedding_mean=track.embedding_mean)


@dataclass
class TrackingResult:
    tracks: list
    first_stage: list = field(default_factory=list)


def batch_windows(n_frames: int, length: int, overlap: int) -> list:
    """Half-open windows ``[k*(length-overlap), k*(length-overlap)+length)`` covering ``n_frames``."""
    if n_frames <= 0:
        return []
    stride = length - overlap
    out = []
    start = 0
    while True:
        out.append((start, min(start + length, n_frames)))
        if start + length >= n_frames:
            break
        start += stride
    return out


def track_sequence(detections, embeddings, model, cfg: Optional[TrackerConfig] = None,
                   n_frames: Optional[int] = None) -> TrackingResult:
    """Full pipeline: batches, stitching, optional second stage, interpolation.

    Final ids are renumbered 1..K by (start frame, first detection index).
    """
    cfg = cfg or TrackerConfig()
    detections = list(detections)
    if not detections:
        return TrackingResult([], [])
    if n_frames is None:
        n_frames = max(d.frame for d in detections) + 1
    frames = np.array([d.frame for d in detections])
    tracks = []
    for start, stop in batch_windows(n_frames, cfg.batch_len, cfg.batch_overlap):
        idx = np.flatnonzero((frames >= start) & (frames < stop))
        batch = track_batch([detections[i] for i in idx], np.asarray(embeddings)[idx], model, cfg, indices=idx)
        if not tracks:
            offset = 0
            for t in batch:
                t.id = offset
                offset += 1
            tracks = batch
        else:
            overlap = set(range(start, min(start + cfg.batch_overlap, stop)))
            tracks = stitch_batches(tracks, batch, overlap)
    first = _renumber(tracks)
    final = first
    if cfg.second_stage:
        final = second_stage([replace(t) for t in first], embeddings, cfg)
    if cfg.interpolate:
        final = [interpolate_gaps(t) for t in final]
    return TrackingResult(tracks=_renumber(final), first_stage=first)


def _renumber(tracks) -> list:
    ordered = sorted(tracks, key=lambda t: (t.start, t.indices[0] if t.indices else 0, t.id))
    return [replace(t, id=k + 1) for k, t in enumerate(ordered)]
