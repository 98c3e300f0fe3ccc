"""MOTChallenge-style file I/O and the synthetic sequence generator.

On disk frames are 1-indexed; in memory they are 0-indexed.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import _iou_giou, normalize_embeddings
from .graph import Detection
from .tracking import Trajectory

logger = logging.getLogger(__name__)

DETECTIONS, GROUND_TRUTH, RESULTS = "detections", "ground_truth", "results"

BOX_HEIGHT_RANGE = (60.0, 120.0)
ASPECT = 0.41
TRUE_SCORE_RANGE = (0.6, 1.0)
FP_SCORE_RANGE = (0.3, 0.7)


@dataclass
class Sequence:
    detections: list  # frame-sorted Detection list, ids absent
    embeddings: np.ndarray  # (len(detections), d), unit rows
    gt: list  # gt boxes with ids
    n_frames: int
    metadata: dict = field(default_factory=dict)

    def gt_tracks(self) -> list:
        return tracks_from_boxes(self.gt)

    def frame_slice(self, start: int, stop: int):
        idx = [i for i, d in enumerate(self.detections) if start <= d.frame < stop]
        return idx


def tracks_from_boxes(boxes) -> list:
    by_id = {}
    for d in boxes:
        by_id.setdefault(d.id, []).append(d)
    return [Trajectory(id=k, detections=sorted(v, key=lambda d: d.frame)) for k, v in sorted(by_id.items())]


# ---------------------------------------------------------------------------
# MOTChallenge CSV


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def read_mot_csv(path, kind: str = DETECTIONS, min_visibility: float = 0.0) -> list:
    """Parse a MOTChallenge CSV into :class:`Detection` records.

    ``kind`` is one of ``detections``, ``ground_truth`` or ``results``.
    Ground-truth rows with a zero "consider" flag, a class other than
    pedestrian (when the class column is present) or visibility below
    ``min_visibility`` are skipped. Detection scores are clipped into [0, 1].
    """
    if kind not in (DETECTIONS, GROUND_TRUTH, RESULTS):
        raise ValueError(f"unknown kind {kind!r}")
    out = []
    n_clipped = 0
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 6:
                raise ValueError(f"{path}:{lineno}: expected at least 6 columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            frame, tid, x, y, w, h = vals[:6]
            if not frame.is_integer() or frame < 1:
                raise ValueError(f"{path}:{lineno}: invalid frame {row[0]!r}")
            if w <= 0 or h <= 0:
                raise ValueError(f"{path}:{lineno}: non-positive box size")
            conf = vals[6] if len(vals) > 6 else 1.0
            if kind == GROUND_TRUTH:
                if len(vals) > 6 and conf == 0:
                    continue
                if len(vals) > 7 and vals[7] > 0 and vals[7] != 1:
                    continue
                if len(vals) > 8 and vals[8] < min_visibility:
                    continue
                score, ident = 1.0, int(tid)
            else:
                if not 0.0 <= conf <= 1.0:
                    n_clipped += 1
                score = min(max(conf, 0.0), 1.0)
                ident = None if kind == DETECTIONS else int(tid)
            out.append(Detection(frame=int(frame) - 1, x=x, y=y, w=w, h=h, score=score, id=ident))
    if n_clipped:
        logger.warning("%s: clipped %d scores into [0, 1]", path, n_clipped)
    return out


def write_results(tracks, path) -> None:
    """Write tracks as ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1``."""
    rows = []
    for t in tracks:
        for d in t.detections:
            rows.append((d.frame, t.id, d))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for frame, tid, d in rows:
            fh.write(",".join([str(frame + 1), str(tid), _fmt(d.x), _fmt(d.y), _fmt(d.w), _fmt(d.h),
                               _fmt(d.score), "-1", "-1", "-1"]) + "\n")


def write_detections(detections, path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(",".join([str(d.frame + 1), "-1", _fmt(d.x), _fmt(d.y), _fmt(d.w), _fmt(d.h),
                               _fmt(d.score), "-1", "-1", "-1"]) + "\n")


def write_ground_truth(gt, path, visibility=None) -> None:
    rows = sorted(range(len(gt)), key=lambda i: (gt[i].frame, gt[i].id))
    with open(path, "w") as fh:
        for i in rows:
            d = gt[i]
            vis = 1.0 if visibility is None else visibility[i]
            fh.write(",".join([str(d.frame + 1), str(d.id), _fmt(d.x), _fmt(d.y), _fmt(d.w), _fmt(d.h),
                               "1", "1", _fmt(vis)]) + "\n")


def write_embeddings(detections, embeddings, path) -> None:
    """``frame,detection_index,v1,...,vd``; the index counts rows within a frame."""
    counter = {}
    with open(path, "w") as fh:
        for d, v in zip(detections, np.asarray(embeddings)):
            k = counter.get(d.frame, 0)
            counter[d.frame] = k + 1
            fh.write(",".join([str(d.frame + 1), str(k)] + [repr(float(a)) for a in v]) + "\n")


def read_embeddings(path, detections) -> np.ndarray:
    """Embeddings aligned with ``detections`` (in file order per frame), L2-normalised."""
    table = {}
    dim = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                frame, k = int(row[0]), int(row[1])
                vec = [float(a) for a in row[2:]]
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed embedding row") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} components, got {len(vec)}")
            table[(frame - 1, k)] = vec
    counter = {}
    rows = []
    for d in detections:
        k = counter.get(d.frame, 0)
        counter[d.frame] = k + 1
        if (d.frame, k) not in table:
            raise ValueError(f"{path}: no embedding for frame {d.frame + 1}, detection {k}")
        rows.append(table[(d.frame, k)])
    if not rows:
        return np.zeros((0, dim or 0))
    return normalize_embeddings(np.array(rows))


def write_sequence(seq: Sequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_detections(seq.detections, d / "det.txt")
    write_ground_truth(seq.gt, d / "gt.txt", seq.metadata.get("visibility"))
    write_embeddings(seq.detections, seq.embeddings, d / "emb.csv")
    info = {"n_frames": seq.n_frames, "name": seq.metadata.get("name", d.name)}
    if "seed" in seq.metadata:
        info["seed"] = seq.metadata["seed"]
    (d / "seqinfo.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def read_sequence(directory, min_visibility: float = 0.0) -> Sequence:
    d = Path(directory)
    dets = read_mot_csv(d / "det.txt", DETECTIONS)
    order = sorted(range(len(dets)), key=lambda i: dets[i].frame)
    emb = read_embeddings(d / "emb.csv", dets)
    gt = read_mot_csv(d / "gt.txt", GROUND_TRUTH, min_visibility) if (d / "gt.txt").exists() else []
    frames = [x.frame for x in dets] + [x.frame for x in gt]
    n_frames = (max(frames) + 1) if frames else 0
    meta = {"source": str(d), "name": d.name}
    if (d / "seqinfo.json").exists():
        info = json.loads((d / "seqinfo.json").read_text())
        n_frames = max(n_frames, int(info.get("n_frames", 0)))
        meta.update(info)
    return Sequence(
        detections=[dets[i] for i in order],
        embeddings=emb[order] if len(order) else emb,
        gt=gt,
        n_frames=n_frames,
        metadata=meta,
    )


def label_detections(detections, gt, iou_threshold: float = 0.5) -> list:
    """Give each detection the identity of its IoU-matched gt box (per frame).

    Unmatched detections (false positives) keep ``id=None``.
    """
    by_frame_gt = {}
    for g in gt:
        by_frame_gt.setdefault(g.frame, []).append(g)
    by_frame_det = {}
    for i, d in enumerate(detections):
        by_frame_det.setdefault(d.frame, []).append(i)
    out = [Detection(d.frame, d.x, d.y, d.w, d.h, d.score, None, d.interpolated) for d in detections]
    for f, idx in by_frame_det.items():
        gts = by_frame_gt.get(f)
        if not gts:
            continue
        db = np.array([detections[i].box for i in idx], dtype=float)
        gb = np.array([g.box for g in gts], dtype=float)
        iou, _ = _iou_giou(db[:, None, :].transpose(2, 0, 1), gb[None, :, :].transpose(2, 0, 1))
        cost = np.where(iou >= iou_threshold, -iou, 1e6)
        r, c = linear_sum_assignment(cost)
        for a, b in zip(r, c):
            if iou[a, b] >= iou_threshold:
                d = out[idx[a]]
                out[idx[a]] = Detection(d.frame, d.x, d.y, d.w, d.h, d.score, gts[b].id, d.interpolated)
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_objects: int = 10
    n_frames: int = 100
    image_w: int = 960
    image_h: int = 540
    speed_range: tuple = (0.005, 0.03)
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    pos_noise: float = 0.0
    embed_dim: int = 16
    embed_noise: float = 0.0
    occlusion_events: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.speed_range = tuple(float(v) for v in self.speed_range)
        self.occlusion_events = [tuple(int(v) for v in ev) for ev in self.occlusion_events]
        for name in ("n_objects", "n_frames", "image_w", "image_h", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("miss_rate", "fp_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pos_noise < 0 or self.embed_noise < 0:
            raise ValueError("noise levels must be >= 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")


def _anchors(n, dim, rng):
    if n <= 2 * dim:
        basis = np.vstack([np.eye(dim), -np.eye(dim)])[:n]
        rot, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return basis @ rot.T
    return normalize_embeddings(rng.normal(size=(n, dim)))


def synth_generate(cfg: SyntheticConfig) -> Sequence:
    """Constant-velocity objects with boundary reflection, noisy detections and embeddings."""
    rng = np.random.default_rng(cfg.seed)
    W, H = float(cfg.image_w), float(cfg.image_h)
    n, T = cfg.n_objects, cfg.n_frames
    heights = rng.uniform(*BOX_HEIGHT_RANGE, size=n)
    heights = np.minimum(heights, 0.9 * H)
    widths = np.minimum(ASPECT * heights, 0.9 * W)
    pos = np.column_stack([rng.uniform(0, W - widths), rng.uniform(0, H - heights)])
    angle = rng.uniform(0, 2 * np.pi, size=n)
    speed = rng.uniform(*cfg.speed_range, size=n) * heights
    vel = np.column_stack([np.cos(angle), np.sin(angle)]) * speed[:, None]
    anchors = _anchors(n, cfg.embed_dim, rng)

    occluded = set()
    for obj, start, length in cfg.occlusion_events:
        for f in range(start, start + length):
            occluded.add((obj, f))

    gt, visibility, dets, embs = [], [], [], []
    for f in range(T):
        frame_dets, frame_embs = [], []
        for k in range(n):
            x, y = pos[k]
            g = Detection(frame=f, x=float(x), y=float(y), w=float(widths[k]), h=float(heights[k]), id=k + 1)
            gt.append(g)
            hidden = (k, f) in occluded
            visibility.append(0.0 if hidden else 1.0)
            jitter = rng.normal(0.0, cfg.pos_noise, size=4) if cfg.pos_noise > 0 else np.zeros(4)
            dropped = rng.random() < cfg.miss_rate
            score = float(rng.uniform(*TRUE_SCORE_RANGE))
            noise = rng.normal(0.0, cfg.embed_noise, size=cfg.embed_dim) if cfg.embed_noise > 0 else 0.0
            if hidden or dropped:
                continue
            e = anchors[k] + noise
            frame_dets.append(Detection(
                frame=f, x=float(x + jitter[0]), y=float(y + jitter[1]),
                w=float(max(widths[k] + jitter[2], 1.0)), h=float(max(heights[k] + jitter[3], 1.0)),
                score=score))
            frame_embs.append(e / np.linalg.norm(e))
        for _ in range(rng.poisson(cfg.fp_rate) if cfg.fp_rate > 0 else 0):
            h = float(rng.uniform(*BOX_HEIGHT_RANGE))
            h = min(h, 0.9 * H)
            w = min(ASPECT * h, 0.9 * W)
            frame_dets.append(Detection(frame=f, x=float(rng.uniform(0, W - w)), y=float(rng.uniform(0, H - h)),
                                        w=w, h=h, score=float(rng.uniform(*FP_SCORE_RANGE))))
            e = rng.normal(size=cfg.embed_dim)
            frame_embs.append(e / np.linalg.norm(e))
        perm = rng.permutation(len(frame_dets))
        dets.extend(frame_dets[i] for i in perm)
        embs.extend(frame_embs[i] for i in perm)

        pos = pos + vel
        for k in range(n):
            for ax, lim in ((0, W - widths[k]), (1, H - heights[k])):
                if pos[k, ax] < 0:
                    pos[k, ax] = -pos[k, ax]
                    vel[k, ax] = -vel[k, ax]
                elif pos[k, ax] > lim:
                    pos[k, ax] = 2 * lim - pos[k, ax]
                    vel[k, ax] = -vel[k, ax]

    emb = np.array(embs) if embs else np.zeros((0, cfg.embed_dim))
    return Sequence(detections=dets, embeddings=emb, gt=gt, n_frames=T,
                    metadata={"seed": cfg.seed, "visibility": visibility})


def synth_dataset(cfg: SyntheticConfig, n_sequences: int) -> list:
    """``n_sequences`` independent sequences with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    out = []
    for k in range(n_sequences):
        c = SyntheticConfig(**{**cfg.__dict__, "seed": cfg.seed + k})
        out.append(synth_generate(c))
    return out


def split_train_val(items, val_fraction: float = 0.2, val_names: Optional[list] = None):
    """Last ``val_fraction`` of ``items`` (at least one if any) form the validation set."""
    items = list(items)
    if val_names is not None:
        val = [s for s in items if s.metadata.get("name") in val_names]
        train = [s for s in items if s.metadata.get("name") not in val_names]
        return train, val
    if len(items) < 2 or val_fraction <= 0:
        return items, []
    n_val = max(1, int(round(val_fraction * len(items))))
    return items[:-n_val], items[-n_val:]
