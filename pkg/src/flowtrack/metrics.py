"""CLEAR-MOT and identity metrics (MOTA, IDF1, IDS, MT, ML, Frag)."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import _iou_giou

MT_THRESHOLD = 0.8
ML_THRESHOLD = 0.2


def _boxes_of(items):
    """Normalise Detections / Trajectories into ``[(frame, id, box)]``."""
    out = []
    for it in items:
        if hasattr(it, "detections"):
            out.extend((d.frame, it.id, d.box) for d in it.detections)
        else:
            out.append((it.frame, it.id, it.box))
    return out


def _by_frame(rows):
    frames = {}
    for f, i, b in rows:
        frames.setdefault(f, []).append((i, b))
    return frames


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.asarray(boxes_a, dtype=float)[:, None, :].transpose(2, 0, 1)
    b = np.asarray(boxes_b, dtype=float)[None, :, :].transpose(2, 0, 1)
    return _iou_giou(a, b)[0]


@dataclass
class MatchState:
    prev: dict = field(default_factory=dict)  # gt id -> pred id matched in the previous frame
    last: dict = field(default_factory=dict)  # gt id -> last pred id ever matched


@dataclass
class FrameMatch:
    matches: dict
    fp: int
    fn: int
    ids: int
    n_gt: int


def match_frame(gt_boxes, pred_boxes, iou_threshold: float = 0.5, carry: MatchState | None = None):
    """One CLEAR-MOT step. Box lists hold ``(id, (x, y, w, h))`` pairs.

    Returns ``(FrameMatch, MatchState)``.
    """
    carry = carry or MatchState()
    gids = [g for g, _ in gt_boxes]
    pids = [p for p, _ in pred_boxes]
    iou = iou_matrix([b for _, b in gt_boxes], [b for _, b in pred_boxes])
    gpos = {g: k for k, g in enumerate(gids)}
    ppos = {p: k for k, p in enumerate(pids)}
    matches = {}
    for g, p in carry.prev.items():
        if g in gpos and p in ppos and iou[gpos[g], ppos[p]] >= iou_threshold:
            matches[g] = p
    free_g = [k for k, g in enumerate(gids) if g not in matches]
    used_p = set(matches.values())
    free_p = [k for k, p in enumerate(pids) if p not in used_p]
    if free_g and free_p:
        sub = iou[np.ix_(free_g, free_p)]
        cost = np.where(sub >= iou_threshold, -sub, 1e6)
        r, c = linear_sum_assignment(cost)
        for a, b in zip(r, c):
            if sub[a, b] >= iou_threshold:
                matches[gids[free_g[a]]] = pids[free_p[b]]
    ids = sum(1 for g, p in matches.items() if g in carry.last and carry.last[g] != p)
    last = dict(carry.last)
    last.update(matches)
    fm = FrameMatch(matches=matches, fp=len(pids) - len(matches), fn=len(gids) - len(matches),
                    ids=ids, n_gt=len(gids))
    return fm, MatchState(prev=dict(matches), last=last)


def mota(fp: int, fn: int, ids: int, n_gt: int) -> float:
    """``1 - (FP + FN + IDS) / GT``; NaN when there is no ground truth."""
    if n_gt == 0:
        return float("nan")
    return 1.0 - (fp + fn + ids) / n_gt


def identity_counts(gt, pred, iou_threshold: float = 0.5):
    """Returns ``(idtp, idfp, idfn, assignment)`` from the optimal gt/pred identity matching."""
    g_rows, p_rows = _boxes_of(gt), _boxes_of(pred)
    gt_ids = sorted({i for _, i, _ in g_rows})
    pr_ids = sorted({i for _, i, _ in p_rows})
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    gidx = {g: k for k, g in enumerate(gt_ids)}
    pidx = {p: k for k, p in enumerate(pr_ids)}
    gf, pf = _by_frame(g_rows), _by_frame(p_rows)
    for f, gs in gf.items():
        ps = pf.get(f)
        if not ps:
            continue
        iou = iou_matrix([b for _, b in gs], [b for _, b in ps])
        hit = iou >= iou_threshold
        for a, b in zip(*np.nonzero(hit)):
            overlap[gidx[gs[a][0]], pidx[ps[b][0]]] += 1
    assignment = {}
    idtp = 0
    if overlap.size:
        r, c = linear_sum_assignment(-overlap)
        for a, b in zip(r, c):
            if overlap[a, b] > 0:
                assignment[gt_ids[a]] = pr_ids[b]
                idtp += int(overlap[a, b])
    return idtp, len(p_rows) - idtp, len(g_rows) - idtp, assignment


def idf1(gt, pred, iou_threshold: float = 0.5) -> float:
    idtp, idfp, idfn, _ = identity_counts(gt, pred, iou_threshold)
    denom = 2 * idtp + idfp + idfn
    if denom == 0:
        return float("nan")
    return 2 * idtp / denom


def mt_ml_frag(gt, correspondences):
    """``correspondences`` maps frame -> {gt id: pred id}. Returns ``(mt, ml, frag, n_tracks)``."""
    rows = _boxes_of(gt)
    frames_of = {}
    for f, i, _ in rows:
        frames_of.setdefault(i, []).append(f)
    mt = ml = frag = 0
    for gid, frames in frames_of.items():
        frames = sorted(frames)
        tracked = [gid in correspondences.get(f, {}) for f in frames]
        cov = sum(tracked) / len(frames)
        if cov >= MT_THRESHOLD:
            mt += 1
        elif cov <= ML_THRESHOLD:
            ml += 1
        seen = False
        lost = False
        for t in tracked:
            if t:
                if seen and lost:
                    frag += 1
                seen, lost = True, False
            elif seen:
                lost = True
    return mt, ml, frag, len(frames_of)


@dataclass
class EvalReport:
    mota: float
    idf1: float
    fp: int
    fn: int
    ids: int
    frag: int
    mt: int
    ml: int
    mt_pct: float
    ml_pct: float
    n_gt: int
    n_gt_tracks: int
    idtp: int
    idfp: int
    idfn: int
    name: str = "sequence"

    def as_row(self) -> dict:
        return asdict(self)


def evaluate(gt, pred, iou_threshold: float = 0.5, name: str = "sequence") -> EvalReport:
    """Evaluate predicted tracks (or id-carrying boxes) against gt boxes."""
    gf, pf = _by_frame(_boxes_of(gt)), _by_frame(_boxes_of(pred))
    state = MatchState()
    fp = fn = ids = n_gt = 0
    corr = {}
    for f in sorted(set(gf) | set(pf)):
        fm, state = match_frame(gf.get(f, []), pf.get(f, []), iou_threshold, state)
        fp += fm.fp
        fn += fm.fn
        ids += fm.ids
        n_gt += fm.n_gt
        corr[f] = fm.matches
    mt, ml, frag, n_tracks = mt_ml_frag(gt, corr)
    idtp, idfp, idfn, _ = identity_counts(gt, pred, iou_threshold)
    denom = 2 * idtp + idfp + idfn
    return EvalReport(
        mota=mota(fp, fn, ids, n_gt),
        idf1=(2 * idtp / denom) if denom else float("nan"),
        fp=fp, fn=fn, ids=ids, frag=frag, mt=mt, ml=ml,
        mt_pct=100.0 * mt / n_tracks if n_tracks else float("nan"),
        ml_pct=100.0 * ml / n_tracks if n_tracks else float("nan"),
        n_gt=n_gt, n_gt_tracks=n_tracks, idtp=idtp, idfp=idfp, idfn=idfn, name=name,
    )


def aggregate(reports) -> EvalReport:
    """Sum counts over sequences and recompute the ratios."""
    s = {k: sum(getattr(r, k) for r in reports)
         for k in ("fp", "fn", "ids", "frag", "mt", "ml", "n_gt", "n_gt_tracks", "idtp", "idfp", "idfn")}
    denom = 2 * s["idtp"] + s["idfp"] + s["idfn"]
    nt = s["n_gt_tracks"]
    return EvalReport(
        mota=mota(s["fp"], s["fn"], s["ids"], s["n_gt"]),
        idf1=(2 * s["idtp"] / denom) if denom else float("nan"),
        mt_pct=100.0 * s["mt"] / nt if nt else float("nan"),
        ml_pct=100.0 * s["ml"] / nt if nt else float("nan"),
        name="OVERALL", **s,
    )


COLUMNS = ("name", "mota", "idf1", "fp", "fn", "ids", "frag", "mt", "ml", "n_gt")


def _cell(v):
    if isinstance(v, float):
        return "undefined" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def format_table(reports) -> str:
    rows = [[_cell(getattr(r, c)) for c in COLUMNS] for r in reports]
    widths = [max(len(c), *(len(r[k]) for r in rows)) for k, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(COLUMNS, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def write_report_csv(reports, path) -> None:
    fields = list(reports[0].as_row()) if reports else list(COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in reports:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.as_row().items()})
