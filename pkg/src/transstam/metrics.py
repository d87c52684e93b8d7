"""CLEAR-MOT counts and identity F1 against ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .association import hungarian
from .data import MotRecord, by_frame
from .training import iou_matrix


@dataclass
class EvalReport:
    name: str
    MOTA: float
    IDF1: float
    FP: int
    FN: int
    IDs: int
    GT: int
    MT: int
    ML: int
    IDTP: int = 0
    IDFP: int = 0
    IDFN: int = 0

    def row(self):
        return asdict(self)


def _records(items):
    """Accept MOT records or trajectories (objects with ``id`` and ``boxes``)."""
    out = []
    for item in items:
        if isinstance(item, MotRecord):
            out.append(item)
        else:
            for frame, box in item.boxes.items():
                out.append(MotRecord(frame, item.id, *box[:4]))
    return out


def clear_mot(gt, predictions, iou_min=0.5):
    """FP, FN, IDs, MT, ML, MOTA and GT count as a dict."""
    gt = _records(gt)
    predictions = _records(predictions)
    gt_frames, pred_frames = by_frame(gt), by_frame(predictions)
    fp = fn = switches = 0
    last_match = {}  # gt id -> pred id it was last matched to
    current = {}  # gt id -> pred id matched in the previous frame
    tracked, lifespan = {}, {}
    for frame in sorted(set(gt_frames) | set(pred_frames)):
        gts = gt_frames.get(frame, [])
        preds = pred_frames.get(frame, [])
        for g in gts:
            lifespan[g.id] = lifespan.get(g.id, 0) + 1
        ious = iou_matrix([g.box for g in gts], [p.box for p in preds]) if gts and preds else np.zeros((len(gts), len(preds)))
        pairs = []
        used_g, used_p = set(), set()
        pred_index = {p.id: j for j, p in enumerate(preds)}
        for i, g in enumerate(gts):
            j = pred_index.get(current.get(g.id))
            if j is not None and j not in used_p and ious[i, j] >= iou_min:
                pairs.append((i, j))
                used_g.add(i)
                used_p.add(j)
        rest_g = [i for i in range(len(gts)) if i not in used_g]
        rest_p = [j for j in range(len(preds)) if j not in used_p]
        if rest_g and rest_p:
            sub = ious[np.ix_(rest_g, rest_p)]
            pairs += [(rest_g[r], rest_p[c]) for r, c in hungarian(1.0 - sub, sub < iou_min)]
        current = {}
        for i, j in pairs:
            gid, pid = gts[i].id, preds[j].id
            if gid in last_match and last_match[gid] != pid:
                switches += 1
            last_match[gid] = pid
            current[gid] = pid
            tracked[gid] = tracked.get(gid, 0) + 1
        fp += len(preds) - len(pairs)
        fn += len(gts) - len(pairs)
    n_gt = len(gt)
    ratios = [tracked.get(g, 0) / n for g, n in lifespan.items()]
    return {
        "FP": fp,
        "FN": fn,
        "IDs": switches,
        "GT": n_gt,
        "MT": sum(r >= 0.8 for r in ratios),
        "ML": sum(r <= 0.2 for r in ratios),
        "MOTA": 1.0 - (fp + fn + switches) / n_gt if n_gt else float("nan"),
    }


def idf1(gt, predictions, iou_min=0.5):
    """Identity F1 under the best one-to-one gt/prediction trajectory matching."""
    gt = _records(gt)
    predictions = _records(predictions)
    gt_ids = sorted({g.id for g in gt})
    pred_ids = sorted({p.id for p in predictions})
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pred_ids)}
    overlap = np.zeros((len(gt_ids), len(pred_ids)))
    pred_frames = by_frame(predictions)
    for frame, gts in by_frame(gt).items():
        preds = pred_frames.get(frame, [])
        if not preds:
            continue
        ious = iou_matrix([g.box for g in gts], [p.box for p in preds])
        for i, j in zip(*np.nonzero(ious >= iou_min)):
            overlap[gi[gts[i].id], pi[preds[j].id]] += 1
    idtp = 0
    cols = np.flatnonzero(overlap.any(axis=0))
    if len(cols):
        sub = overlap[:, cols]
        idtp = int(sum(sub[r, c] for r, c in hungarian(-sub)))
    idfp = len(predictions) - idtp
    idfn = len(gt) - idtp
    denom = 2 * idtp + idfp + idfn
    return {"IDF1": 2 * idtp / denom if denom else 0.0, "IDTP": idtp, "IDFP": idfp, "IDFN": idfn}


def evaluate(gt, predictions, name="seq", iou_min=0.5) -> EvalReport:
    mot = clear_mot(gt, predictions, iou_min)
    ident = idf1(gt, predictions, iou_min)
    return EvalReport(name, mot["MOTA"], ident["IDF1"], mot["FP"], mot["FN"], mot["IDs"], mot["GT"],
                      mot["MT"], mot["ML"], ident["IDTP"], ident["IDFP"], ident["IDFN"])


def aggregate(reports, name="OVERALL") -> EvalReport:
    """Pool counts over sequences (MOTA and IDF1 recomputed from the sums)."""
    s = {k: sum(getattr(r, k) for r in reports) for k in ("FP", "FN", "IDs", "GT", "MT", "ML", "IDTP", "IDFP", "IDFN")}
    mota = 1.0 - (s["FP"] + s["FN"] + s["IDs"]) / s["GT"] if s["GT"] else float("nan")
    denom = 2 * s["IDTP"] + s["IDFP"] + s["IDFN"]
    return EvalReport(name, mota, 2 * s["IDTP"] / denom if denom else 0.0, **s)


COLUMNS = ("name", "MOTA", "IDF1", "FP", "FN", "IDs", "GT", "MT", "ML")


def format_table(reports):
    rows = [[r.name, f"{100 * r.MOTA:.1f}", f"{100 * r.IDF1:.1f}"] + [str(getattr(r, c)) for c in COLUMNS[3:]] for r in reports]
    widths = [max(len(c), *(len(row[k]) for row in rows)) for k, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(COLUMNS, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def to_csv(reports):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(EvalReport.__dataclass_fields__))
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()
