"""Supervised training of the association model on labeled detection windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .association import hungarian, speed_filter
from .data import by_frame
from .model import (
    AssociationInput,
    ModelConfig,
    forward,
    frozen_blocks,
    init_params,
    normalize_boxes,
    save_checkpoint,
)

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    samples_per_epoch: int = 200
    negative_ratio: float = 1.0
    drop_prob: float = 0.1
    truncate_prob: float = 0.2
    distractor_prob: float = 0.5
    max_speed: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------------ labels


def iou(box_a, box_b):
    """Intersection over union of two (left, top, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def replace_gt_with_detections(gt, detections, iou_min=0.5):
    """Give each detector box the id of its IoU-matched ground truth box (0 if none).

    Matching is per frame, optimal on ``1 - IoU``, keeping pairs with
    IoU >= ``iou_min``. Returns new records in input order.
    """
    if not 0 < iou_min < 1:
        raise ValueError("iou_min must lie in (0, 1)")
    gt_frames = by_frame(gt)
    out = []
    for frame, dets in sorted(by_frame(detections).items()):
        labels = [0] * len(dets)
        truth = gt_frames.get(frame, [])
        if truth:
            ious = iou_matrix([g.box for g in truth], [d.box for d in dets])
            for r, c in hungarian(1.0 - ious, ious < iou_min):
                labels[c] = truth[r].id
        out.extend(replace(d, id=label) for d, label in zip(dets, labels))
    return out


@dataclass
class LabeledSequence:
    """Detections with identities (0 = distractor) and appearance, indexed by frame."""

    frames: dict  # frame -> (boxes (M,4) px, ids (M,), appearance (M,A))
    image_size: tuple
    first: int
    last: int

    @classmethod
    def build(cls, labeled_records, provider, image_size):
        frames = {}
        for frame, recs in by_frame(labeled_records).items():
            boxes = np.array([r.box for r in recs], dtype=np.float64)
            ids = np.array([r.id for r in recs], dtype=np.int64)
            app = np.stack([provider.get(frame, r.box) for r in recs]).astype(np.float64)
            frames[frame] = (boxes, ids, app)
        return cls(frames, image_size, min(frames), max(frames))

    def _frame(self, f, dim):
        return self.frames.get(f, (np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros((0, dim))))


@dataclass
class TrainingSample:
    batch: AssociationInput
    gt: np.ndarray  # (N, M) in {0, 1}
    track_ids: list
    loss_mask: np.ndarray | None = None
    pair_mask: np.ndarray | None = None  # speed-filtered pairs (True = not queried)
    extras: dict = field(default_factory=dict)


def _appearance_dim(seq):
    return next(iter(seq.frames.values()))[2].shape[1]


def sample_window(seq: LabeledSequence, T, start=None, rng=None, keep_distractors=True):
    """Tracklets from frames ``start .. start+T-1`` and detections at ``start+T``.

    With ``keep_distractors`` every unlabeled detection in the window also
    becomes a one-detection tracklet (negative track id, all-zero gt row),
    as it would online, and unlabeled detections stay in the current frame.
    """
    if seq.last - seq.first < T:
        raise ValueError(f"sequence of {seq.last - seq.first + 1} frames is shorter than T+1={T + 1}")
    if start is None:
        rng = rng or np.random.default_rng()
        start = int(rng.integers(seq.first, seq.last - T + 1))
    dim = _appearance_dim(seq)
    tracks = {}
    n_fp = 0
    for f in range(start, start + T):
        boxes, ids, app = seq._frame(f, dim)
        for box, ident, vec in zip(boxes, ids, app):
            if ident > 0:
                tracks.setdefault(int(ident), []).append((f, box, vec))
            elif keep_distractors:
                n_fp += 1
                tracks[-n_fp] = [(f, box, vec)]
    track_ids = sorted(t for t in tracks if t > 0) + sorted(t for t in tracks if t < 0)
    now = start + T
    boxes, ids, app = seq._frame(now, dim)
    if not keep_distractors:
        keep = ids > 0
        boxes, ids, app = boxes[keep], ids[keep], app[keep]

    n = len(track_ids)
    kmax = max((len(tracks[i]) for i in track_ids), default=1)
    trk_geom = np.full((n, kmax, 4), 0.5)
    trk_frame = np.zeros((n, kmax))
    trk_app = np.zeros((n, kmax, dim))
    valid = np.zeros((n, kmax), dtype=bool)
    for r, ident in enumerate(track_ids):
        obs = tracks[ident]
        k = len(obs)
        trk_frame[r, :k] = [o[0] for o in obs]
        trk_geom[r, :k] = normalize_boxes([o[1] for o in obs], seq.image_size)
        trk_app[r, :k] = [o[2] for o in obs]
        valid[r, :k] = True
    det_geom = normalize_boxes(boxes, seq.image_size)
    gt = (np.array(track_ids)[:, None] == ids[None, :]).astype(np.float64) if n else np.zeros((0, len(ids)))
    batch = AssociationInput(trk_app, trk_geom, trk_frame, valid, app, det_geom, now)
    return TrainingSample(batch, gt, track_ids)


def augment_drop(sample: TrainingSample, drop_prob, rng):
    """Remove tracklet detections at random, keeping at least one per tracklet."""
    if not 0 <= drop_prob < 1:
        raise ValueError("drop_prob must lie in [0, 1)")
    if drop_prob == 0:
        return sample
    b = sample.batch
    valid = b.trk_valid.copy()
    keep = valid & (rng.random(valid.shape) >= drop_prob)
    for i in range(valid.shape[0]):
        if not keep[i].any():
            keep[i, np.flatnonzero(valid[i])[-1]] = True
    return _compact(sample, keep)


def augment_truncate(sample: TrainingSample, prob, rng):
    """Cut tracklets to a random suffix so young tracklets are seen in training."""
    if not 0 <= prob <= 1:
        raise ValueError("truncate_prob must lie in [0, 1]")
    if prob == 0:
        return sample
    b = sample.batch
    valid = b.trk_valid.copy()
    for i in range(valid.shape[0]):
        idx = np.flatnonzero(valid[i])
        if len(idx) > 1 and rng.random() < prob:
            valid[i, idx[: len(idx) - int(rng.integers(1, len(idx) + 1))]] = False
    return _compact(sample, valid)


def _compact(sample: TrainingSample, keep):
    """Keep the flagged tracklet entries, moved to the front in time order."""
    b = sample.batch
    n = keep.shape[0]
    k_new = max(int(keep.sum(axis=1).max()), 1) if n else 1
    app = np.zeros((n, k_new, b.trk_appearance.shape[-1]))
    geom = np.full((n, k_new, 4), 0.5)
    frames = np.zeros((n, k_new))
    new_valid = np.zeros((n, k_new), dtype=bool)
    for i in range(n):
        idx = np.flatnonzero(keep[i])
        app[i, :len(idx)] = b.trk_appearance[i, idx]
        geom[i, :len(idx)] = b.trk_geom[i, idx]
        frames[i, :len(idx)] = b.trk_frame[i, idx]
        new_valid[i, :len(idx)] = True
    batch = replace(b, trk_appearance=app, trk_geom=geom, trk_frame=frames, trk_valid=new_valid)
    return replace(sample, batch=batch)


def downsample_negatives(gt, ratio=1.0, rng=None, candidates=None):
    """Loss mask with every positive and about ``ratio`` negatives per positive.

    ``candidates`` optionally restricts which pairs may be used at all.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    rng = rng or np.random.default_rng()
    gt = np.asarray(gt)
    allowed = np.ones(gt.shape, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    pos = (gt > 0) & allowed
    neg_idx = np.flatnonzero(((gt == 0) & allowed).ravel())
    n_pos = int(pos.sum())
    want = min(len(neg_idx), math.ceil(ratio * n_pos)) if n_pos else min(len(neg_idx), 1)
    mask = pos.copy()
    if want:
        chosen = rng.choice(neg_idx, size=want, replace=False)
        mask.ravel()[chosen] = True
    return mask


def bce_loss(A, gt, mask):
    """Mean binary cross-entropy over the entries selected by ``mask``.

    ``A`` holds match probabilities (node or array) aligned with ``gt``
    and ``mask``; probabilities are clamped to [1e-7, 1 - 1e-7].
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss mask selects no entries")
    A = A if isinstance(A, ad.Node) else ad.constant(np.asarray(A, dtype=np.float64))
    idx = np.flatnonzero(mask.ravel())
    a = ad.take(ad.reshape(A, (-1,)), idx)
    g = np.asarray(gt, dtype=a.value.dtype).ravel()[idx]
    a = ad.clip(a, EPS, 1 - EPS)
    ll = ad.add(ad.multiply(g, ad.log(a)), ad.multiply(1 - g, ad.log(ad.subtract(1.0, a))))
    return ad.scale(ad.sum(ll), -1.0 / len(idx))


# ------------------------------------------------------------------ optimization


def prepare_sample(sample: TrainingSample, opt: OptimizerConfig, rng):
    """Attach speed-filter pairs and the negative-downsampled loss mask."""
    b = sample.batch
    n, m = sample.gt.shape
    if opt.max_speed is not None and n and m:
        last = b.trk_valid.sum(axis=1) - 1
        rows = np.arange(n)
        pair_mask = speed_filter(b.trk_geom[rows, last, :2], b.trk_frame[rows, last], b.det_geom[:, :2], b.frame, opt.max_speed)
    else:
        pair_mask = np.zeros((n, m), dtype=bool)
    loss_mask = downsample_negatives(sample.gt, opt.negative_ratio, rng, ~pair_mask) if (~pair_mask).any() else None
    batch = replace(b, pairs=np.argwhere(~pair_mask))
    return replace(sample, batch=batch, loss_mask=loss_mask, pair_mask=pair_mask)


def sample_loss(params, sample: TrainingSample, cfg: ModelConfig):
    """Loss node for one prepared sample (None when it has nothing to learn from)."""
    if sample.loss_mask is None:
        return None
    pairs = sample.batch.all_pairs()
    probs = forward(params, sample.batch, cfg)
    match = ad.getitem(probs, (slice(None), 1))
    sel = sample.loss_mask[pairs[:, 0], pairs[:, 1]]
    return bce_loss(match, sample.gt[pairs[:, 0], pairs[:, 1]], sel)


def sgd_step(params, grads, velocity, opt: OptimizerConfig, frozen=()):
    """Momentum SGD with L2 weight decay folded into the gradient, in place."""
    for name, g in grads.items():
        if name in frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        v = velocity.get(name)
        step = g + opt.weight_decay * p
        v = step if v is None else opt.momentum * v + step
        velocity[name] = v
        params[name] = (p - opt.learning_rate * v).astype(p.dtype)
    return params


def train(sequences, model_cfg: ModelConfig, opt: OptimizerConfig, seed=0, out_dir=None, params=None, progress=None):
    """Train on a list of :class:`LabeledSequence`; returns (params, loss curve).

    The loss curve is a list of (epoch, step, loss) rows.
    """
    if not sequences:
        raise ValueError("training needs at least one sequence")
    rng = np.random.default_rng(seed)
    params = init_params(model_cfg, seed) if params is None else {k: v.copy() for k, v in params.items()}
    frozen = frozen_blocks(model_cfg)
    velocity = {}
    curve = []
    T = model_cfg.window_T
    usable = [s for s in sequences if s.last - s.first >= T]
    if not usable:
        raise ValueError("no sequence is longer than the temporal window")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(opt.epochs):
        n_batches = max(1, opt.samples_per_epoch // opt.batch_size)
        for _ in range(n_batches):
            losses = []
            leaves = {k: ad.parameter(v) if k not in frozen else ad.constant(v) for k, v in params.items()}
            for _ in range(opt.batch_size):
                seq = usable[int(rng.integers(len(usable)))]
                sample = sample_window(seq, T, rng=rng, keep_distractors=rng.random() < opt.distractor_prob)
                if sample.gt.shape[0] == 0 or sample.gt.shape[1] == 0:
                    continue
                sample = augment_truncate(augment_drop(sample, opt.drop_prob, rng), opt.truncate_prob, rng)
                sample = prepare_sample(sample, opt, rng)
                loss = sample_loss(leaves, sample, model_cfg)
                if loss is not None:
                    losses.append(loss)
            if not losses:
                continue
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.scale(total, 1.0 / len(losses))
            ad.backward(total)
            grads = {k: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                     for k, leaf in leaves.items() if k not in frozen}
            sgd_step(params, grads, velocity, opt, frozen)
            curve.append((epoch, step, float(total.value)))
            step += 1
        if progress:
            progress(epoch, curve)
        if out:
            save_checkpoint(out / f"epoch{epoch + 1:03d}.ckpt", params, model_cfg)
    if out:
        write_loss_curve(curve, out / "loss.csv")
    return params, curve


def write_loss_curve(curve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        writer.writerows(curve)
