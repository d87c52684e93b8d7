"""Online tracking loop over a sliding window of T frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .association import DEFAULT_MAX_SPEED, DEFAULT_TAU, associate, cap_candidates, pair_speeds
from .data import by_frame
from .model import AssociationInput, ModelConfig, aspe_embed, assignment_matrix, normalize_boxes, project_appearance

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    window_T: int = 150
    tau: float = DEFAULT_TAU
    max_speed: float = DEFAULT_MAX_SPEED
    order: str = "match_then_filter"
    max_interp_gap: int | None = None
    max_candidates: int | None = None  # per detection, slowest-moving tracklets first


@dataclass
class Tracklet:
    id: int
    frames: list = field(default_factory=list)
    geoms: list = field(default_factory=list)
    a: list = field(default_factory=list)  # projected appearance per detection
    p: list = field(default_factory=list)  # box embedding per detection
    history: dict = field(default_factory=dict)  # frame -> (x, y, w, h, conf) in pixels

    @property
    def last_matched_frame(self):
        return self.frames[-1]

    def append(self, frame, geom, a, p, box):
        if self.frames and frame <= self.frames[-1]:
            raise ValueError("tracklet frames must increase")
        self.frames.append(frame)
        self.geoms.append(geom)
        self.a.append(a)
        self.p.append(p)
        self.history[frame] = box

    def trim(self, oldest):
        """Drop window entries older than ``oldest`` (history is kept)."""
        k = 0
        while k < len(self.frames) and self.frames[k] < oldest:
            k += 1
        if k:
            del self.frames[:k], self.geoms[:k], self.a[:k], self.p[:k]


@dataclass
class Trajectory:
    id: int
    boxes: dict  # frame -> (x, y, w, h, conf)


class Tracker:
    """Per-sequence tracker state; ``step`` once per frame in increasing order."""

    def __init__(self, params, model_cfg: ModelConfig, cfg: TrackerConfig, image_size):
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.image_size = image_size
        self.active: list[Tracklet] = []
        self.finished: list[Tracklet] = []
        self.next_id = 1
        self.current_frame = None

    def prune(self, frame):
        """Finish tracklets with no detection in the T frames before ``frame``."""
        oldest = frame - self.cfg.window_T
        keep = []
        for trk in self.active:
            trk.trim(oldest)
            (keep if trk.frames else self.finished).append(trk)
        self.active = keep

    def _embed(self, appearance, geom):
        a = project_appearance(self.params, appearance).value
        p = aspe_embed(self.params, geom.astype(a.dtype), self.model_cfg).value
        return a, p

    def _spawn(self, frame, geom, a, p, box):
        trk = Tracklet(self.next_id)
        self.next_id += 1
        trk.append(frame, geom, a, p, box)
        self.active.append(trk)
        return trk.id

    def affinity(self, frame, geom, appearance):
        """Speed mask and (N, M) match probabilities for the active tracklets."""
        active = self.active
        if self.cfg.max_speed <= 0:
            raise ValueError("max_speed must be positive")
        speed = pair_speeds([t.geoms[-1][:2] for t in active], [t.last_matched_frame for t in active], geom[:, :2], frame)
        mask = speed > self.cfg.max_speed
        if self.cfg.max_candidates is not None:
            mask = cap_candidates(mask, speed, self.cfg.max_candidates)
        n, m = mask.shape
        values = np.zeros((n, m))
        pairs = np.argwhere(~mask)
        if len(pairs):
            kmax = max(len(t.frames) for t in active)
            d = self.model_cfg.d
            trk_geom = np.full((n, kmax, 4), 0.5)
            trk_frame = np.zeros((n, kmax))
            valid = np.zeros((n, kmax), dtype=bool)
            trk_a = np.zeros((n, kmax, d))
            trk_p = np.zeros((n, kmax, d))
            for i, t in enumerate(active):
                k = len(t.frames)
                trk_geom[i, :k] = t.geoms
                trk_frame[i, :k] = t.frames
                valid[i, :k] = True
                trk_a[i, :k] = t.a
                trk_p[i, :k] = t.p
            batch = AssociationInput(None, trk_geom, trk_frame, valid, appearance, geom, frame, pairs, trk_a, trk_p)
            values = assignment_matrix(self.params, batch, self.model_cfg)
        return mask, values

    def step(self, frame, boxes, appearance, confs=None):
        """Associate one frame of pixel boxes; returns the id given to each detection."""
        if self.current_frame is not None and frame <= self.current_frame:
            raise ValueError(f"frame {frame} does not follow frame {self.current_frame}")
        self.current_frame = frame
        self.prune(frame)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        m = len(boxes)
        confs = np.ones(m) if confs is None else np.asarray(confs, dtype=np.float64)
        labels = [0] * m
        if m == 0:
            return labels
        appearance = np.asarray(appearance, dtype=np.float64).reshape(m, -1)
        geom = normalize_boxes(boxes, self.image_size)
        a, p = self._embed(appearance, geom)

        matched = set()
        if self.active:
            mask, values = self.affinity(frame, geom, appearance)
            result = associate(values, self.cfg.tau, mask, order=self.cfg.order)
            for i, j in result.pairs:
                trk = self.active[i]
                trk.append(frame, geom[j], a[j], p[j], (*boxes[j], confs[j]))
                labels[j] = trk.id
                matched.add(j)
        for j in range(m):
            if j not in matched:
                labels[j] = self._spawn(frame, geom[j], a[j], p[j], (*boxes[j], confs[j]))
        return labels

    def trajectories(self):
        tracks = sorted(self.finished + self.active, key=lambda t: t.id)
        return [Trajectory(t.id, dict(sorted(t.history.items()))) for t in tracks]


def interpolate_gaps(traj: Trajectory, max_gap=None) -> Trajectory:
    """Linearly fill frames missing between consecutive observations."""
    frames = sorted(traj.boxes)
    out = dict(traj.boxes)
    for f1, f2 in zip(frames, frames[1:]):
        gap = f2 - f1
        if gap <= 1 or (max_gap is not None and gap - 1 > max_gap):
            continue
        b1 = np.asarray(traj.boxes[f1], dtype=np.float64)
        b2 = np.asarray(traj.boxes[f2], dtype=np.float64)
        for f in range(f1 + 1, f2):
            w = (f - f1) / gap
            out[f] = tuple((1 - w) * b1 + w * b2)
    return Trajectory(traj.id, dict(sorted(out.items())))


def run_sequence(detections, provider, params, model_cfg: ModelConfig, cfg: TrackerConfig, image_size, interpolate=True):
    """Track a whole detection stream and return pixel-space trajectories."""
    tracker = Tracker(params, model_cfg, cfg, image_size)
    frames = by_frame(detections)
    for frame in sorted(frames):
        recs = frames[frame]
        boxes = np.array([r.box for r in recs], dtype=np.float64)
        app = np.stack([provider.get(frame, r.box) for r in recs])
        tracker.step(frame, boxes, app, [r.conf for r in recs])
    trajs = tracker.trajectories()
    if interpolate:
        trajs = [interpolate_gaps(t, cfg.max_interp_gap) for t in trajs]
    return trajs
