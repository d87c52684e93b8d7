"""MOTChallenge text files, appearance sidecars and synthetic sequences."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


@dataclass
class SequenceMeta:
    name: str
    width: int
    height: int
    frames: int
    frame_rate: float = 30.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.frames <= 0:
            raise ValueError("sequence width, height and frame count must be positive")

    @property
    def image_size(self):
        return (self.width, self.height)


@dataclass
class MotRecord:
    frame: int
    id: int
    x: float
    y: float
    w: float
    h: float
    conf: float = 1.0
    extra: tuple = ()

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


# ------------------------------------------------------------------ CSV


def parse_mot_csv(path, kind="det"):
    """Read ``frame,id,x,y,w,h,conf,...`` rows (pixel units, top-left boxes).

    Detection files carry id -1. Rows with non-positive width or height are
    skipped with a warning; malformed rows raise :class:`ParseError`.
    """
    if kind not in ("det", "gt"):
        raise ValueError(f"kind must be 'det' or 'gt', got {kind!r}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = [s.strip() for s in line.split(",")]
            try:
                if len(fields) < 6:
                    raise ValueError("expected at least 6 fields")
                frame = int(float(fields[0]))
                ident = int(float(fields[1]))
                x, y, w, h = (float(v) for v in fields[2:6])
                conf = float(fields[6]) if len(fields) > 6 else 1.0
                extra = tuple(float(v) for v in fields[7:])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if w <= 0 or h <= 0:
                log.warning("%s:%d: skipping box with non-positive size", path, lineno)
                continue
            if kind == "det":
                ident = -1
            records.append(MotRecord(frame, ident, x, y, w, h, conf, extra))
    return records


def by_frame(records):
    frames = {}
    for r in records:
        frames.setdefault(r.frame, []).append(r)
    return frames


def write_results(trajectories, path):
    """Write ``frame,id,x,y,w,h,conf,-1,-1,-1`` rows sorted by frame then id."""
    rows = []
    for traj in trajectories:
        for frame, box in traj.boxes.items():
            x, y, w, h, conf = box
            rows.append((frame, traj.id, x, y, w, h, conf))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for frame, ident, x, y, w, h, conf in rows:
            fh.write(f"{frame},{ident},{x:.3f},{y:.3f},{w:.3f},{h:.3f},{conf:.4f},-1,-1,-1\n")


def write_records(records, path):
    with open(path, "w") as fh:
        for r in sorted(records, key=lambda r: (r.frame, r.id)):
            tail = "".join(f",{v:g}" for v in r.extra) if r.extra else ",-1,-1,-1"
            fh.write(f"{r.frame},{r.id},{r.x:.3f},{r.y:.3f},{r.w:.3f},{r.h:.3f},{r.conf:.4f}{tail}\n")


# ------------------------------------------------------------------ appearance

SIDECAR_MAGIC = b"TSAP"
SIDECAR_VERSION = 1
QUANT = 10.0  # sidecar keys are pixel boxes rounded to 0.1 px


def box_key(frame, box):
    return (int(frame),) + tuple(int(round(v * QUANT)) for v in box)


@dataclass
class AppearanceProvider:
    """Appearance vectors looked up by (frame, pixel box).

    ``precomputed`` mode reads a table. ``synthetic`` mode draws
    ``base[identity] + noise`` on demand from ``labels``. Identity 0 marks
    a false positive, which gets a fresh random unit direction plus noise:
    it carries no identity but has the norm of a real feature.
    """

    dim: int
    mode: str = "precomputed"
    table: dict = field(default_factory=dict)
    bases: np.ndarray | None = None
    labels: dict = field(default_factory=dict)
    noise: float = 0.0
    seed: int = 0

    def get(self, frame, box):
        key = box_key(frame, box)
        if self.mode == "precomputed":
            try:
                return self.table[key]
            except KeyError:
                raise KeyError(f"no appearance stored for frame {frame} box {tuple(box)}") from None
        ident = self.labels.get(key, 0)
        rng = np.random.default_rng([self.seed, *[k & 0x7FFFFFFF for k in key]])
        if ident == 0:
            base = rng.standard_normal(self.dim)
            base /= np.linalg.norm(base)
        else:
            base = self.bases[ident]
        return (base + self.noise * rng.standard_normal(self.dim)).astype(np.float32)

    def to_precomputed(self, records):
        table = {box_key(r.frame, r.box): self.get(r.frame, r.box) for r in records}
        return AppearanceProvider(self.dim, "precomputed", table)


def get_appearance(provider, frame, box):
    return provider.get(frame, box)


def save_sidecar(provider, path):
    """Layout: magic ``TSAP``, version byte, uint32 dim, uint32 rows, then per
    row int32 frame, 4 x int32 box in 0.1 px units, dim x float32 (little endian)."""
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<BII", SIDECAR_VERSION, provider.dim, len(provider.table)))
        for key in sorted(provider.table):
            fh.write(struct.pack("<5i", *key))
            fh.write(np.asarray(provider.table[key], dtype="<f4").tobytes())


def load_sidecar(path):
    with open(path, "rb") as fh:
        if fh.read(4) != SIDECAR_MAGIC:
            raise ValueError(f"{path} is not an appearance sidecar")
        version, dim, rows = struct.unpack("<BII", fh.read(9))
        if version != SIDECAR_VERSION:
            raise ValueError(f"unsupported sidecar version {version}")
        table = {}
        for _ in range(rows):
            key = struct.unpack("<5i", fh.read(20))
            table[key] = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float32)
    return AppearanceProvider(dim, "precomputed", table)


# ------------------------------------------------------------------ synthetic data


@dataclass
class SynthSpec:
    objects: int = 20
    frames: int = 300
    width: int = 1920
    height: int = 1080
    box_width: tuple = (40.0, 90.0)
    aspect: tuple = (2.0, 3.0)
    speed: tuple = (1.0, 6.0)
    motion_noise: float = 0.5
    jitter: float = 0.02
    drop_rate: float = 0.1
    fp_rate: float = 0.05
    occlusion_bursts: float = 1.0
    burst_length: tuple = (5, 20)
    appearance_dim: int = 16
    appearance_noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.frames < 2 or self.objects < 1:
            raise ValueError("synthetic sequence needs at least 2 frames and 1 object")
        for name in ("drop_rate", "fp_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.width <= 0 or self.height <= 0 or self.appearance_dim < 1:
            raise ValueError("degenerate image size or appearance width")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


@dataclass
class SyntheticSequence:
    meta: SequenceMeta
    gt: list
    detections: list
    appearance: AppearanceProvider
    labels: dict  # box_key -> true identity of each detection (0 = false positive)


def _round_box(box):
    # written files keep 3 decimals; rounding here makes keys survive a round trip
    return tuple(round(float(v), 3) for v in box)


def synth_generate(spec: SynthSpec) -> SyntheticSequence:
    """Constant-velocity objects reflecting at the borders, observed by a noisy detector."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    W, H = spec.width, spec.height
    n, T = spec.objects, spec.frames

    w = rng.uniform(*spec.box_width, size=n)
    h = w * rng.uniform(*spec.aspect, size=n)
    cx = rng.uniform(w / 2, W - w / 2)
    cy = rng.uniform(h / 2, H - h / 2)
    angle = rng.uniform(0, 2 * np.pi, size=n)
    speed = rng.uniform(*spec.speed, size=n)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)

    centers = np.empty((T, n, 2))
    for t in range(T):
        if t:
            cx = cx + vx + spec.motion_noise * rng.standard_normal(n)
            cy = cy + vy + spec.motion_noise * rng.standard_normal(n)
            for pos, vel, lo, hi in ((cx, vx, w / 2, W - w / 2), (cy, vy, h / 2, H - h / 2)):
                low, high = pos < lo, pos > hi
                pos[low] = 2 * lo[low] - pos[low]
                pos[high] = 2 * hi[high] - pos[high]
                vel[low | high] *= -1
        centers[t, :, 0], centers[t, :, 1] = cx, cy

    visible = rng.random((T, n)) >= spec.drop_rate
    bursts = rng.poisson(spec.occlusion_bursts, size=n)
    for k in range(n):
        for _ in range(bursts[k]):
            length = int(rng.integers(spec.burst_length[0], spec.burst_length[1] + 1))
            start = int(rng.integers(0, max(1, T - length)))
            visible[start:start + length, k] = False

    bases = rng.standard_normal((n + 1, spec.appearance_dim))
    bases /= np.linalg.norm(bases, axis=1, keepdims=True)
    bases[0] = 0.0

    gt, dets, labels = [], [], {}
    for t in range(T):
        frame = t + 1
        for k in range(n):
            left, top = centers[t, k, 0] - w[k] / 2, centers[t, k, 1] - h[k] / 2
            gt.append(MotRecord(frame, k + 1, *_round_box((left, top, w[k], h[k])), 1.0, (1.0, 1.0)))
            if not visible[t, k]:
                continue
            jit = spec.jitter * rng.standard_normal(4) * np.array([w[k], h[k], w[k], h[k]])
            box = (left + jit[0], top + jit[1], w[k] + jit[2], h[k] + jit[3])
            det = MotRecord(frame, -1, *_round_box(box), round(float(rng.uniform(0.6, 1.0)), 4))
            dets.append(det)
            labels[box_key(frame, det.box)] = k + 1
        for _ in range(rng.binomial(n, spec.fp_rate)):
            fw = rng.uniform(*spec.box_width)
            fh = fw * rng.uniform(*spec.aspect)
            box = (rng.uniform(0, W - fw), rng.uniform(0, H - fh), fw, fh)
            det = MotRecord(frame, -1, *_round_box(box), round(float(rng.uniform(0.3, 1.0)), 4))
            dets.append(det)
            labels[box_key(frame, det.box)] = 0

    provider = AppearanceProvider(spec.appearance_dim, "synthetic", bases=bases, labels=labels,
                                  noise=spec.appearance_noise, seed=spec.seed)
    meta = SequenceMeta(f"synth-{spec.seed:04d}", W, H, T)
    return SyntheticSequence(meta, gt, dets, provider.to_precomputed(dets), labels)


def write_sequence(seq: SyntheticSequence, out_dir, spec: SynthSpec | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(seq.gt, out / "gt.txt")
    write_records(seq.detections, out / "det.txt")
    save_sidecar(seq.appearance, out / "appearance.bin")
    meta = asdict(seq.meta)
    if spec is not None:
        meta["synth"] = asdict(spec)
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def read_sequence(seq_dir):
    """Load a directory written by :func:`write_sequence` (gt optional)."""
    root = Path(seq_dir)
    raw = json.loads((root / "meta.json").read_text())
    raw.pop("synth", None)
    meta = SequenceMeta(**raw)
    gt = parse_mot_csv(root / "gt.txt", "gt") if (root / "gt.txt").exists() else []
    dets = parse_mot_csv(root / "det.txt", "det")
    return SyntheticSequence(meta, gt, dets, load_sidecar(root / "appearance.bin"), {})
