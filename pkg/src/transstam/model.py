"""Tracklet/detection association transformer.

Detections are embedded as ``f = a + p`` where ``a`` is a linear
projection of the appearance vector and ``p`` is a 3-layer MLP over the
normalized box (cx, cy, w, h). Tracklets run through a post-norm encoder
whose attention logits carry a learned linear bias over the signed
(time, x, y, w, h) differences between detections. The decoder receives
one query per (tracklet, detection) pair, built by fusing the detection
feature with a per-tracklet positional vector, attends over all encoded
tracklet detections with the same relative bias, and a small head turns
each query into a match probability.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

FUSIONS = ("subtract", "add", "concat")
MASK_VALUE = -1e9


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    heads: int = 8
    layers: int = 2
    ffn_dim: int = 1024
    appearance_dim: int = 256
    window_T: int = 150
    fusion: str = "subtract"
    use_aspe: bool = True
    use_rstpe: bool = True

    def __post_init__(self):
        for name in ("d", "heads", "layers", "ffn_dim", "appearance_dim", "window_T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")

    @property
    def head_dim(self):
        return self.d // self.heads


# ------------------------------------------------------------------ parameters


def _attention_shapes(prefix, d):
    # Q, K and V projections are bias-free; a key bias would be a dead
    # parameter anyway since softmax ignores per-query constant shifts
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d), f"{prefix}.wv": (d, d),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def _ffn_shapes(prefix, d, hidden):
    return {f"{prefix}.w1": (d, hidden), f"{prefix}.b1": (hidden,), f"{prefix}.w2": (hidden, d), f"{prefix}.b2": (d,)}


def _norm_shapes(prefix, d):
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter block in checkpoint order."""
    d = cfg.d
    shapes = {"app_proj.weight": (cfg.appearance_dim, d), "app_proj.bias": (d,)}
    for k, (i, o) in enumerate([(4, d), (d, d), (d, d)]):
        shapes[f"aspe.{k}.weight"] = (i, o)
        shapes[f"aspe.{k}.bias"] = (o,)
    for layer in range(cfg.layers):
        p = f"enc.{layer}"
        shapes.update(_attention_shapes(f"{p}.self", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, cfg.ffn_dim))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
    for layer in range(cfg.layers):
        p = f"dec.{layer}"
        shapes.update(_attention_shapes(f"{p}.self", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_attention_shapes(f"{p}.cross", d))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, cfg.ffn_dim))
        shapes.update(_norm_shapes(f"{p}.norm3", d))
    shapes["rstpe.w"] = (cfg.heads, 5)
    if cfg.fusion == "concat":
        shapes["fuse.weight"] = (2 * d, d)
        shapes["fuse.bias"] = (d,)
    shapes["head.w1"] = (d, 4 * d)
    shapes["head.b1"] = (4 * d,)
    shapes["head.w2"] = (4 * d, 2)
    shapes["head.b2"] = (2,)
    return shapes


def frozen_blocks(cfg: ModelConfig) -> set[str]:
    """Blocks held at zero by the positional-encoding ablation switches."""
    frozen = set()
    if not cfg.use_aspe:
        frozen |= {n for n in parameter_shapes(cfg) if n.startswith("aspe.")}
    if not cfg.use_rstpe:
        frozen.add("rstpe.w")
    return frozen


def init_params(cfg: ModelConfig, seed=0, dtype=ad.DEFAULT_DTYPE) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, unit norm gains, zero relative bias."""
    rng = np.random.default_rng(seed)
    frozen = frozen_blocks(cfg)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("gamma"):
            value = np.ones(shape)
        elif len(shape) == 2 and name != "rstpe.w" and name not in frozen:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    return params


def parameter_census(params, cfg: ModelConfig | None = None) -> int:
    """Number of trainable scalars (ablation-frozen blocks excluded)."""
    frozen = frozen_blocks(cfg) if cfg is not None else set()
    return int(sum(np.asarray(v).size for name, v in params.items() if name not in frozen))


# ------------------------------------------------------------------ features


def normalize_boxes(boxes, image_size):
    """Pixel (left, top, w, h) rows to (cx, cy, w, h) divided by image size."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    width, height = image_size
    out = np.empty_like(boxes)
    out[:, 0] = (boxes[:, 0] + boxes[:, 2] / 2) / width
    out[:, 1] = (boxes[:, 1] + boxes[:, 3] / 2) / height
    out[:, 2] = boxes[:, 2] / width
    out[:, 3] = boxes[:, 3] / height
    return out


def denormalize_boxes(geom, image_size):
    geom = np.asarray(geom, dtype=np.float64).reshape(-1, 4)
    width, height = image_size
    w = geom[:, 2] * width
    h = geom[:, 3] * height
    return np.stack([geom[:, 0] * width - w / 2, geom[:, 1] * height - h / 2, w, h], axis=1)


def relative_feature(src_frame, src_geom, dst_frame, dst_geom, window_T):
    """Signed (dt, dx, dy, dw, dh) from source to target; dt in units of T."""
    return np.concatenate([[(dst_frame - src_frame) / window_T], np.asarray(dst_geom) - np.asarray(src_geom)])


def _check_geom(geom):
    geom = np.asarray(geom)
    if geom.shape[-1] != 4:
        raise InputError(f"box geometry must have 4 components, got shape {geom.shape}")
    if np.any(geom < -0.5) or np.any(geom > 1.5):
        raise InputError("box geometry is not normalized to image size")


def _p(params, name):
    value = params[name]
    return value if isinstance(value, ad.Node) else ad.constant(value)


def aspe_embed(params, geom, cfg: ModelConfig | None = None):
    """Box MLP 4 -> d -> d -> d; zero when ASPE is disabled."""
    _check_geom(geom.value if isinstance(geom, ad.Node) else geom)
    x = geom if isinstance(geom, ad.Node) else ad.constant(np.asarray(geom, dtype=_dtype(params)))
    if cfg is not None and not cfg.use_aspe:
        return ad.constant(np.zeros(x.shape[:-1] + (cfg.d,), dtype=x.value.dtype))
    for k in range(3):
        x = ad.linear(x, _p(params, f"aspe.{k}.weight"), _p(params, f"aspe.{k}.bias"))
        if k < 2:
            x = ad.relu(x)
    return x


def project_appearance(params, appearance):
    appearance = appearance if isinstance(appearance, ad.Node) else ad.constant(np.asarray(appearance, dtype=_dtype(params)))
    expected = _value(params["app_proj.weight"]).shape[0]
    if appearance.shape[-1] != expected:
        raise InputError(f"appearance width {appearance.shape[-1]} does not match model width {expected}")
    return ad.linear(appearance, _p(params, "app_proj.weight"), _p(params, "app_proj.bias"))


def fuse_detection(params, appearance, geom, cfg=None):
    """Projected appearance ``a``, box embedding ``p`` and their sum ``f`` for a batch of detections."""
    a = project_appearance(params, appearance)
    p = aspe_embed(params, geom, cfg)
    return a, p, ad.add(a, p)


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x)


def _dtype(params):
    return _value(next(iter(params.values()))).dtype


# ------------------------------------------------------------------ attention


def rstpe_scores(params, time_geom, cfg: ModelConfig):
    """Per-head projection w_h . (t, x, y, w, h) for each detection, shape (..., H)."""
    w = _p(params, "rstpe.w")
    g = ad.constant(np.asarray(time_geom, dtype=w.value.dtype))
    return ad.matmul(g, ad.transpose(w, (1, 0)))


def rstpe_bias(params, rel, head):
    """Scalar relative bias for one head and one (source, target) feature."""
    return float(np.dot(_value(params["rstpe.w"])[head], rel))


def pairwise_bias(query_scores, key_scores):
    """Bias[..., h, i, j] = s_key[j, h] - s_query[i, h], i.e. w . (target - source)."""
    nd = query_scores.value.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    q = ad.transpose(query_scores, perm)  # (..., H, Lq)
    k = ad.transpose(key_scores, perm)  # (..., H, Lk)
    qs = q.shape
    ks = k.shape
    q = ad.reshape(q, qs + (1,))
    k = ad.reshape(k, ks[:-1] + (1, ks[-1]))
    return ad.subtract(k, q)


def multi_head_attention(params, prefix, xq, xkv, cfg: ModelConfig, bias=None, key_mask=None, trace=None):
    """Scaled dot-product attention over the last two axes with optional additive bias.

    ``key_mask`` is a boolean array broadcastable to (..., Lk); False keys
    receive a large negative logit.
    """
    H, dh = cfg.heads, cfg.head_dim
    lead_q = xq.shape[:-1]
    lead_k = xkv.shape[:-1]

    def split(x, w, lead):
        y = ad.linear(x, _p(params, f"{prefix}.{w}"))
        y = ad.reshape(y, lead + (H, dh))
        n = len(lead)
        return ad.transpose(y, tuple(range(n - 1)) + (n, n - 1, n + 1))

    q = split(xq, "wq", lead_q)
    k = split(xkv, "wk", lead_k)
    v = split(xkv, "wv", lead_k)
    nd = k.value.ndim
    kt = ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(dh))
    if bias is not None:
        logits = ad.add(logits, bias)
    if key_mask is not None:
        key_mask = np.asarray(key_mask)
        additive = np.where(key_mask, 0.0, MASK_VALUE).astype(logits.value.dtype)
        additive = additive.reshape(additive.shape[:-1] + (1, 1, additive.shape[-1]))
        logits = ad.add(logits, additive)
    attn = ad.softmax(logits, axis=-1)
    if trace is not None:
        trace.append((prefix, attn.value))
    out = ad.matmul(attn, v)  # (..., H, Lq, dh)
    n = out.value.ndim
    out = ad.transpose(out, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    out = ad.reshape(out, lead_q + (cfg.d,))
    return ad.linear(out, _p(params, f"{prefix}.wo"), _p(params, f"{prefix}.bo"))


def _ffn(params, prefix, x):
    h = ad.relu(ad.linear(x, _p(params, f"{prefix}.w1"), _p(params, f"{prefix}.b1")))
    return ad.linear(h, _p(params, f"{prefix}.w2"), _p(params, f"{prefix}.b2"))


def _norm(params, prefix, x):
    return ad.layer_norm(x, _p(params, f"{prefix}.gamma"), _p(params, f"{prefix}.beta"))


# ------------------------------------------------------------------ encoder / decoder


def encoder_forward(params, feats, time_geom, valid, cfg: ModelConfig, trace=None):
    """Encode padded tracklets.

    feats: node (N, K, d); time_geom: (N, K, 5) array of (t/T, cx, cy, w, h);
    valid: (N, K) bool. Each tracklet only attends to its own valid detections.
    """
    valid = np.asarray(valid, dtype=bool)
    if feats.shape[-2] == 0 or not valid.any(axis=-1).all():
        raise InputError("every tracklet needs at least one detection")
    bias = None
    if cfg.use_rstpe:
        s = rstpe_scores(params, time_geom, cfg)
        bias = pairwise_bias(s, s)
    x = feats
    for layer in range(cfg.layers):
        p = f"enc.{layer}"
        x = _norm(params, f"{p}.norm1", ad.add(x, multi_head_attention(params, f"{p}.self", x, x, cfg, bias, valid, trace)))
        x = _norm(params, f"{p}.norm2", ad.add(x, _ffn(params, f"{p}.ffn", x)))
    return x


def ape_positional(a_trk, p_trk, valid):
    """Mean projected appearance over available detections plus latest box embedding.

    a_trk, p_trk: nodes (N, K, d); valid: (N, K) bool with valid entries
    stored oldest first. Returns (N, d).
    """
    valid = np.asarray(valid, dtype=bool)
    counts = valid.sum(axis=1, keepdims=True).astype(a_trk.value.dtype)
    weights = ad.constant((valid / counts)[..., None].astype(a_trk.value.dtype))
    mean_a = ad.sum(ad.multiply(a_trk, weights), axis=1)
    last = valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    n = np.arange(valid.shape[0])
    flat = ad.reshape(p_trk, (-1, p_trk.shape[-1]))
    latest_p = ad.take(flat, n * valid.shape[1] + last, axis=0)
    return ad.add(mean_a, latest_p)


def build_queries(params, f_det, pe, pairs, cfg: ModelConfig):
    """One query per (tracklet i, detection j) row of ``pairs`` fused per ``cfg.fusion``."""
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    fj = ad.take(f_det, pairs[:, 1], axis=0)
    pi = ad.take(pe, pairs[:, 0], axis=0)
    if cfg.fusion == "subtract":
        return ad.subtract(fj, pi)
    if cfg.fusion == "add":
        return ad.add(fj, pi)
    return ad.linear(ad.concat([fj, pi], axis=-1), _p(params, "fuse.weight"), _p(params, "fuse.bias"))


def decoder_forward(params, queries, query_time_geom, memory, memory_time_geom, memory_valid, cfg: ModelConfig, trace=None):
    """Decode (P, d) queries against (S, d) memory."""
    memory_valid = np.asarray(memory_valid, dtype=bool)
    if memory.shape[0] == 0 or not memory_valid.any():
        raise InputError("decoder memory is empty")
    bias = None
    if cfg.use_rstpe:
        bias = pairwise_bias(rstpe_scores(params, query_time_geom, cfg), rstpe_scores(params, memory_time_geom, cfg))
    x = queries
    for layer in range(cfg.layers):
        p = f"dec.{layer}"
        x = _norm(params, f"{p}.norm1", ad.add(x, multi_head_attention(params, f"{p}.self", x, x, cfg, trace=trace)))
        x = _norm(params, f"{p}.norm2", ad.add(x, multi_head_attention(params, f"{p}.cross", x, memory, cfg, bias, memory_valid, trace)))
        x = _norm(params, f"{p}.norm3", ad.add(x, _ffn(params, f"{p}.ffn", x)))
    return x


def predict_logits(params, decoded):
    h = ad.relu(ad.linear(decoded, _p(params, "head.w1"), _p(params, "head.b1")))
    return ad.linear(h, _p(params, "head.w2"), _p(params, "head.b2"))


def predict_assignment(params, decoded):
    """(P, 2) two-way softmax over the head logits; column 1 is the match probability."""
    return ad.softmax(predict_logits(params, decoded), axis=-1)


# ------------------------------------------------------------------ full pass


@dataclass
class AssociationInput:
    """Padded tensors for one frame: N tracklets (oldest detection first) and M detections."""

    trk_appearance: np.ndarray  # (N, K, A) raw appearance, or None when embeddings are supplied
    trk_geom: np.ndarray  # (N, K, 4)
    trk_frame: np.ndarray  # (N, K)
    trk_valid: np.ndarray  # (N, K) bool
    det_appearance: np.ndarray  # (M, A)
    det_geom: np.ndarray  # (M, 4)
    frame: int
    pairs: np.ndarray | None = None  # (P, 2) admissible (tracklet, detection) pairs
    trk_a: np.ndarray | None = None  # cached (N, K, d) projections
    trk_p: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_tracklets(self):
        return self.trk_valid.shape[0]

    @property
    def n_detections(self):
        return self.det_geom.shape[0]

    def all_pairs(self):
        if self.pairs is not None:
            return np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        ii, jj = np.meshgrid(np.arange(self.n_tracklets), np.arange(self.n_detections), indexing="ij")
        return np.stack([ii.ravel(), jj.ravel()], axis=1)


def pack_tracklets(tracklets, window_T, frame):
    """Pad a list of (frames, geom, appearance) triples into AssociationInput fields."""
    n = len(tracklets)
    kmax = max((len(t[0]) for t in tracklets), default=1)
    adim = tracklets[0][2].shape[-1] if n else 0
    frames = np.zeros((n, kmax))
    geom = np.zeros((n, kmax, 4))
    app = np.zeros((n, kmax, adim))
    valid = np.zeros((n, kmax), dtype=bool)
    for i, (fr, g, a) in enumerate(tracklets):
        k = len(fr)
        frames[i, :k] = fr
        geom[i, :k] = g
        app[i, :k] = a
        valid[i, :k] = True
    return app, geom, frames, valid


def time_geom(frames, geom, frame, window_T):
    """Stack (frame - now) / T with the box geometry."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([((frames - frame) / window_T)[..., None], np.asarray(geom, dtype=np.float64)], axis=-1)


def forward(params, batch: AssociationInput, cfg: ModelConfig, trace=None):
    """Match probabilities for every admissible pair, a (P,) node."""
    dtype = _dtype(params)
    valid = np.asarray(batch.trk_valid, dtype=bool)
    if batch.trk_a is not None:
        a_trk = ad.constant(np.asarray(batch.trk_a, dtype=dtype))
        p_trk = ad.constant(np.asarray(batch.trk_p, dtype=dtype))
    else:
        geom = np.where(valid[..., None], batch.trk_geom, 0.5)
        a_trk = project_appearance(params, batch.trk_appearance)
        p_trk = aspe_embed(params, geom.astype(dtype), cfg)
    f_trk = ad.add(a_trk, p_trk)
    trk_tg = time_geom(batch.trk_frame, batch.trk_geom, batch.frame, cfg.window_T)
    encoded = encoder_forward(params, f_trk, trk_tg, valid, cfg, trace)

    _, _, f_det = fuse_detection(params, batch.det_appearance, np.asarray(batch.det_geom, dtype=dtype), cfg=cfg)
    pe = ape_positional(a_trk, p_trk, valid)
    pairs = batch.all_pairs()
    queries = build_queries(params, f_det, pe, pairs, cfg)

    # memory holds only observed detections; padding would be masked anyway
    # but costs pairs x N x K attention entries
    n, k = valid.shape
    keep = np.flatnonzero(valid.reshape(-1))
    memory = ad.take(ad.reshape(encoded, (n * k, cfg.d)), keep, axis=0)
    mem_tg = trk_tg.reshape(n * k, 5)[keep]
    det_tg = time_geom(np.full(batch.n_detections, batch.frame), batch.det_geom, batch.frame, cfg.window_T)
    query_tg = det_tg[pairs[:, 1]]
    decoded = decoder_forward(params, queries, query_tg, memory, mem_tg, np.ones(len(keep), dtype=bool), cfg, trace)
    probs = predict_assignment(params, decoded)
    return probs


def assignment_matrix(params, batch: AssociationInput, cfg: ModelConfig):
    """Dense N x M probabilities; pairs outside ``batch.pairs`` are 0."""
    out = np.zeros((batch.n_tracklets, batch.n_detections))
    pairs = batch.all_pairs()
    if len(pairs) == 0 or batch.n_tracklets == 0:
        return out
    probs = forward(params, batch, cfg).value[:, 1]
    out[pairs[:, 0], pairs[:, 1]] = probs
    return out


# ------------------------------------------------------------------ checkpoints

MAGIC = b"TSTM"
VERSION = 1


def save_checkpoint(path, params, cfg: ModelConfig):
    """Binary checkpoint.

    Layout: 4-byte magic ``TSTM``, 1 version byte, uint32 header length,
    UTF-8 JSON header ``{"config": ..., "blocks": [[name, shape], ...]}``,
    then each block in header order as little-endian float32.
    """
    shapes = parameter_shapes(cfg)
    header = json.dumps({"config": asdict(cfg), "blocks": [[n, list(shapes[n])] for n in shapes]}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(header)))
        fh.write(header)
        for name in shapes:
            fh.write(np.asarray(_value(params[name]), dtype="<f4").tobytes())


def load_checkpoint(path, dtype=ad.DEFAULT_DTYPE):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, size = struct.unpack("<BI", fh.read(5))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(size))
        cfg = ModelConfig(**header["config"])
        params = {}
        for name, shape in header["blocks"]:
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
            params[name] = data.reshape(shape).astype(dtype)
    return params, cfg
