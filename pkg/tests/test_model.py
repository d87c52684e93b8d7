import numpy as np
import pytest
from conftest import random_batch, random_params
from hypothesis import given, settings
from hypothesis import strategies as st

from transstam import autodiff as ad
from transstam.model import (
    AssociationInput,
    InputError,
    ModelConfig,
    ape_positional,
    aspe_embed,
    assignment_matrix,
    build_queries,
    encoder_forward,
    forward,
    fuse_detection,
    init_params,
    load_checkpoint,
    normalize_boxes,
    pairwise_bias,
    parameter_census,
    parameter_shapes,
    predict_assignment,
    relative_feature,
    rstpe_bias,
    rstpe_scores,
    save_checkpoint,
    time_geom,
)
from transstam.training import bce_loss


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(fusion="multiply")
    with pytest.raises(ValueError):
        ModelConfig(layers=0)


def test_tiny_census_matches_hand_count():
    cfg = ModelConfig(d=2, heads=1, layers=1, ffn_dim=4, appearance_dim=2, window_T=5)
    appearance = 2 * 2 + 2
    aspe = (4 * 2 + 2) + (2 * 2 + 2) * 2
    attention = 4 * (2 * 2) + 2  # wq, wk, wv, wo and the output bias
    norm = 2 * 2
    ffn = 2 * 4 + 4 + 4 * 2 + 2
    encoder = attention + norm + ffn + norm
    decoder = 2 * attention + 3 * norm + ffn
    rstpe = 1 * 5
    head = (2 * 8 + 8) + (8 * 2 + 2)
    assert parameter_census(init_params(cfg), cfg) == appearance + aspe + encoder + decoder + rstpe + head == 193


def test_doubling_ffn_changes_only_ffn_blocks():
    a = ModelConfig(d=8, heads=2, ffn_dim=16, appearance_dim=4)
    b = ModelConfig(d=8, heads=2, ffn_dim=32, appearance_dim=4)
    diff = parameter_census(init_params(b), b) - parameter_census(init_params(a), a)
    # two layers each of encoder and decoder, each FFN grows by 2*d*16 + 16
    assert diff == 4 * (2 * 8 * 16 + 16)


def test_ablation_switches_exclude_frozen_blocks():
    full = ModelConfig(d=8, heads=2, ffn_dim=8, appearance_dim=4)
    none = ModelConfig(d=8, heads=2, ffn_dim=8, appearance_dim=4, use_aspe=False, use_rstpe=False)
    aspe = (4 * 8 + 8) + 2 * (8 * 8 + 8)
    assert parameter_census(init_params(full), full) - parameter_census(init_params(none), none) == aspe + 2 * 5


def test_concat_fusion_adds_projection():
    shapes = parameter_shapes(ModelConfig(d=8, heads=2, fusion="concat"))
    assert shapes["fuse.weight"] == (16, 8)


def test_zero_aspe_weights_give_zero_vector():
    cfg = ModelConfig(d=8, heads=2, appearance_dim=4)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    np.testing.assert_array_equal(aspe_embed(params, np.array([[0.4, 0.5, 0.1, 0.2]])).value, 0)


def test_aspe_matches_straight_line_mlp():
    cfg = ModelConfig(d=8, heads=2, appearance_dim=4)
    params = random_params(cfg, seed=3)
    g = np.array([0.5, 0.5, 0.1, 0.2])
    h = g
    for k in range(3):
        h = h @ params[f"aspe.{k}.weight"] + params[f"aspe.{k}.bias"]
        if k < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(aspe_embed(params, g[None]).value[0], h, rtol=1e-12, atol=1e-12)


def test_aspe_rejects_pixel_geometry():
    params = init_params(ModelConfig(d=8, heads=2, appearance_dim=4))
    with pytest.raises(InputError):
        aspe_embed(params, np.array([[400.0, 300.0, 50.0, 120.0]]))


def test_fusion_is_exact_sum():
    cfg = ModelConfig(d=8, heads=2, appearance_dim=4)
    params = random_params(cfg)
    rng = np.random.default_rng(1)
    a, p, f = fuse_detection(params, rng.standard_normal((5, 4)), rng.uniform(0.1, 0.9, (5, 4)))
    np.testing.assert_array_equal(f.value, a.value + p.value)


def test_fusion_rejects_width_mismatch():
    params = init_params(ModelConfig(d=8, heads=2, appearance_dim=4))
    with pytest.raises(InputError):
        fuse_detection(params, np.zeros((1, 5)), np.full((1, 4), 0.5))


def test_normalize_boxes_centers():
    np.testing.assert_allclose(normalize_boxes([[90, 40, 20, 40]], (200, 100)), [[0.5, 0.6, 0.1, 0.4]])


def test_relative_feature_examples():
    g1, g2 = np.array([0.1, 0.2, 0.05, 0.1]), np.array([0.3, 0.1, 0.06, 0.12])
    np.testing.assert_array_equal(relative_feature(3, g1, 3, g1, 10), np.zeros(5))
    np.testing.assert_allclose(relative_feature(3, g1, 6, g2, 10), -relative_feature(6, g2, 3, g1, 10))


def test_rstpe_bias_examples():
    params = {"rstpe.w": np.array([[1.0, 0, 0, 0, 0], [0.3, -2.0, 1.0, 0.5, 4.0]])}
    assert rstpe_bias(params, np.array([0.3, 0.9, -1, 2, 5]), 0) == pytest.approx(0.3)
    assert rstpe_bias(params, np.zeros(5), 1) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rstpe_antisymmetry(seed):
    r = np.random.default_rng(seed)
    heads = int(r.integers(1, 4))
    params = {"rstpe.w": r.standard_normal((heads, 5))}
    tg = r.uniform(-1, 1, (6, 5))
    cfg = ModelConfig(d=4 * heads, heads=heads)
    s = rstpe_scores(params, tg, cfg)
    bias = pairwise_bias(s, s).value  # (H, L, L)
    np.testing.assert_allclose(bias, -np.swapaxes(bias, -1, -2), atol=1e-12)
    for h in range(heads):
        rel = tg[4] - tg[1]
        assert rstpe_bias(params, rel, h) == pytest.approx(-rstpe_bias(params, -rel, h))
        assert bias[h, 1, 4] == pytest.approx(rstpe_bias(params, rel, h))


def _encode(params, cfg, feats, tg, valid, trace=None):
    return encoder_forward(params, ad.constant(feats), tg, valid, cfg, trace).value


def test_encoder_permutation_equivariance(tiny_cfg):
    rng = np.random.default_rng(4)
    params = random_params(tiny_cfg)
    feats = rng.standard_normal((2, 3, tiny_cfg.d))
    tg = np.concatenate([rng.uniform(-1, 0, (2, 3, 1)), rng.uniform(0.1, 0.9, (2, 3, 4))], axis=-1)
    valid = np.ones((2, 3), dtype=bool)
    base = _encode(params, tiny_cfg, feats, tg, valid)
    for perm in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
        out = _encode(params, tiny_cfg, feats[:, perm], tg[:, perm], valid)
        np.testing.assert_allclose(out, base[:, perm], atol=1e-12)


def test_encoder_single_detection(tiny_cfg):
    params = random_params(tiny_cfg)
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((1, 1, tiny_cfg.d))
    trace = []
    out = _encode(params, tiny_cfg, feats, rng.uniform(0, 1, (1, 1, 5)), np.ones((1, 1), bool), trace)
    assert all(np.allclose(attn, 1.0) for _, attn in trace)
    # no other detection can influence the output
    out2 = _encode(params, tiny_cfg, feats, rng.uniform(0, 1, (1, 1, 5)), np.ones((1, 1), bool))
    np.testing.assert_allclose(out, out2, atol=1e-12)


def test_padding_does_not_leak(tiny_cfg):
    params = random_params(tiny_cfg)
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((1, 4, tiny_cfg.d))
    tg = rng.uniform(0, 1, (1, 4, 5))
    valid = np.array([[True, True, False, False]])
    a = _encode(params, tiny_cfg, feats, tg, valid)
    feats[0, 2:] = 99.0
    b = _encode(params, tiny_cfg, feats, tg, valid)
    np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)


def test_empty_tracklet_rejected(tiny_cfg):
    params = random_params(tiny_cfg)
    with pytest.raises(InputError):
        _encode(params, tiny_cfg, np.zeros((1, 2, tiny_cfg.d)), np.zeros((1, 2, 5)), np.zeros((1, 2), bool))


def test_zero_relative_weights_give_plain_attention(tiny_cfg):
    from dataclasses import replace

    params = random_params(tiny_cfg)
    params["rstpe.w"][:] = 0
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((2, 3, tiny_cfg.d))
    tg = rng.uniform(0, 1, (2, 3, 5))
    valid = np.ones((2, 3), bool)
    plain = replace(tiny_cfg, use_rstpe=False)
    np.testing.assert_allclose(_encode(params, tiny_cfg, feats, tg, valid), _encode(params, plain, feats, tg, valid), atol=1e-12)


def test_ape_examples():
    a = ad.constant(np.array([[[2.0], [4.0]]]))
    p = ad.constant(np.array([[[7.0], [1.0]]]))
    np.testing.assert_array_equal(ape_positional(a, p, np.ones((1, 2), bool)).value, [[4.0]])
    # a gap: only the first two of three slots are valid, the mean divides by 2
    a = ad.constant(np.array([[[2.0], [4.0], [100.0]]]))
    p = ad.constant(np.array([[[7.0], [1.0], [50.0]]]))
    np.testing.assert_array_equal(ape_positional(a, p, np.array([[True, True, False]])).value, [[4.0]])
    zero = ad.constant(np.zeros((1, 3, 1)))
    np.testing.assert_array_equal(ape_positional(zero, p, np.array([[True, True, False]])).value, [[1.0]])


def test_query_fusions(tiny_cfg):
    f = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    pe = ad.constant(np.array([[0.5, 0.5], [1.0, 4.0]]))
    pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    cfg = ModelConfig(d=2, heads=1)
    np.testing.assert_array_equal(build_queries({}, f, pe, pairs, cfg).value, [[0.5, 1.5], [2.5, 3.5], [0, -2], [2, 0]])
    from dataclasses import replace

    np.testing.assert_array_equal(build_queries({}, f, pe, pairs, replace(cfg, fusion="add")).value[3], [4, 8])


def test_predict_assignment_symmetry_and_saturation():
    params = {"head.w1": np.eye(2, 8), "head.b1": np.zeros(8), "head.w2": np.zeros((8, 2)), "head.b2": np.array([0.0, 0.0])}
    out = predict_assignment(params, ad.constant(np.ones((3, 2)))).value
    np.testing.assert_allclose(out[:, 1], 0.5)
    params["head.b2"] = np.array([0.0, 20.0])
    assert np.all(predict_assignment(params, ad.constant(np.ones((3, 2)))).value[:, 1] > 0.999)


def test_forward_shape_range_and_row_stochastic_attention(tiny_cfg):
    params = random_params(tiny_cfg)
    batch = random_batch(np.random.default_rng(8))
    trace = []
    probs = forward(params, batch, tiny_cfg, trace).value
    assert probs.shape == (9, 2)
    assert np.all((probs > 0) & (probs < 1))
    assert {name for name, _ in trace} == {"enc.0.self", "dec.0.self", "dec.0.cross"}
    for _, attn in trace:
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
    A = assignment_matrix(params, batch, tiny_cfg)
    assert A.shape == (3, 3)


def test_single_pair_cross_attention_is_one(tiny_cfg):
    params = random_params(tiny_cfg)
    rng = np.random.default_rng(9)
    batch = random_batch(rng, n=1, m=1, k=1)
    trace = []
    forward(params, batch, tiny_cfg, trace)
    cross = [attn for name, attn in trace if name.endswith("cross")]
    np.testing.assert_allclose(cross[0], 1.0)


def test_tracklet_permutation_leaves_loss_unchanged(tiny_cfg):
    params = random_params(tiny_cfg)
    batch = random_batch(np.random.default_rng(10))
    gt = np.array([[1.0, 0, 0], [0, 0, 1], [0, 0, 0]])
    mask = np.ones(9, bool)

    def loss(b, g):
        return bce_loss(ad.getitem(forward(params, b, tiny_cfg), (slice(None), 1)), g.ravel(), mask).value

    perm = [2, 0, 1]
    shuffled = AssociationInput(batch.trk_appearance[perm], batch.trk_geom[perm], batch.trk_frame[perm],
                                batch.trk_valid[perm], batch.det_appearance, batch.det_geom, batch.frame)
    assert loss(shuffled, gt[perm]) == pytest.approx(loss(batch, gt), rel=1e-12)


def _pixel_batch(rng, scale, n=2, m=3, k=3, size=(1920, 1080)):
    w, h = size
    boxes = np.stack([rng.uniform(0, w - 100, (n, k)), rng.uniform(0, h - 200, (n, k)),
                      rng.uniform(30, 90, (n, k)), rng.uniform(60, 180, (n, k))], axis=-1)
    det = np.stack([rng.uniform(0, w - 100, m), rng.uniform(0, h - 200, m), rng.uniform(30, 90, m), rng.uniform(60, 180, m)], axis=-1)
    image = (w * scale, h * scale)
    app, det_app = rng.standard_normal((n, k, 4)), rng.standard_normal((m, 4))
    trk_geom = normalize_boxes(boxes.reshape(-1, 4) * scale, image).reshape(n, k, 4)
    frames = np.tile(np.arange(1.0, k + 1), (n, 1))
    return AssociationInput(app, trk_geom, frames, np.ones((n, k), bool), det_app, normalize_boxes(det * scale, image), k + 1)


@pytest.mark.parametrize("scale", [0.5, 0.37, 3.0])
def test_normalization_invariance(tiny_cfg, scale):
    params = random_params(tiny_cfg)
    ref = forward(params, _pixel_batch(np.random.default_rng(11), 1.0), tiny_cfg).value
    out = forward(params, _pixel_batch(np.random.default_rng(11), scale), tiny_cfg).value
    if scale == 0.5:
        np.testing.assert_array_equal(out, ref)  # halving is exact in binary floating point
    else:
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_time_geom_layout():
    out = time_geom([3.0, 5.0], [[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]], 6, 10)
    np.testing.assert_allclose(out[:, 0], [-0.3, -0.1])
    np.testing.assert_allclose(out[1, 1:], [0.5, 0.6, 0.7, 0.8])


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, seed=2)
    save_checkpoint(tmp_path / "m.ckpt", params, tiny_cfg)
    loaded, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg == tiny_cfg
    assert loaded.keys() == params.keys()
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope" + bytes(10))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
