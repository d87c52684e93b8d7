from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transstam.data import (
    AppearanceProvider,
    MotRecord,
    ParseError,
    SequenceMeta,
    SynthSpec,
    box_key,
    load_sidecar,
    parse_mot_csv,
    read_sequence,
    save_sidecar,
    synth_generate,
    write_records,
    write_results,
    write_sequence,
)
from transstam.tracker import Trajectory


def _write(tmp_path, text, name="f.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parse_examples(tmp_path):
    (r,) = parse_mot_csv(_write(tmp_path, "1,-1,10,20,30,40,0.9,-1,-1,-1\n"), "det")
    assert (r.frame, r.id, r.box, r.conf) == (1, -1, (10, 20, 30, 40), 0.9)
    assert parse_mot_csv(_write(tmp_path, ""), "det") == []
    (g,) = parse_mot_csv(_write(tmp_path, "2,7,0,0,5,5,1,1,1\n"), "gt")
    assert (g.frame, g.id, g.extra) == (2, 7, (1.0, 1.0))


def test_det_ids_are_forced(tmp_path):
    (r,) = parse_mot_csv(_write(tmp_path, "3,12,1,1,5,5,0.5\n"), "det")
    assert r.id == -1


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError, match=":2:"):
        parse_mot_csv(_write(tmp_path, "1,-1,1,1,5,5,1\n1,-1,x,1,5,5,1\n"))
    with pytest.raises(ParseError):
        parse_mot_csv(_write(tmp_path, "1,2,3\n"))
    with pytest.raises(FileNotFoundError):
        parse_mot_csv(tmp_path / "missing.txt")


def test_non_positive_boxes_skipped(tmp_path, caplog):
    recs = parse_mot_csv(_write(tmp_path, "1,-1,1,1,0,5,1\n1,-1,1,1,5,5,1\n"))
    assert len(recs) == 1
    assert "non-positive" in caplog.text


def test_frames_need_not_be_contiguous(tmp_path):
    recs = parse_mot_csv(_write(tmp_path, "5,-1,1,1,5,5,1\n2,-1,1,1,5,5,1\n"))
    assert [r.frame for r in recs] == [5, 2]


box = st.tuples(*[st.floats(0, 2000, allow_nan=False).map(lambda v: round(v, 3))] * 2,
                *[st.floats(0.01, 500, allow_nan=False).map(lambda v: round(v, 3))] * 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 500), st.integers(1, 50), box, st.floats(0, 1).map(lambda v: round(v, 4))), max_size=30))
def test_write_parse_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "res.txt"
    trajs = {}
    for frame, ident, b, conf in rows:
        trajs.setdefault(ident, {})[frame] = (*b, conf)
    write_results([Trajectory(i, boxes) for i, boxes in trajs.items()], path)
    parsed = parse_mot_csv(path, "gt")
    expect = sorted((f, i, *b) for i, boxes in trajs.items() for f, b in boxes.items())
    got = [(r.frame, r.id, r.x, r.y, r.w, r.h, r.conf) for r in parsed]
    assert got == sorted(got, key=lambda r: (r[0], r[1]))
    assert len(got) == len(expect)
    np.testing.assert_allclose(np.array(sorted(got), dtype=float).reshape(-1, 7), np.array(expect, dtype=float).reshape(-1, 7), atol=1e-4)
    # a second pass is exact
    write_records(parsed, path)
    assert parse_mot_csv(path, "gt") == parsed


def test_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    table = {box_key(f, (f, 2.5, 10.0, 20.0)): rng.standard_normal(6).astype(np.float32) for f in range(1, 20)}
    save_sidecar(AppearanceProvider(6, table=table), tmp_path / "a.bin")
    loaded = load_sidecar(tmp_path / "a.bin")
    assert loaded.dim == 6 and loaded.table.keys() == table.keys()
    for k in table:
        np.testing.assert_array_equal(loaded.table[k], table[k])
    np.testing.assert_array_equal(loaded.get(3, (3.0, 2.5, 10.0, 20.0)), table[box_key(3, (3, 2.5, 10, 20))])
    with pytest.raises(KeyError):
        loaded.get(99, (0, 0, 1, 1))
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(9))
    with pytest.raises(ValueError):
        load_sidecar(tmp_path / "bad.bin")


def test_meta_validation():
    with pytest.raises(ValueError):
        SequenceMeta("x", 0, 10, 10)


SMALL = SynthSpec(objects=4, frames=30, appearance_dim=8)


def test_synth_is_deterministic():
    a, b = synth_generate(SMALL), synth_generate(SMALL)
    assert a.gt == b.gt and a.detections == b.detections
    assert synth_generate(replace(SMALL, seed=1)).detections != a.detections


def test_clean_synth_detections_equal_gt():
    spec = replace(SMALL, drop_rate=0.0, fp_rate=0.0, jitter=0.0, occlusion_bursts=0.0)
    seq = synth_generate(spec)
    assert [(d.frame, d.box) for d in seq.detections] == [(g.frame, g.box) for g in seq.gt]


def test_synth_drop_rate_is_binomial():
    seq = synth_generate(SynthSpec(objects=100, frames=100, drop_rate=0.1, fp_rate=0.0, occlusion_bursts=0.0))
    assert abs(10_000 - len(seq.detections) - 1000) <= 100


def test_synth_one_gt_box_per_frame_and_id():
    seq = synth_generate(SMALL)
    keys = [(g.frame, g.id) for g in seq.gt]
    assert len(keys) == len(set(keys)) == SMALL.objects * SMALL.frames


def test_synthetic_appearance_margin():
    spec = SynthSpec(objects=30, frames=20, appearance_noise=0.1, fp_rate=0.0)
    seq = synth_generate(spec)
    by_id = {}
    for d in seq.detections:
        v = seq.appearance.get(d.frame, d.box)
        by_id.setdefault(seq.labels[box_key(d.frame, d.box)], []).append(v / np.linalg.norm(v))
    same = np.mean([vs[0] @ vs[1] for vs in by_id.values() if len(vs) > 1])
    ids = sorted(by_id)
    diff = np.mean([by_id[a][0] @ by_id[b][0] for a, b in zip(ids, ids[1:])])
    assert same - diff > 0.2


def test_false_positive_appearance_is_unit_scale():
    provider = AppearanceProvider(16, "synthetic", bases=np.zeros((1, 16)), noise=0.0)
    v = provider.get(1, (1, 2, 3, 4))
    assert np.linalg.norm(v) == pytest.approx(1.0, rel=1e-6)
    np.testing.assert_array_equal(v, provider.get(1, (1, 2, 3, 4)))


def test_sequence_directory_round_trip(tmp_path):
    seq = synth_generate(SMALL)
    write_sequence(seq, tmp_path / "s", SMALL)
    back = read_sequence(tmp_path / "s")
    assert back.meta == seq.meta
    assert [(r.frame, r.box) for r in back.detections] == [(r.frame, r.box) for r in seq.detections]
    for d in back.detections:
        np.testing.assert_array_equal(back.appearance.get(d.frame, d.box), seq.appearance.get(d.frame, d.box))
    assert [(g.frame, g.id) for g in back.gt] == sorted((g.frame, g.id) for g in seq.gt)


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(replace(SMALL, drop_rate=1.0))
    with pytest.raises(ValueError):
        synth_generate(replace(SMALL, frames=1))
    (tmp_path / "s.json").write_text('{"objects": 3, "colour": 1}')
    with pytest.raises(ValueError, match="colour"):
        SynthSpec.from_file(tmp_path / "s.json")
    (tmp_path / "ok.json").write_text('{"objects": 3, "speed": [1, 2]}')
    assert SynthSpec.from_file(tmp_path / "ok.json").speed == (1, 2)


def test_mot_record_box():
    assert MotRecord(1, 2, 3, 4, 5, 6).box == (3, 4, 5, 6)
