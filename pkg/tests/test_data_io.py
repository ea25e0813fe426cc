import json
import struct

import numpy as np
import pytest

from vidsum.data_io import (
    DataError,
    ParseError,
    VideoRecord,
    import_h5_archive,
    load_dataset,
    load_video,
    oracle_frame_scores,
    read_annotations,
    read_features,
    synth_dataset,
    write_annotations,
    write_features,
    write_manifest,
)
from vidsum.segmentation import ShotList
from vidsum.selection import make_summary


def f_of_masks(gen, gt):
    inter = float(np.logical_and(gen, gt).sum())
    if gen.sum() == 0 or gt.sum() == 0 or inter == 0:
        return 0.0
    p, r = inter / gen.sum(), inter / gt.sum()
    return 2.0 * p * r / (p + r) * 100.0


# ---------------------------------------------------------------------------
# feature files


def test_feature_file_hand_example(tmp_path):
    path = tmp_path / "v.ftnf"
    payload = struct.pack("<4sIII", b"FTNF", 1, 3, 2)
    payload += struct.pack("<6f", 1, 2, 3, 4, 5, 6)
    path.write_bytes(payload)
    feats = read_features(path)
    assert feats.shape == (3, 2)
    assert feats.dtype == np.float32
    assert np.array_equal(feats, np.array([[1, 2], [3, 4], [5, 6]], dtype=np.float32))


def test_feature_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(5):
        arr = rng.normal(size=(int(rng.integers(1, 40)), int(rng.integers(1, 20))))
        arr = arr.astype(np.float32)
        path = tmp_path / ("r%d.ftnf" % k)
        write_features(path, arr)
        back = read_features(path)
        assert back.dtype == np.float32
        assert np.array_equal(
            back.view(np.uint32), arr.view(np.uint32)
        )  # bitwise, not just close


def test_feature_truncation_offset(tmp_path):
    path = tmp_path / "t.ftnf"
    header = struct.pack("<4sIII", b"FTNF", 1, 3, 2)
    path.write_bytes(header + b"\x00" * 10)  # needs 24 payload bytes
    with pytest.raises(ParseError) as exc:
        read_features(path)
    assert exc.value.offset == 16 + 10
    assert "offset 26" in str(exc.value)


def test_feature_header_errors(tmp_path):
    path = tmp_path / "h.ftnf"
    path.write_bytes(struct.pack("<4sIII", b"NOPE", 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(ParseError) as exc:
        read_features(path)
    assert exc.value.offset == 0

    path.write_bytes(struct.pack("<4sIII", b"FTNF", 9, 1, 1) + b"\x00" * 4)
    with pytest.raises(ParseError) as exc:
        read_features(path)
    assert exc.value.offset == 4

    path.write_bytes(struct.pack("<4sIII", b"FTNF", 1, 0, 1))
    with pytest.raises(ParseError) as exc:
        read_features(path)
    assert exc.value.offset == 8

    path.write_bytes(struct.pack("<4sIII", b"FTNF", 1, 1, 1) + b"\x00" * 8)
    with pytest.raises(ParseError) as exc:
        read_features(path)
    assert exc.value.offset == 20


def test_feature_rejects_nan(tmp_path):
    path = tmp_path / "n.ftnf"
    bad = struct.pack("<4sIII", b"FTNF", 1, 1, 2) + struct.pack("<2f", 1.0, np.nan)
    path.write_bytes(bad)
    with pytest.raises(DataError):
        read_features(path)


# ---------------------------------------------------------------------------
# annotations and full records


def test_annotation_round_trip_scores(tmp_path):
    rec = VideoRecord(
        video_id="a",
        features=np.zeros((6, 3), dtype=np.float32),
        shots=ShotList([(0, 3), (3, 6)]),
        user_scores=np.array([[0.0, 0.5, 1.0, 0.25, 0.0, 0.75]]),
    )
    fpath, apath = tmp_path / "a.ftnf", tmp_path / "a.json"
    write_features(fpath, rec.features)
    write_annotations(apath, rec)
    back = load_video(fpath, apath)
    assert back.video_id == "a"
    assert list(back.shots) == [(0, 3), (3, 6)]
    assert back.shots.source == "provided"
    assert np.array_equal(back.user_scores, rec.user_scores)
    assert back.user_masks is None


def test_annotation_round_trip_masks(tmp_path):
    rec = VideoRecord(
        video_id="b",
        features=np.ones((4, 2), dtype=np.float32),
        user_masks=np.array([[True, False, True, False], [False, True, True, False]]),
    )
    fpath, apath = tmp_path / "b.ftnf", tmp_path / "b.json"
    write_features(fpath, rec.features)
    write_annotations(apath, rec)
    back = load_video(fpath, apath)
    assert back.shots is None
    assert back.user_scores is None
    assert np.array_equal(back.user_masks, rec.user_masks)


def test_annotation_bad_json_offset(tmp_path):
    apath = tmp_path / "bad.json"
    apath.write_text('{"fps": }')
    with pytest.raises(ParseError):
        read_annotations(apath)


def test_load_video_length_mismatch(tmp_path):
    fpath, apath = tmp_path / "c.ftnf", tmp_path / "c.json"
    write_features(fpath, np.zeros((5, 2), dtype=np.float32))
    apath.write_text(json.dumps({
        "fps": {"original": 30, "sampled": 2},
        "shots": None,
        "user_kind": "scores",
        "users": [[0.0, 1.0]],  # wrong length
    }))
    with pytest.raises(DataError):
        load_video(fpath, apath)


def test_load_video_max_len(tmp_path):
    fpath, apath = tmp_path / "d.ftnf", tmp_path / "d.json"
    write_features(fpath, np.zeros((10, 2), dtype=np.float32))
    write_annotations(apath, VideoRecord("d", np.zeros((10, 2), dtype=np.float32)))
    with pytest.raises(DataError):
        load_video(fpath, apath, max_len=8)


# ---------------------------------------------------------------------------
# manifests


def build_tiny_dataset(tmp_path, n=3, seed=7):
    videos, meta = synth_dataset(
        n, (40, 60), 8, (3, 5), seed=seed, out_dir=str(tmp_path), name="tiny"
    )
    return videos, meta


def test_manifest_round_trip(tmp_path):
    videos, meta = build_tiny_dataset(tmp_path)
    ds = load_dataset(meta["manifest"])
    assert ds.name == "tiny"
    assert [v.video_id for v in ds.videos] == [v.video_id for v in videos]
    for orig, back in zip(videos, ds.videos):
        assert np.array_equal(
            back.features.view(np.uint32), orig.features.view(np.uint32)
        )
        assert list(back.shots) == list(orig.shots)
        assert np.allclose(back.user_scores, orig.user_scores)


def test_manifest_missing_file(tmp_path):
    write_manifest(
        tmp_path / "m.json", "x", [("v0", "v0.ftnf", "v0.json")]
    )
    with pytest.raises(DataError):
        load_dataset(tmp_path / "m.json")


def test_manifest_split_checks(tmp_path):
    videos, meta = build_tiny_dataset(tmp_path, n=2)
    ids = [v.video_id for v in videos]
    manifest = json.loads(open(meta["manifest"]).read())

    manifest["splits"] = [{"train": [ids[0]], "test": ids}]
    bad = tmp_path / "overlap.json"
    bad.write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_dataset(bad)

    manifest["splits"] = [{"train": ["ghost"], "test": [ids[1]]}]
    bad.write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_dataset(bad)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_deterministic():
    a_videos, a_meta = synth_dataset(4, (50, 90), 16, (3, 6), seed=11)
    b_videos, b_meta = synth_dataset(4, (50, 90), 16, (3, 6), seed=11)
    assert np.array_equal(a_meta["offset_direction"], b_meta["offset_direction"])
    for va, vb, ma, mb in zip(
        a_videos, b_videos, a_meta["planted_masks"], b_meta["planted_masks"]
    ):
        assert np.array_equal(va.features.view(np.uint32), vb.features.view(np.uint32))
        assert np.array_equal(ma, mb)
        assert np.array_equal(va.user_scores, vb.user_scores)
    c_videos, _ = synth_dataset(4, (50, 90), 16, (3, 6), seed=12)
    assert not np.array_equal(a_videos[0].features, c_videos[0].features)


def test_synth_planted_budget_exact():
    videos, meta = synth_dataset(8, (80, 160), 32, (4, 10), seed=3)
    for rec, mask, pshots in zip(
        videos, meta["planted_masks"], meta["planted_shots"]
    ):
        t = rec.n_frames
        assert mask.sum() == int(np.floor(0.15 * t))
        # planted mask is exactly the union of the planted shots
        want = np.zeros(t, dtype=bool)
        for i in pshots:
            s, e = rec.shots[i]
            want[s:e] = True
        assert np.array_equal(mask, want)
        assert rec.user_scores.shape == (3, t)
        assert rec.user_scores.min() >= 0.0 and rec.user_scores.max() <= 1.0


def test_synth_oracle_selector_recovers_planting():
    videos, meta = synth_dataset(10, (80, 160), 64, (4, 10), seed=5)
    fs = []
    for rec, mask in zip(videos, meta["planted_masks"]):
        scores = oracle_frame_scores(rec.features, meta)
        res = make_summary(scores, rec.shots, budget_ratio=meta["planted_fraction"])
        fs.append(f_of_masks(res.keyframe_mask, mask))
    assert min(fs) >= 95.0, fs


# ---------------------------------------------------------------------------
# archive import


def test_import_h5_archive(tmp_path):
    h5py = pytest.importorskip("h5py")
    h5_path = tmp_path / "arch.h5"
    rng = np.random.default_rng(0)
    with h5py.File(h5_path, "w") as fh:
        g = fh.create_group("video_1")
        g["features"] = rng.normal(size=(12, 4)).astype(np.float32)
        g["picks"] = np.arange(12) * 15
        g["change_points"] = np.array([[0, 59], [60, 104], [105, 179]])
        summ = np.zeros((2, 180))
        summ[0, 0:60] = 1
        summ[1, 105:180] = 1
        g["user_summary"] = summ
        g2 = fh.create_group("video_2")
        g2["features"] = rng.normal(size=(6, 4)).astype(np.float32)
        g2["gtscore"] = np.linspace(0, 1, 6)
    out = tmp_path / "converted"
    manifest = import_h5_archive(h5_path, out)
    ds = load_dataset(manifest)
    assert [v.video_id for v in ds.videos] == ["video_1", "video_2"]
    v1, v2 = ds.videos
    assert list(v1.shots) == [(0, 4), (4, 7), (7, 12)]
    assert v1.user_masks.shape == (2, 12)
    assert np.array_equal(v1.user_masks[0], np.arange(12) < 4)
    assert v2.shots is None
    assert v2.user_scores.shape == (1, 6)
