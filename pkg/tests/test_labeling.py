"""Homography, time alignment, split construction, dataset round trips."""

import numpy as np
import pytest

import oracles
from cusense.labeling import (
    DatasetHeader,
    DatasetRecord,
    Homography,
    LabelingError,
    SyncConfig,
    align,
    estimate_homography,
    make_splits,
    project,
    quantize_consistent,
    read_dataset,
    read_detections_csv,
    write_dataset,
    write_feature_csv,
)
from cusense.tracking import GridGeometry

RNG = np.random.default_rng(31)

UNIT_SQUARE = [(0, 0), (1, 0), (1, 1), (0, 1)]


def test_identity_homography():
    h = estimate_homography(UNIT_SQUARE, UNIT_SQUARE)
    assert np.allclose(h.matrix, np.eye(3), atol=1e-12)


def test_scaling_homography():
    h = estimate_homography(UNIT_SQUARE, [(0, 0), (2, 0), (2, 2), (0, 2)])
    assert np.allclose(h.matrix, np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def _random_quad(rng, span=10.0):
    while True:
        pts = rng.uniform(0, span, (4, 2))
        ok = True
        for a in range(4):
            for b in range(a + 1, 4):
                for c in range(b + 1, 4):
                    area2 = abs((pts[b, 0] - pts[a, 0]) * (pts[c, 1] - pts[a, 1])
                                - (pts[b, 1] - pts[a, 1]) * (pts[c, 0] - pts[a, 0]))
                    if area2 < 1.0:
                        ok = False
        if ok:
            return pts


def test_random_quads_reproject_corners():
    for _ in range(50):
        img = _random_quad(RNG)
        world = _random_quad(RNG)
        h = estimate_homography(img, world)
        for (u, v), (x, y) in zip(img, world):
            px, py = project(h, (u, v))
            assert abs(px - x) < 1e-6 and abs(py - y) < 1e-6


def test_collinear_rejected():
    bad = [(0, 0), (1, 1), (2, 2), (0, 5)]
    with pytest.raises(LabelingError, match="collinear"):
        estimate_homography(bad, UNIT_SQUARE)


def test_project_identity_and_scale():
    ident = Homography(np.eye(3))
    assert project(ident, (3, 4)) == (3.0, 4.0)
    scale2 = Homography(np.diag([2.0, 2.0, 1.0]))
    assert project(scale2, (1, 1)) == (2.0, 2.0)


def test_project_inverse_roundtrip():
    h = estimate_homography(_random_quad(RNG), _random_quad(RNG))
    for _ in range(20):
        p = tuple(RNG.uniform(0, 10, 2))
        q = project(h.inverse(), project(h, p))
        assert abs(q[0] - p[0]) < 1e-9 and abs(q[1] - p[1]) < 1e-9


def test_project_matches_oracle():
    h = estimate_homography(_random_quad(RNG), _random_quad(RNG))
    for _ in range(20):
        u, v = RNG.uniform(0, 10, 2)
        assert np.allclose(project(h, (u, v)),
                           oracles.homography_apply(h.matrix.tolist(), u, v), atol=1e-12)


def test_degenerate_matrix_rejected():
    with pytest.raises(LabelingError, match="degenerate"):
        Homography(np.zeros((3, 3)))


# -- alignment ------------------------------------------------------------------

FRAME_NS = 33_333_333  # ~30 fps


def _cfg(skew=0.0):
    return SyncConfig(frame_period_s=FRAME_NS / 1e9, clock_skew_s=skew)


def tai(t_utc_ns: int) -> int:
    return t_utc_ns + 37 * 10**9


def test_align_exact_hit():
    frames = [10**9, 10**9 + FRAME_NS]
    res = align([tai(10**9)], frames, _cfg())
    assert res.pairs == [(0, 0)] and res.dropped == 0


def test_align_half_period_inclusive():
    frames = [10**9]
    on_edge = tai(10**9 + FRAME_NS // 2)
    res = align([on_edge], frames, _cfg())
    assert res.pairs == [(0, 0)]
    past_edge = tai(10**9 + FRAME_NS // 2 + FRAME_NS)
    assert align([past_edge], frames, _cfg()).dropped == 1


def test_align_many_csi_per_frame():
    frames = [10**9 + k * FRAME_NS for k in range(4)]
    csi = [tai(10**9 + k * 2_000_000) for k in range(60)]
    res = align(csi, frames, _cfg())
    matched_frames = {f for _, f in res.pairs}
    assert len(res.pairs) + res.dropped == 60
    assert matched_frames == {0, 1, 2, 3}


def test_align_matches_bruteforce_oracle():
    frames = sorted(int(t) for t in RNG.integers(0, 10**10, 200))
    csi = sorted(int(t) for t in RNG.integers(0, 10**10, 500))
    cfg = _cfg(skew=0.002)
    res = align([t + 37 * 10**9 + 2_000_000 for t in csi], frames, cfg)
    got = dict(res.pairs)
    half = FRAME_NS / 2
    for i, t in enumerate(csi):
        j, d = oracles.nearest_frame(frames, t)
        if d <= half:
            assert got[i] == j
        else:
            assert i not in got


def test_align_translation_invariant():
    frames = sorted(int(t) for t in RNG.integers(0, 10**10, 100))
    csi = [tai(int(t)) for t in sorted(RNG.integers(0, 10**10, 300))]
    base = align(csi, frames, _cfg())
    shift = 55_123_456_789
    shifted = align([t + shift for t in csi], [t + shift for t in frames], _cfg())
    assert base.pairs == shifted.pairs and base.dropped == shifted.dropped


def test_align_rejects_unsorted():
    with pytest.raises(LabelingError, match="not sorted"):
        align([5, 3], [1, 2], _cfg())


# -- splits -----------------------------------------------------------------------

def test_split_fractions_and_shape():
    tags = make_splits(100, seed=4)
    assert len(tags) == 100
    assert (tags == 1).sum() == 10 and (tags == 2).sum() == 10 and (tags == 0).sum() == 80
    for v in (1, 2):
        idx = np.flatnonzero(tags == v)
        assert (np.diff(idx) == 1).all()  # contiguous block


def test_split_deterministic_per_seed():
    assert (make_splits(500, seed=9) == make_splits(500, seed=9)).all()
    assert not (make_splits(500, seed=9) == make_splits(500, seed=10)).all()


def test_split_blocks_never_overlap_property():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(10, 2000))
        tags = make_splits(n, seed=int(rng.integers(0, 10**6)))
        n_val = round(n * 0.1)
        n_test = round(n * 0.1)
        assert (tags == 1).sum() == n_val
        assert (tags == 2).sum() == n_test
        assert (tags == 0).sum() == n - n_val - n_test
        for v in (1, 2):
            idx = np.flatnonzero(tags == v)
            if len(idx):
                assert (np.diff(idx) == 1).all()


def test_split_too_short():
    with pytest.raises(LabelingError, match="too short"):
        make_splits(9)


# -- dataset container ----------------------------------------------------------------

def _records(n, a=2, k=24, s=2):
    geo = GridGeometry(8, 8)
    out = []
    for t in range(n):
        csi = (RNG.standard_normal((a, k, s)) + 1j * RNG.standard_normal((a, k, s)))
        pos = (float(RNG.uniform(0, geo.width_m)), float(RNG.uniform(0, geo.depth_m)))
        out.append(DatasetRecord(t, t * 500_000, csi.astype(np.complex64), pos,
                                 geo.world_to_cell(*pos), "train"))
    return DatasetHeader(a, k, s, geo), out


def test_dataset_roundtrip(tmp_path):
    header, records = _records(20)
    path = tmp_path / "run.cusd"
    assert write_dataset(path, header, records) == 20
    header2, loaded = read_dataset(path)
    assert header2.antennas == 2 and header2.subcarriers == 24
    assert header2.geometry == header.geometry
    for a, b in zip(records, loaded):
        assert a.tti == b.tti and a.cell == b.cell and a.split == b.split
        assert np.array_equal(a.csi.astype(np.complex64), b.csi)
        assert quantize_consistent(b, header2.geometry)


def test_dataset_rejects_bad_shape(tmp_path):
    header, records = _records(3)
    bad = DatasetRecord(9, 0, np.zeros((1, 1, 1), dtype=np.complex64), (0, 0), (0, 0), "val")
    with pytest.raises(LabelingError, match="shape"):
        write_dataset(tmp_path / "bad.cusd", header, records + [bad])


def test_dataset_truncation_detected(tmp_path):
    header, records = _records(5)
    path = tmp_path / "run.cusd"
    write_dataset(path, header, records)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(LabelingError, match="truncated"):
        read_dataset(path)


def test_feature_csv_and_detections(tmp_path):
    rows = [(t, t * 10, 1.0, 2.0, 3, 4, "train", [0.1 * t, 0.2]) for t in range(5)]
    fpath = tmp_path / "features.csv"
    write_feature_csv(fpath, rows, feature_dim=2)
    text = fpath.read_text().splitlines()
    assert text[0] == "tti,t_ns,x_m,y_m,cell_i,cell_j,split,f0,f1"
    assert len(text) == 6

    dpath = tmp_path / "det.csv"
    dpath.write_text("t_ns,u,v,confidence\n100,5.0,6.0,0.9\n100,7.0,8.0,0.4\n200,1.0,1.0,0.5\n")
    dets = read_detections_csv(dpath)
    assert dets == [(100, 5.0, 6.0, 0.9), (200, 1.0, 1.0, 0.5)]
