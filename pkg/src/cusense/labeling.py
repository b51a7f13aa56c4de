"""Ground-truth construction: clock alignment, homography projection of image
detections onto the floor plane, grid quantization, and dataset export.

Channel records carry TAI nanosecond timestamps; camera frames carry UTC.
Alignment converts t_utc = t_tai - leap_offset - skew and assigns each channel
record to the nearest frame iff the gap is at most half the frame period
(inclusive). One frame may serve many channel records.

Dataset container ("CUSD0001"): header magic 8s, version u32, antennas u32,
subcarriers u32, dmrs_symbols u32, grid_h u32, grid_w u32, area_w f64,
area_d f64, record_count u64; then per record: tti u64, t_ns u64, x f64,
y f64, cell_i u32, cell_j u32, split u8, csi complex64 [A, K, S] row-major.
A flat CSV export (one feature column per antenna-subcarrier bin) feeds the
offline trainer.
"""

from __future__ import annotations

import bisect
import csv
import struct
from dataclasses import dataclass

import numpy as np

from cusense.tracking import GridGeometry

DATASET_MAGIC = b"CUSD0001"
DATASET_VERSION = 1
_HEADER_FMT = "<8sIIIIIIddQ"

TAI_UTC_OFFSET_S = 37.0

SPLIT_TAGS = {"train": 0, "val": 1, "test": 2, "unseen": 3}
SPLIT_NAMES = {v: k for k, v in SPLIT_TAGS.items()}


class LabelingError(Exception):
    pass


@dataclass(frozen=True)
class SyncConfig:
    frame_period_s: float
    tai_utc_offset_s: float = TAI_UTC_OFFSET_S
    clock_skew_s: float = 0.0

    def __post_init__(self):
        if self.frame_period_s <= 0:
            raise LabelingError("frame_period_s must be positive")


# -- homography ------------------------------------------------------------------

@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so matrix[2, 2] == 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise LabelingError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12 or abs(np.linalg.det(m)) < 1e-9:
            raise LabelingError("degenerate homography")
        object.__setattr__(self, "matrix", m / m[2, 2])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def _collinear(p, q, r, tol=1e-9) -> bool:
    return abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) < tol


def estimate_homography(image_pts, world_pts) -> Homography:
    """Exact DLT from 4 point correspondences (8 unknowns, h22 = 1)."""
    img = np.asarray(image_pts, dtype=np.float64)
    world = np.asarray(world_pts, dtype=np.float64)
    if img.shape != (4, 2) or world.shape != (4, 2):
        raise LabelingError("need exactly 4 image and 4 world points")
    for pts in (img, world):
        for a in range(4):
            for b in range(a + 1, 4):
                for c in range(b + 1, 4):
                    if _collinear(pts[a], pts[b], pts[c]):
                        raise LabelingError("degenerate configuration: 3 points collinear")
    a_mat = np.zeros((8, 8))
    rhs = np.zeros(8)
    for n, ((u, v), (x, y)) in enumerate(zip(img, world)):
        a_mat[2 * n] = [u, v, 1, 0, 0, 0, -u * x, -v * x]
        a_mat[2 * n + 1] = [0, 0, 0, u, v, 1, -u * y, -v * y]
        rhs[2 * n] = x
        rhs[2 * n + 1] = y
    try:
        h = np.linalg.solve(a_mat, rhs)
    except np.linalg.LinAlgError:
        raise LabelingError("degenerate configuration: DLT system singular") from None
    return Homography(np.append(h, 1.0).reshape(3, 3))


def project(h: Homography, point) -> tuple[float, float]:
    """Image (u, v) -> floor (x, y) through the homography."""
    u, v = float(point[0]), float(point[1])
    vec = h.matrix @ np.array([u, v, 1.0])
    if abs(vec[2]) < 1e-12:
        raise LabelingError(f"point {point} maps to infinity")
    return float(vec[0] / vec[2]), float(vec[1] / vec[2])


# -- temporal alignment --------------------------------------------------------------

@dataclass
class AlignResult:
    pairs: list[tuple[int, int]]  # (csi_index, frame_index)
    dropped: int


def align(csi_times_tai_ns, frame_times_utc_ns, cfg: SyncConfig) -> AlignResult:
    """Match each channel record to its nearest frame within half a frame period."""
    csi_times = list(csi_times_tai_ns)
    frames = list(frame_times_utc_ns)
    for seq, tag in ((csi_times, "csi"), (frames, "frame")):
        if any(b < a for a, b in zip(seq, seq[1:])):
            raise LabelingError(f"{tag} stream not sorted")
    if not frames:
        return AlignResult([], len(csi_times))
    shift_ns = int(round((cfg.tai_utc_offset_s + cfg.clock_skew_s) * 1e9))
    half_period_ns = cfg.frame_period_s * 1e9 / 2
    pairs = []
    dropped = 0
    for i, t_tai in enumerate(csi_times):
        t = t_tai - shift_ns
        k = bisect.bisect_left(frames, t)
        best = None
        for cand in (k - 1, k):
            if 0 <= cand < len(frames):
                d = abs(frames[cand] - t)
                if best is None or d < best[1]:
                    best = (cand, d)
        if best is not None and best[1] <= half_period_ns:
            pairs.append((i, best[0]))
        else:
            dropped += 1
    return AlignResult(pairs, dropped)


# -- splits ------------------------------------------------------------------------------

def make_splits(n_records: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Tag records train/val/test with val and test as two disjoint contiguous
    blocks at seeded-random positions; remainder is train."""
    if n_records < 10:
        raise LabelingError(f"run too short for splitting ({n_records} records)")
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise LabelingError("fractions must sum to 1")
    n_val = round(n_records * f_val)
    n_test = round(n_records * f_test)
    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        v0 = int(rng.integers(0, n_records - n_val + 1))
        t0 = int(rng.integers(0, n_records - n_test + 1))
        if v0 + n_val <= t0 or t0 + n_test <= v0:
            tags = np.zeros(n_records, dtype=np.uint8)
            tags[v0:v0 + n_val] = SPLIT_TAGS["val"]
            tags[t0:t0 + n_test] = SPLIT_TAGS["test"]
            return tags
    raise LabelingError("could not place disjoint val/test blocks")


# -- dataset records and container --------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    tti: int
    timestamp_ns: int
    csi: np.ndarray  # [A, K, S] complex64
    pos: tuple[float, float]
    cell: tuple[int, int]
    split: str


@dataclass
class DatasetHeader:
    antennas: int
    subcarriers: int
    dmrs_symbols: int
    geometry: GridGeometry


def write_dataset(path, header: DatasetHeader, records) -> int:
    records = list(records)
    geo = header.geometry
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER_FMT, DATASET_MAGIC, DATASET_VERSION,
                            header.antennas, header.subcarriers, header.dmrs_symbols,
                            geo.h, geo.w, geo.width_m, geo.depth_m, len(records)))
        for r in records:
            csi = np.ascontiguousarray(r.csi, dtype=np.complex64)
            if csi.shape != (header.antennas, header.subcarriers, header.dmrs_symbols):
                raise LabelingError(f"record tti={r.tti}: csi shape {csi.shape} "
                                    f"does not match header")
            f.write(struct.pack("<QQddIIB", r.tti, r.timestamp_ns, r.pos[0], r.pos[1],
                                r.cell[0], r.cell[1], SPLIT_TAGS[r.split]))
            f.write(csi.tobytes())
    return len(records)


def read_dataset(path) -> tuple[DatasetHeader, list[DatasetRecord]]:
    with open(path, "rb") as f:
        data = f.read()
    head = struct.calcsize(_HEADER_FMT)
    if len(data) < head or data[:8] != DATASET_MAGIC:
        raise LabelingError(f"{path}: not a dataset file")
    (_, version, a, k, s, gh, gw, width, depth, count) = struct.unpack_from(_HEADER_FMT, data, 0)
    if version != DATASET_VERSION:
        raise LabelingError(f"{path}: unsupported dataset version {version}")
    geo = GridGeometry(gh, gw, width, depth)
    rec_fixed = struct.calcsize("<QQddIIB")
    csi_bytes = a * k * s * 8
    pos = head
    records = []
    for _ in range(count):
        if pos + rec_fixed + csi_bytes > len(data):
            raise LabelingError(f"{path}: truncated record stream")
        tti, t_ns, x, y, ci, cj, split = struct.unpack_from("<QQddIIB", data, pos)
        pos += rec_fixed
        csi = np.frombuffer(data[pos:pos + csi_bytes], dtype=np.complex64).reshape(a, k, s)
        pos += csi_bytes
        records.append(DatasetRecord(tti, t_ns, csi.copy(), (x, y), (ci, cj),
                                     SPLIT_NAMES[split]))
    return DatasetHeader(a, k, s, geo), records


def quantize_consistent(record: DatasetRecord, geo: GridGeometry) -> bool:
    """Whether the stored cell re-derives from the stored position."""
    return geo.world_to_cell(*record.pos) == record.cell


# -- feature CSV for the trainer -------------------------------------------------------------

def write_feature_csv(path, rows, feature_dim: int) -> None:
    """rows: iterable of (tti, t_ns, x, y, cell_i, cell_j, split, features[f])."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tti", "t_ns", "x_m", "y_m", "cell_i", "cell_j", "split"]
                   + [f"f{i}" for i in range(feature_dim)])
        for tti, t_ns, x, y, ci, cj, split, feats in rows:
            if len(feats) != feature_dim:
                raise LabelingError(f"row tti={tti}: {len(feats)} features, "
                                    f"expected {feature_dim}")
            w.writerow([tti, t_ns, f"{x:.6f}", f"{y:.6f}", ci, cj, split]
                       + [f"{v:.8g}" for v in feats])


def read_detections_csv(path):
    """Detection rows (t_ns, u, v, confidence); keeps the best row per t_ns."""
    best: dict[int, tuple[float, float, float]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["t_ns", "u", "v", "confidence"]:
            raise LabelingError(f"{path}: expected header t_ns,u,v,confidence")
        for row in reader:
            if not row:
                continue
            t_ns = int(row[0])
            u, v, conf = float(row[1]), float(row[2]), float(row[3])
            if t_ns not in best or conf > best[t_ns][2]:
                best[t_ns] = (u, v, conf)
    return [(t, u, v, c) for t, (u, v, c) in sorted(best.items())]
