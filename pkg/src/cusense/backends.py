"""Pluggable inference backends for the dApp runtime.

A backend declares which telemetry type it consumes and the exact payload
size it expects, decodes and preprocesses the slot payload in prepare(), and
maps the prepared tensor to its output in infer(). prepare/infer are split so
the runtime can attribute preprocessing and inference latency separately.

Backends raise BackendInputError for payloads that fail their input contract;
the runtime skips those iterations and counts them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from cusense import pipeline
from cusense.emulator import SceneConfig, synth_background, target_perturbation
from cusense.nn import ModelGraph, softmax
from cusense.pipeline import BackgroundTemplate, NormStats
from cusense.plane import DataType
from cusense.tracking import GridGeometry

BACKEND_NAMES = ("iq_processor", "cusense", "matched_filter")

IQ_DIMS = (4, 14, 273, 12, 2)


class BackendError(Exception):
    pass


class BackendInputError(BackendError):
    """Input violates the backend's contract; the iteration is skipped."""


class IqProcessorBackend:
    """Average uplink power per PRB from the raw IQ tensor.

    Accumulates I^2 + Q^2 over antennas, OFDM symbols, and subcarriers in
    double precision; emits one float32 value per PRB.
    """

    name = "iq_processor"
    data_type = int(DataType.IQ)

    def __init__(self, dims: tuple[int, int, int, int, int] = IQ_DIMS):
        if dims[-1] != 2:
            raise BackendError("last axis must hold the I/Q pair")
        self.dims = dims
        self.payload_nbytes = int(np.prod(dims)) * 2  # float16

    def prepare(self, tti: int, payload: bytes) -> np.ndarray:
        if len(payload) != self.payload_nbytes:
            raise BackendInputError(
                f"IQ payload {len(payload)} B, contract wants {self.payload_nbytes} B "
                f"{self.dims}")
        return np.frombuffer(payload, dtype=np.float16).reshape(self.dims)

    def infer(self, iq: np.ndarray) -> np.ndarray:
        if iq.shape != self.dims:
            raise BackendInputError(f"IQ dims {iq.shape}, contract {self.dims}")
        sq = np.square(iq, dtype=np.float64)
        if not np.isfinite(sq).all():
            raise BackendError("non-finite IQ samples")
        n_a, n_s, _, n_sc, _ = self.dims
        power = sq.sum(axis=(0, 1, 3, 4)) / (n_a * n_s * n_sc)
        return power.astype(np.float32)


class _CsiWindowBackend:
    """Shared live-feature preprocessing: causal window, coherent average,
    magnitude background subtraction, DMRS reduction."""

    data_type = int(DataType.HEST)

    def __init__(self, template: BackgroundTemplate, shape: tuple[int, int, int],
                 tti_period_ns: int, window_ns: int = 2_000_000):
        self.template = template
        self.shape = shape
        self.tti_period_ns = tti_period_ns
        self.window_ns = window_ns
        self.valid_mask = template.valid_subcarrier_mask
        self.payload_nbytes = int(np.prod(shape)) * 8  # complex64
        self._window: deque[tuple[int, np.ndarray]] = deque()

    def prepare(self, tti: int, payload: bytes) -> np.ndarray:
        if len(payload) != self.payload_nbytes:
            raise BackendInputError(
                f"HEST payload {len(payload)} B, contract wants {self.payload_nbytes} B "
                f"{self.shape}")
        csi = np.frombuffer(payload, dtype=np.complex64).reshape(self.shape)
        t_ns = tti * self.tti_period_ns
        self._window.append((t_ns, csi))
        while self._window and self._window[0][0] < t_ns - self.window_ns:
            self._window.popleft()
        avg = pipeline.coherent_average([c for _, c in self._window], self.template.tau)
        return pipeline.subtract_and_reduce(avg, self.template, self.valid_mask)

    def reset(self) -> None:
        self._window.clear()


class CusenseBackend(_CsiWindowBackend):
    """Windowed background-subtracted features, normalized and fed through
    the neural network."""

    name = "cusense"

    def __init__(self, model: ModelGraph, template: BackgroundTemplate,
                 stats: NormStats, shape: tuple[int, int, int],
                 tti_period_ns: int, window_ns: int = 2_000_000):
        super().__init__(template, shape, tti_period_ns, window_ns)
        self.model = model
        self.stats = stats
        if int(self.valid_mask.sum()) < 16:
            raise BackendError("too few valid subcarriers for the network")

    def infer(self, features: np.ndarray) -> np.ndarray:
        x = pipeline.zscore(features, self.stats).astype(np.float32)
        return self.model.forward(x)


class MatchedFilterBackend(_CsiWindowBackend):
    """Nearest background-subtracted template over a per-cell dictionary.

    The magnitude-domain feature of a target at sub-cell offsets rotates with
    the carrier phase of its path (one cycle per half wavelength of motion),
    so a single template per cell cannot match arbitrary positions inside the
    cell. The dictionary therefore spans each cell's feature manifold with an
    orthonormal two-vector basis plus an offset (see
    build_matched_filter_dictionary), and scoring projects the live feature
    onto every cell's subspace. The output grid is a softmax over projection
    energies with a spread-adaptive temperature, so downstream averaging has
    graded mass to work with.
    """

    name = "matched_filter"

    def __init__(self, dictionary: "MatchedFilterDictionary",
                 template: BackgroundTemplate, tti_period_ns: int,
                 window_ns: int = 2_000_000):
        super().__init__(template, dictionary.shape, tti_period_ns, window_ns)
        self.dictionary = dictionary

    def infer(self, features: np.ndarray) -> np.ndarray:
        d = self.dictionary
        x = features[:, d.column_idx].ravel().astype(np.float32)
        score = (d.u_basis @ x - d.u_offset) ** 2 + (d.v_basis @ x - d.v_offset) ** 2
        score = score.astype(np.float64)
        spread = float(score.max() - np.median(score))
        scale = max(spread / 16.0, 1e-30)
        return softmax(score / scale).reshape(d.grid_h, d.grid_w)


@dataclass
class MatchedFilterDictionary:
    """Per-cell feature subspace from the emulator's channel model.

    For cell c with noiseless perturbation signature P_c, the live feature is
    approximately f(phi) = c0_c + cos(phi) u_c + sin(phi) v_c with phi the
    unknown sub-cell carrier phase. u/v come from four phase probes of the
    exact pipeline; each row here is the orthonormalized pair with the offset
    projections folded in, so score_c(x) reduces to two mat-vecs.
    """

    u_basis: np.ndarray  # [H*W, F] float32, unit rows
    v_basis: np.ndarray  # [H*W, F] float32, unit rows orthogonal to u
    u_offset: np.ndarray  # [H*W] c0_c . u_c
    v_offset: np.ndarray  # [H*W] c0_c . v_c
    column_idx: np.ndarray  # subcarrier columns kept after decimation
    shape: tuple[int, int, int]
    grid_h: int
    grid_w: int


PHASE_PROBES = (1.0, 1.0j, -1.0, -1.0j)


def build_matched_filter_dictionary(cfg: SceneConfig, template: BackgroundTemplate,
                                    geometry: GridGeometry,
                                    decimate: int = 4) -> MatchedFilterDictionary:
    """Expected feature subspaces for every cell center.

    Each cell is probed at four carrier phases of its noiseless target path
    through the full live feature computation (magnitude subtraction
    against the estimated background, DMRS reduction, decimation); the probes
    yield the phase-invariant offset and an orthonormal basis of the phase
    circle. Decimation keeps every decimate-th valid subcarrier to bound the
    per-TTI cost.
    """
    background = synth_background(cfg).astype(np.complex128)
    valid = template.valid_subcarrier_mask
    k_v = int(valid.sum())
    column_idx = np.arange(0, k_v, max(decimate, 1))
    shape = (cfg.antennas, cfg.subcarriers, cfg.dmrs_symbols)

    u_rows, v_rows, u_off, v_off = [], [], [], []
    for i in range(geometry.h):
        for j in range(geometry.w):
            pert = target_perturbation(cfg, geometry.cell_to_world(i, j))
            probes = []
            for phase in PHASE_PROBES:
                csi = background.copy()
                csi[:, cfg.active_slice, :] += phase * pert[:, cfg.active_slice, None]
                feat = pipeline.subtract_and_reduce(csi, template, valid)
                probes.append(feat[:, column_idx].ravel())
            c0 = np.mean(probes, axis=0)
            u = (probes[0] - probes[2]) / 2
            v = (probes[1] - probes[3]) / 2
            u_n = u / np.linalg.norm(u)
            v = v - (v @ u_n) * u_n
            v_n = v / np.linalg.norm(v)
            u_rows.append(u_n)
            v_rows.append(v_n)
            u_off.append(c0 @ u_n)
            v_off.append(c0 @ v_n)
    return MatchedFilterDictionary(
        u_basis=np.stack(u_rows).astype(np.float32),
        v_basis=np.stack(v_rows).astype(np.float32),
        u_offset=np.array(u_off, dtype=np.float32),
        v_offset=np.array(v_off, dtype=np.float32),
        column_idx=column_idx,
        shape=shape,
        grid_h=geometry.h,
        grid_w=geometry.w,
    )
