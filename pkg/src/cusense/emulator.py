"""Uplink RAN emulator: synthetic per-TTI CSI/IQ for a static scene plus a
moving target, written into the telemetry plane at TTI cadence.

Scene geometry is bistatic: a fixed transmitter in one corner of the target
area, a receive array of A antennas (half-wavelength spacing) centered on the
opposite edge, and the target modeled as one specular path TX -> target -> RX.
The static environment is a sum of random multipath taps, identical in every
slot; the target path adds amplitude rho / d^2 (d = round-trip path length via
the array center), a linear phase across subcarriers from the path delay, and
per-antenna phase from the per-element path difference. Per-slot noise is
i.i.d. circular complex Gaussian sized against the mean background power.

All synthesis is deterministic in (rng_seed, noise_seed/tti).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from cusense.plane import DataType, PlaneHandle

C_LIGHT = 299_792_458.0

_SLEEP_SLACK_NS = 500_000  # sleep() wakeup jitter absorbed by spinning

DMRS_SYMBOL_POSITIONS = (2, 7, 11)  # within the 14-symbol slot
OFDM_SYMBOLS = 14
SUBCARRIERS_PER_PRB = 12

FAPI_META_FMT = "<IIII"  # cell_id, rnti, prb_start, prb_count


class EmulatorError(Exception):
    pass


class PacingOverrunError(EmulatorError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    antennas: int = 4
    subcarriers: int = 3276  # 273 PRB x 12
    dmrs_symbols: int = 3
    area_m: tuple[float, float] = (6.78, 10.06)  # (width, depth)
    background_taps: int = 12
    snr_db: float = 25.0
    rng_seed: int = 0
    carrier_hz: float = 3.65e9
    scs_hz: float = 30e3
    prb_start: int = 0
    prb_count: int | None = None  # None = full allocation
    target_reflectivity: float = 25.0
    tx_margin_m: float = 0.4

    def __post_init__(self):
        if self.antennas < 1 or self.subcarriers < 12 or self.dmrs_symbols < 1:
            raise EmulatorError("need antennas >= 1, subcarriers >= 12, dmrs_symbols >= 1")
        if not math.isfinite(self.snr_db) and self.snr_db != math.inf:
            raise EmulatorError("snr_db must be finite or +inf")
        if self.subcarriers % SUBCARRIERS_PER_PRB:
            raise EmulatorError("subcarriers must be a multiple of 12")

    @property
    def total_prb(self) -> int:
        return self.subcarriers // SUBCARRIERS_PER_PRB

    @property
    def active_prb(self) -> int:
        return self.total_prb if self.prb_count is None else self.prb_count

    @property
    def active_slice(self) -> slice:
        lo = self.prb_start * SUBCARRIERS_PER_PRB
        return slice(lo, lo + self.active_prb * SUBCARRIERS_PER_PRB)

    @property
    def wavelength_m(self) -> float:
        return C_LIGHT / self.carrier_hz

    @property
    def rx_positions(self) -> np.ndarray:
        """[A, 2] antenna coordinates, half-wavelength line on the y=0 edge."""
        width, _ = self.area_m
        spacing = self.wavelength_m / 2
        idx = np.arange(self.antennas) - (self.antennas - 1) / 2
        return np.stack([width / 2 + idx * spacing, np.zeros(self.antennas)], axis=1)

    @property
    def tx_position(self) -> np.ndarray:
        width, depth = self.area_m
        return np.array([width - self.tx_margin_m, depth - self.tx_margin_m])

    @property
    def subcarrier_freqs(self) -> np.ndarray:
        """Absolute subcarrier frequencies [K]."""
        k = np.arange(self.subcarriers) - self.subcarriers / 2
        return self.carrier_hz + k * self.scs_hz

    @property
    def hest_nbytes(self) -> int:
        return self.antennas * self.subcarriers * self.dmrs_symbols * 8  # complex64

    @property
    def iq_nbytes(self) -> int:
        return self.antennas * OFDM_SYMBOLS * self.subcarriers * 2 * 2  # fp16 pairs


@dataclass(frozen=True)
class Taps:
    """Static multipath taps: complex gains, delays, arrival angles."""

    gains: np.ndarray   # [T] complex
    delays_s: np.ndarray  # [T]
    aoas_rad: np.ndarray  # [T]


def make_taps(cfg: SceneConfig) -> Taps:
    rng = np.random.default_rng(cfg.rng_seed)
    t = cfg.background_taps
    gains = (rng.standard_normal(t) + 1j * rng.standard_normal(t)) / math.sqrt(max(2 * t, 1))
    delays = rng.uniform(0.0, 350e-9, t)
    aoas = rng.uniform(-1.4, 1.4, t)
    return Taps(gains, delays, aoas)


def tap_response(cfg: SceneConfig, amplitude: complex, delay_s: float, aoa_rad: float) -> np.ndarray:
    """One tap's [A, K] response: amplitude * exp(-2i*pi*tau*f_k + i*phi_a)."""
    freqs = cfg.subcarrier_freqs
    phase_k = np.exp(-2j * np.pi * delay_s * freqs)
    spacing = cfg.wavelength_m / 2
    a_idx = np.arange(cfg.antennas)
    phase_a = np.exp(-2j * np.pi * (spacing * a_idx / cfg.wavelength_m) * math.sin(aoa_rad))
    return amplitude * phase_a[:, None] * phase_k[None, :]


def synth_background(cfg: SceneConfig, taps: Taps | None = None) -> np.ndarray:
    """Static channel [A, K, S] complex64; identical across DMRS symbols,
    exactly zero on inactive subcarriers."""
    if taps is None:
        taps = make_taps(cfg)
    h = np.zeros((cfg.antennas, cfg.subcarriers), dtype=np.complex128)
    for g, tau, aoa in zip(taps.gains, taps.delays_s, taps.aoas_rad):
        h += tap_response(cfg, g, tau, aoa)
    mask = np.zeros(cfg.subcarriers, dtype=bool)
    mask[cfg.active_slice] = True
    h[:, ~mask] = 0
    out = np.repeat(h[:, :, None], cfg.dmrs_symbols, axis=2)
    return out.astype(np.complex64)


def target_path_length(cfg: SceneConfig, target_pos) -> float:
    """Round-trip path length TX -> target -> array center, in meters."""
    pos = np.asarray(target_pos, dtype=float)
    rx_center = cfg.rx_positions.mean(axis=0)
    return float(np.linalg.norm(cfg.tx_position - pos) + np.linalg.norm(pos - rx_center))


def target_perturbation(cfg: SceneConfig, target_pos) -> np.ndarray:
    """Target path contribution [A, K]: constant modulus rho/d^2 per cell."""
    pos = np.asarray(target_pos, dtype=float)
    width, depth = cfg.area_m
    if not (0.0 <= pos[0] <= width and 0.0 <= pos[1] <= depth):
        raise EmulatorError(f"target position {tuple(pos)} outside {cfg.area_m} area")
    d1 = float(np.linalg.norm(cfg.tx_position - pos))
    d2 = np.linalg.norm(cfg.rx_positions - pos[None, :], axis=1)  # [A]
    amp = cfg.target_reflectivity / target_path_length(cfg, pos) ** 2
    tau_a = (d1 + d2) / C_LIGHT  # [A]
    phase = np.exp(-2j * np.pi * tau_a[:, None] * cfg.subcarrier_freqs[None, :])
    return amp * phase


def noise_power(cfg: SceneConfig, background: np.ndarray) -> float:
    """Per-cell complex noise power at cfg.snr_db against mean background power."""
    if cfg.snr_db == math.inf:
        return 0.0
    active = background[:, cfg.active_slice, :]
    p_sig = float(np.mean(np.abs(active) ** 2)) if active.size else 1.0
    if p_sig == 0.0:
        p_sig = 1.0
    return p_sig / 10 ** (cfg.snr_db / 10)


def synth_csi(cfg: SceneConfig, background: np.ndarray, target_pos=None,
              noise_seed: int = 0) -> np.ndarray:
    """One slot's channel estimate [A, K, S] complex64."""
    h = background.astype(np.complex128, copy=True)
    if target_pos is not None:
        h[:, cfg.active_slice, :] += target_perturbation(cfg, target_pos)[:, cfg.active_slice, None]
    p_n = noise_power(cfg, background)
    if p_n > 0.0:
        rng = np.random.default_rng((cfg.rng_seed, 0x5EED, noise_seed))
        act = cfg.active_slice
        shape = h[:, act, :].shape
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        h[:, act, :] += noise * math.sqrt(p_n / 2)
    return h.astype(np.complex64)


def synth_iq(cfg: SceneConfig, hest: np.ndarray, noise_seed: int = 0) -> np.ndarray:
    """DMRS-bearing IQ tensor [A, 14, PRB, 12, 2] float16 consistent with hest.

    DMRS symbols carry the channel response directly; the remaining symbols
    carry unit-power QPSK through the nearest DMRS response plus noise.
    """
    a, k, s = hest.shape
    rng = np.random.default_rng((cfg.rng_seed, 0x10, noise_seed))
    grid = np.empty((a, OFDM_SYMBOLS, k), dtype=np.complex64)
    dmrs_pos = DMRS_SYMBOL_POSITIONS[:s]
    nearest = np.argmin(np.abs(np.arange(OFDM_SYMBOLS)[:, None] - np.array(dmrs_pos)[None, :]), axis=1)
    qpsk = np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, (OFDM_SYMBOLS, k))))
    for sym in range(OFDM_SYMBOLS):
        ref = hest[:, :, nearest[sym]]
        if sym in dmrs_pos:
            grid[:, sym, :] = ref
        else:
            grid[:, sym, :] = ref * qpsk[sym][None, :]
    p_n = noise_power(cfg, hest)
    if p_n > 0.0:
        noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        grid += (noise * math.sqrt(p_n / 2)).astype(np.complex64)
    iq = np.stack([grid.real, grid.imag], axis=-1)
    iq = iq.reshape(a, OFDM_SYMBOLS, cfg.total_prb, SUBCARRIERS_PER_PRB, 2)
    return iq.astype(np.float16)


# -- trajectories -------------------------------------------------------------

TRAJECTORY_KINDS = ("lawnmower", "spiral", "random_walk", "stationary")


@dataclass
class Trajectory:
    """Constant-speed path over the target area, ping-ponged at its end."""

    kind: str
    speed_mps: float = 1.0
    margin_m: float = 0.6
    seed: int = 0
    area_m: tuple[float, float] = (6.78, 10.06)
    row_gap_m: float = 0.9
    _polyline: np.ndarray = field(default=None, repr=False)
    _cumlen: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise EmulatorError(f"unknown trajectory kind {self.kind!r}")
        if self.kind != "stationary" and self.speed_mps <= 0:
            raise EmulatorError("speed_mps must be positive")
        self._polyline = self._build_polyline()
        seg = np.diff(self._polyline, axis=0)
        self._cumlen = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])

    def _build_polyline(self) -> np.ndarray:
        w, d = self.area_m
        m = self.margin_m
        if self.kind == "stationary":
            return np.array([[w / 2, d / 2], [w / 2, d / 2]])
        if self.kind == "lawnmower":
            pts = []
            y = m
            left = True
            while y <= d - m + 1e-9:
                xs = (m, w - m) if left else (w - m, m)
                pts.append([xs[0], y])
                pts.append([xs[1], y])
                left = not left
                y += self.row_gap_m
            return np.array(pts)
        if self.kind == "spiral":
            cx, cy = w / 2, d / 2
            r_max = min(w, d) / 2 - m
            growth = r_max / (6 * np.pi)  # three turns
            phi = np.linspace(0.0, 6 * np.pi, 600)
            r = growth * phi
            return np.stack([cx + r * np.cos(phi), cy + r * np.sin(phi)], axis=1)
        # random_walk: heading random-turns every step, reflecting off margins
        rng = np.random.default_rng(self.seed)
        step = 0.25
        n = 4000
        pts = np.empty((n, 2))
        pts[0] = (w / 2, d / 2)
        heading = rng.uniform(0, 2 * np.pi)
        for i in range(1, n):
            heading += rng.normal(0.0, 0.5)
            nxt = pts[i - 1] + step * np.array([np.cos(heading), np.sin(heading)])
            if not m <= nxt[0] <= w - m:
                heading = np.pi - heading
                nxt = pts[i - 1] + step * np.array([np.cos(heading), np.sin(heading)])
            if not m <= nxt[1] <= d - m:
                heading = -heading
                nxt = pts[i - 1] + step * np.array([np.cos(heading), np.sin(heading)])
            pts[i] = np.clip(nxt, [m, m], [w - m, d - m])
        return pts

    @property
    def path_length_m(self) -> float:
        return float(self._cumlen[-1])

    def position_at(self, t_s: float) -> tuple[float, float]:
        if t_s < 0:
            raise EmulatorError("time must be nonnegative")
        if self.kind == "stationary" or self.path_length_m == 0.0:
            return tuple(self._polyline[0])
        s = self.speed_mps * t_s
        total = self.path_length_m
        cycle = s % (2 * total)
        s_eff = cycle if cycle <= total else 2 * total - cycle  # ping-pong
        i = int(np.searchsorted(self._cumlen, s_eff, side="right") - 1)
        i = min(i, len(self._cumlen) - 2)
        seg_len = self._cumlen[i + 1] - self._cumlen[i]
        f = 0.0 if seg_len == 0 else (s_eff - self._cumlen[i]) / seg_len
        p = self._polyline[i] * (1 - f) + self._polyline[i + 1] * f
        return float(p[0]), float(p[1])

    def waypoints(self, duration_s: float, dt_s: float):
        """Sequence of (x, y, t) samples, time strictly increasing."""
        t = 0.0
        while t <= duration_s:
            x, y = self.position_at(t)
            yield x, y, t
            t += dt_s


# -- run loop ------------------------------------------------------------------

MANIFEST_HEADER = "# cusense-manifest v1"


@dataclass
class RunManifest:
    """Ground truth for one emulator run: true target position per TTI."""

    tti_period_ns: int
    entries: list[tuple[int, int, float, float]] = field(default_factory=list)  # (tti, t_ns, x, y)
    late_writes: int = 0
    max_lateness_ns: int = 0

    def positions(self) -> np.ndarray:
        return np.array([(x, y) for _, _, x, y in self.entries])

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"{MANIFEST_HEADER}\n")
            f.write(f"# tti_period_ns={self.tti_period_ns}\n")
            f.write("tti,t_ns,x_m,y_m\n")
            for tti, t_ns, x, y in self.entries:
                f.write(f"{tti},{t_ns},{x:.6f},{y:.6f}\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if not lines or lines[0] != MANIFEST_HEADER:
            raise EmulatorError(f"{path}: not a manifest file")
        period = int(lines[1].split("=", 1)[1])
        entries = []
        for ln in lines[3:]:
            tti, t_ns, x, y = ln.split(",")
            entries.append((int(tti), int(t_ns), float(x), float(y)))
        return cls(period, entries)


def run_emulator(cfg: SceneConfig, trajectory: Trajectory | None, plane: PlaneHandle,
                 duration_ttis: int, *,
                 pace: bool = False,
                 write_iq: bool = False,
                 iq_pool: int = 0,
                 on_write=None,
                 overrun_budget_ttis: int = 64,
                 stop_event=None) -> RunManifest:
    """Write one UlSlotData per TTI and return the ground-truth manifest.

    pace=False runs flat out with nominal timestamps; pace=True follows the
    plane's TTI period on the monotonic clock. Writes landing more than one
    period late are recorded in the manifest; PacingOverrunError fires only
    when the schedule has slipped by more than overrun_budget_ttis periods,
    i.e. the writer is drifting rather than riding out scheduler noise.
    on_write(data_type, tti, ref) is invoked after every slot write (the
    agent's per-TTI signal).
    """
    region_types = {d.data_type for d in plane.descriptors}
    if int(DataType.HEST) not in region_types:
        raise EmulatorError("plane has no HEST region")
    if write_iq and int(DataType.IQ) not in region_types:
        raise EmulatorError("write_iq requested but plane has no IQ region")

    period_ns = plane.tti_period_ns
    manifest = RunManifest(period_ns)
    if duration_ttis <= 0:
        return manifest

    taps = make_taps(cfg)
    background = synth_background(cfg, taps)

    pool: list[bytes] = []
    if write_iq and iq_pool > 0:
        for i in range(iq_pool):
            hest = synth_csi(cfg, background, None, noise_seed=i)
            pool.append(synth_iq(cfg, hest, noise_seed=i).tobytes())

    import struct as _struct

    fapi = int(DataType.FAPI_META) in region_types
    fapi_payload = _struct.pack(FAPI_META_FMT, 1, 0x4601, cfg.prb_start, cfg.active_prb)

    t0 = time.monotonic_ns()
    for tti in range(duration_ttis):
        if stop_event is not None and stop_event.is_set():
            break
        if pace:
            deadline = t0 + tti * period_ns
            now = time.monotonic_ns()
            # Hybrid pacing: sleep to within the timer slack, spin the rest.
            # Bare sleep() overshoots by 0.1-1 ms on a stock kernel, which an
            # absolute schedule at sub-millisecond periods cannot absorb.
            if deadline - now > _SLEEP_SLACK_NS:
                time.sleep((deadline - now - _SLEEP_SLACK_NS) / 1e9)
            while time.monotonic_ns() < deadline:
                pass
            late = time.monotonic_ns() - deadline
            if late > period_ns:
                manifest.late_writes += 1
                manifest.max_lateness_ns = max(manifest.max_lateness_ns, late)
                if late > overrun_budget_ttis * period_ns:
                    raise PacingOverrunError(
                        f"schedule slipped {late / period_ns:.0f} TTIs at tti {tti} "
                        f"(budget {overrun_budget_ttis})")
        t_ns = tti * period_ns
        pos = trajectory.position_at(t_ns / 1e9) if trajectory is not None else None

        hest = synth_csi(cfg, background, pos, noise_seed=tti)
        ref = plane.write_slot(DataType.HEST, tti, hest.tobytes())
        if on_write is not None:
            on_write(int(DataType.HEST), tti, ref)

        if write_iq:
            iq_bytes = pool[tti % len(pool)] if pool else synth_iq(cfg, hest, noise_seed=tti).tobytes()
            ref = plane.write_slot(DataType.IQ, tti, iq_bytes)
            if on_write is not None:
                on_write(int(DataType.IQ), tti, ref)

        if fapi:
            ref = plane.write_slot(DataType.FAPI_META, tti, fapi_payload)
            if on_write is not None:
                on_write(int(DataType.FAPI_META), tti, ref)

        if pos is None:
            pos = (math.nan, math.nan)
        manifest.entries.append((tti, t_ns, pos[0], pos[1]))
    return manifest
