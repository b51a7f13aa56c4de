"""dApp runtime: consume indications, resolve slot references, validate,
infer, post-process, optionally close the control loop; every iteration is
latency-instrumented stage by stage.

The loop per indication: read the referenced slot (skip and count on a stale
or lapped snapshot), hand the payload to the backend's prepare(), run infer(),
apply the post-processor, and, when control is enabled, send a control request
and wait for its ack. Timestamps are captured after each stage with the
monotonic performance counter.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from cusense.backends import BackendInputError
from cusense.e3.manager import E3Manager
from cusense.nn import argmax_location
from cusense.plane import STALE, PlaneHandle, SlotRef
from cusense.tracking import GridAverager, GridGeometry, TrackState, init_track, kalman_step

TRACE_STAGES = ("indication_rx", "shm_read_done", "preproc_done", "infer_done",
                "postproc_done", "control_sent")

CONTROL_ECHO_ACTION = 1


class DappError(Exception):
    pass


@dataclass(frozen=True)
class DappConfig:
    target_agent: str
    subscriptions: tuple[tuple[int, int, int], ...]  # (data_type, period, duration)
    backend_id: str
    control_enabled: bool = False

    def __post_init__(self):
        if not self.subscriptions:
            raise DappError("need at least one subscription")
        from cusense.backends import BACKEND_NAMES

        if self.backend_id not in BACKEND_NAMES:
            raise DappError(f"backend {self.backend_id!r} not registered "
                            f"(known: {', '.join(BACKEND_NAMES)})")


@dataclass
class LatencyTrace:
    """Per-iteration stage timestamps (ns, monotonic), nondecreasing left to right."""

    rows: list[tuple[int, ...]] = field(default_factory=list)  # (tti, *stage_ns)

    def append(self, tti: int, stamps: dict[str, int]) -> None:
        self.rows.append((tti,) + tuple(stamps[s] for s in TRACE_STAGES))

    def stage_durations_us(self) -> dict[str, list[float]]:
        """Duration of each stage relative to the previous one, microseconds."""
        out: dict[str, list[float]] = {s: [] for s in TRACE_STAGES[1:]}
        for row in self.rows:
            stamps = row[1:]
            for k, stage in enumerate(TRACE_STAGES[1:], start=1):
                out[stage].append((stamps[k] - stamps[k - 1]) / 1e3)
        return out

    def save_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("tti," + ",".join(f"{s}_ns" for s in TRACE_STAGES) + "\n")
            for row in self.rows:
                f.write(",".join(str(v) for v in row) + "\n")


@dataclass
class TrackPoint:
    tti: int
    raw: tuple[float, float]
    averaged: tuple[float, float]
    kalman: tuple[float, float]


class LocalizationTracker:
    """Grid post-processing: rolling mean over the last N grids, argmax to
    world coordinates, constant-velocity Kalman smoothing."""

    def __init__(self, geometry: GridGeometry, *, average_n: int = 10,
                 dt_s: float = 0.0005, q: float = 1e-5, r_base: float = 750.0,
                 r_units: str = "cm2"):
        self.geometry = geometry
        self.averager = GridAverager(average_n)
        self.dt_s = dt_s
        self.q = q
        self.r_base = r_base
        self.r_units = r_units
        self.state: TrackState | None = None
        self.points: list[TrackPoint] = []

    def update(self, tti: int, grid: np.ndarray) -> TrackPoint:
        raw = self.geometry.cell_to_world(*argmax_location(grid))
        avg = self.geometry.cell_to_world(*argmax_location(self.averager.push(grid)))
        if self.state is None:
            self.state = init_track(avg)
        else:
            self.state = kalman_step(self.state, avg, self.dt_s, q=self.q,
                                     r_base=self.r_base, r_units=self.r_units,
                                     geometry=self.geometry)
        point = TrackPoint(tti, raw, avg, self.state.position)
        self.points.append(point)
        return point

    def trajectory_csv(self, path, truth: dict[int, tuple[float, float]] | None = None) -> None:
        with open(path, "w") as f:
            f.write("sample,tti,raw_x,raw_y,avg_x,avg_y,kalman_x,kalman_y,gt_x,gt_y\n")
            for n, p in enumerate(self.points):
                gt = truth.get(p.tti, (float("nan"), float("nan"))) if truth else \
                    (float("nan"), float("nan"))
                f.write(f"{n},{p.tti},{p.raw[0]:.4f},{p.raw[1]:.4f},"
                        f"{p.averaged[0]:.4f},{p.averaged[1]:.4f},"
                        f"{p.kalman[0]:.4f},{p.kalman[1]:.4f},{gt[0]:.4f},{gt[1]:.4f}\n")


@dataclass
class DappResult:
    iterations: int = 0
    stale_skips: int = 0
    dim_skips: int = 0
    trace: LatencyTrace = field(default_factory=LatencyTrace)
    outputs: list[tuple[int, np.ndarray]] = field(default_factory=list)
    clean_shutdown: bool = True

    def summary(self) -> str:
        return (f"iterations={self.iterations} stale_skips={self.stale_skips} "
                f"dim_skips={self.dim_skips} clean={self.clean_shutdown}")


def as_plane_ref(wire_ref) -> SlotRef:
    return SlotRef(wire_ref.data_type, wire_ref.buffer_index,
                   wire_ref.slot_offset_ttis, wire_ref.payload_bytes)


def run_dapp(cfg: DappConfig, plane: PlaneHandle, backend, *,
             manager: E3Manager | None = None,
             tracker: LocalizationTracker | None = None,
             max_iterations: int | None = None,
             idle_timeout_s: float = 2.0,
             keep_outputs: bool = False,
             on_ready=None,
             on_iteration=None) -> DappResult:
    """Consume indications until the stream ends, the duration is exhausted,
    or max_iterations have been processed."""
    own_manager = manager is None
    if manager is None:
        manager = E3Manager.connect(cfg.target_agent)
    result = DappResult()
    try:
        for data_type, period, duration in cfg.subscriptions:
            resp = manager.subscribe(data_type, period, duration)
            if resp.status != 0:
                raise DappError(f"subscription for data_type {data_type} rejected")
        if on_ready is not None:
            on_ready()
        while max_iterations is None or result.iterations < max_iterations:
            ind = manager.recv(timeout=idle_timeout_s)
            if ind is None:
                break  # agent gone or stream idle: clean shutdown with summary
            stamps = {"indication_rx": time.perf_counter_ns()}
            if ind.slot_ref is None:
                result.dim_skips += 1
                continue
            res = plane.read_slot(as_plane_ref(ind.slot_ref), expected_tti=ind.tti)
            stamps["shm_read_done"] = time.perf_counter_ns()
            if res is STALE:
                result.stale_skips += 1
                continue
            tti, payload = res
            try:
                x = backend.prepare(tti, payload)
                stamps["preproc_done"] = time.perf_counter_ns()
                out = backend.infer(x)
            except BackendInputError:
                result.dim_skips += 1
                continue
            stamps["infer_done"] = time.perf_counter_ns()
            if tracker is not None:
                tracker.update(tti, out)
            stamps["postproc_done"] = time.perf_counter_ns()
            if cfg.control_enabled:
                ack = manager.send_control(CONTROL_ECHO_ACTION, tti.to_bytes(8, "little"))
                if ack.status != 0:
                    raise DappError(f"control rejected at tti {tti}")
            stamps["control_sent"] = time.perf_counter_ns()
            result.trace.append(tti, stamps)
            if keep_outputs:
                result.outputs.append((tti, out))
            result.iterations += 1
            if on_iteration is not None:
                on_iteration(tti, out)
    finally:
        if own_manager:
            manager.close()
    return result


# -- loop benchmark -------------------------------------------------------------

BENCH_ROWS = (
    ("1-2. gpu-to-host copy + ready notify", "emulated"),
    ("3. writer copies slot into shm", "memcpy"),
    ("4. agent sends slot ref to manager", "socket"),
    ("5. request to inference serving", "n/a (in-process)"),
    ("6. shm read + tensor preparation", "shm"),
    ("7. model inference", "cpu"),
    ("8. results back from serving", "n/a (in-process)"),
    ("9-10. control request + ack", "socket"),
)


@dataclass
class Table1Report:
    """Per-stage latency medians/p99 for the end-to-end control loop."""

    iterations: int
    rows: list[tuple[str, str, float, float]]  # (operation, protocol, median_us, p99_us)
    total_median_us: float
    total_p99_us: float

    def to_csv(self) -> str:
        lines = ["operation,protocol,median_us,p99_us"]
        for op, proto, med, p99 in self.rows:
            lines.append(f"\"{op}\",{proto},{med:.1f},{p99:.1f}")
        lines.append(f"total,,{self.total_median_us:.1f},{self.total_p99_us:.1f}")
        return "\n".join(lines) + "\n"

    def stage_median_us(self, label_prefix: str) -> float:
        for op, _proto, med, _ in self.rows:
            if op.startswith(label_prefix):
                return med
        raise KeyError(label_prefix)


def _percentiles(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    srt = sorted(values)
    return statistics.median(srt), srt[min(int(0.99 * len(srt)), len(srt) - 1)]


def bench_loop(plane: PlaneHandle, agent, cfg: DappConfig, backend, *,
               iterations: int, payload_fn, data_type: int,
               emulated_copy_delay_us: float = 0.0) -> Table1Report:
    """Lockstep end-to-end loop benchmark over the full local stack.

    The driver emulates the upstream GPU copy as a configurable delay, writes
    one slot, notifies the agent, and waits for the dApp iteration to finish
    before starting the next TTI, so stage timings never include queue wait.
    """
    if iterations < 100:
        raise DappError(f"insufficient iterations ({iterations}), need >= 100")

    write_us: list[float] = []
    transport_us: list[float] = []
    notify_ns: dict[int, int] = {}
    ready = threading.Event()
    done = threading.Event()

    def on_iteration(tti, _out):
        done.set()

    result_holder: dict[str, DappResult] = {}

    def dapp_thread():
        result_holder["result"] = run_dapp(
            cfg, plane, backend, max_iterations=iterations,
            idle_timeout_s=10.0, on_ready=ready.set, on_iteration=on_iteration)

    t = threading.Thread(target=dapp_thread, name="bench-dapp", daemon=True)
    t.start()
    if not ready.wait(timeout=10.0):
        raise DappError("dApp never subscribed")

    delay_s = emulated_copy_delay_us / 1e6
    for tti in range(iterations):
        if delay_s:
            time.sleep(delay_s)
        done.clear()
        t0 = time.perf_counter_ns()
        ref = plane.write_slot(data_type, tti, payload_fn(tti))
        t1 = time.perf_counter_ns()
        agent.notify_write(data_type, tti, ref)
        notify_ns[tti] = time.perf_counter_ns()
        write_us.append((t1 - t0) / 1e3)
        if not done.wait(timeout=10.0):
            raise DappError(f"dApp stalled at tti {tti}")
    t.join(timeout=30.0)
    result = result_holder.get("result")
    if result is None or result.iterations < iterations:
        raise DappError("bench loop ended early: "
                        + (result.summary() if result else "no result"))

    durations = result.trace.stage_durations_us()
    for row in result.trace.rows:
        tti, rx_ns = row[0], row[1]
        if tti in notify_ns:
            transport_us.append((rx_ns - notify_ns[tti]) / 1e3)

    read_prep_us = [a + b for a, b in zip(durations["shm_read_done"],
                                          durations["preproc_done"])]
    control_us = durations["control_sent"] if cfg.control_enabled else []
    table = [
        (BENCH_ROWS[0][0], BENCH_ROWS[0][1], emulated_copy_delay_us, emulated_copy_delay_us),
        (BENCH_ROWS[1][0], BENCH_ROWS[1][1], *_percentiles(write_us)),
        (BENCH_ROWS[2][0], BENCH_ROWS[2][1], *_percentiles(transport_us)),
        (BENCH_ROWS[3][0], BENCH_ROWS[3][1], 0.0, 0.0),
        (BENCH_ROWS[4][0], BENCH_ROWS[4][1], *_percentiles(read_prep_us)),
        (BENCH_ROWS[5][0], BENCH_ROWS[5][1], *_percentiles(durations["infer_done"])),
        (BENCH_ROWS[6][0], BENCH_ROWS[6][1], 0.0, 0.0),
        (BENCH_ROWS[7][0], BENCH_ROWS[7][1],
         *(_percentiles(control_us) if control_us else (0.0, 0.0))),
    ]
    totals = []
    for row in result.trace.rows:
        tti, end = row[0], row[-1]
        start = notify_ns.get(tti)
        if start is None:
            continue
        write = write_us[tti] if tti < len(write_us) else 0.0
        totals.append(emulated_copy_delay_us + write + (end - start) / 1e3)
    med, p99 = _percentiles(totals)
    return Table1Report(iterations=result.iterations, rows=table,
                        total_median_us=med, total_p99_us=p99)
