"""Single entry point: emulate, serve the agent, run dApps, build backgrounds
and datasets, evaluate, benchmark, and drive the whole loop end to end.

Flags may come from a config file (--config, `key = value` lines, # comments;
keys are flag names with dashes or underscores) and are overridden by explicit
command-line flags.

Exit codes: 0 success, 2 bad flags (argparse), 3 component startup or runtime
failure, 4 acceptance-criteria violation (e2e).
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time

import numpy as np

from cusense import backends as be
from cusense import pipeline
from cusense.dapp import (
    DappConfig,
    DappError,
    LocalizationTracker,
    bench_loop,
    run_dapp,
)
from cusense.e3 import E3Agent
from cusense.emulator import (
    EmulatorError,
    RunManifest,
    SceneConfig,
    Trajectory,
    run_emulator,
    synth_background,
    synth_csi,
    synth_iq,
)
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
    read_detections_csv,
    write_dataset,
    write_feature_csv,
)
from cusense.nn import NNError, load_weights
from cusense.plane import (
    DataType,
    PlaneError,
    RegionSpec,
    create_plane,
    open_plane,
)
from cusense.tracking import GridGeometry, TrackingError, evaluate

EXIT_OK = 0
EXIT_RUNTIME = 3
EXIT_CRITERIA = 4

DEFAULT_ENDPOINT = "tcp:127.0.0.1:7788"


class CliError(Exception):
    pass


# -- config file -----------------------------------------------------------------

def load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected key = value")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


# -- shared flag groups -------------------------------------------------------------

def add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--antennas", type=int, default=4)
    p.add_argument("--subcarriers", type=int, default=3276)
    p.add_argument("--dmrs-symbols", type=int, default=3)
    p.add_argument("--background-taps", type=int, default=12)
    p.add_argument("--snr-db", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prb-start", type=int, default=0)
    p.add_argument("--prb-count", type=int, default=None)
    p.add_argument("--reflectivity", type=float, default=25.0)


def scene_from_args(args) -> SceneConfig:
    return SceneConfig(
        antennas=args.antennas, subcarriers=args.subcarriers,
        dmrs_symbols=args.dmrs_symbols, background_taps=args.background_taps,
        snr_db=args.snr_db, rng_seed=args.seed, prb_start=args.prb_start,
        prb_count=args.prb_count, target_reflectivity=args.reflectivity)


def add_grid_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", default="32x32", help="output grid as HxW")


def grid_from_args(args, scene: SceneConfig) -> GridGeometry:
    try:
        h, w = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise CliError(f"--grid wants HxW, got {args.grid!r}") from None
    return GridGeometry(h, w, scene.area_m[0], scene.area_m[1])


def parse_trajectory(args, scene: SceneConfig) -> Trajectory:
    return Trajectory(args.trajectory, speed_mps=args.speed, seed=args.seed,
                      area_m=scene.area_m)


# -- background estimation helper -------------------------------------------------------------------

def estimate_background(scene: SceneConfig, n_samples: int, seed_offset: int = 1 << 20):
    """Background run: target-free noisy slots averaged into the template."""
    bg = synth_background(scene)
    samples = [synth_csi(scene, bg, None, noise_seed=seed_offset + i)
               for i in range(n_samples)]
    return pipeline.background_template(samples)


def build_backend(name: str, scene: SceneConfig, geometry: GridGeometry,
                  template, tti_period_ns: int, args):
    shape = (scene.antennas, scene.subcarriers, scene.dmrs_symbols)
    if name == "iq_processor":
        return be.IqProcessorBackend()
    if name == "matched_filter":
        dictionary = be.build_matched_filter_dictionary(scene, template, geometry,
                                                        decimate=args.decimate)
        return be.MatchedFilterBackend(dictionary, template, tti_period_ns)
    if name == "cusense":
        if not args.weights:
            raise CliError("--weights is required for the cusense backend")
        model = load_weights(args.weights, in_channels=scene.antennas)
        if args.stats:
            doc = json.loads(open(args.stats).read())
            stats = pipeline.NormStats(doc["mu"], doc["sigma"], doc.get("eps", 1e-8))
        else:
            stats = pipeline.NormStats(0.0, 1.0)
        return be.CusenseBackend(model, template, stats, shape, tti_period_ns)
    raise CliError(f"unknown backend {name!r}")


# -- subcommands ----------------------------------------------------------------------

def cmd_emulate(args) -> int:
    scene = scene_from_args(args)
    regions = [RegionSpec(DataType.HEST, args.slots_per_buffer, scene.hest_nbytes),
               RegionSpec(DataType.FAPI_META, args.slots_per_buffer, 16)]
    if args.write_iq:
        regions.append(RegionSpec(DataType.IQ, args.slots_per_buffer, scene.iq_nbytes))
    plane = create_plane(regions, args.tti_period_ns, name=args.plane_name)
    traj = parse_trajectory(args, scene) if args.trajectory != "none" else None
    try:
        manifest = run_emulator(scene, traj, plane, args.ttis, pace=args.pace,
                                write_iq=args.write_iq,
                                overrun_budget_ttis=args.overrun_budget_ttis)
        if args.manifest_out:
            manifest.save(args.manifest_out)
        print(f"wrote {len(manifest.entries)} TTIs to plane {plane.name!r} "
              f"(late={manifest.late_writes})")
        return EXIT_OK
    finally:
        if args.keep_plane:
            from cusense.plane import _untrack

            _untrack(plane._shm)  # plane outlives this process by request
        plane.close()
        if not args.keep_plane:
            plane_cleanup(args.plane_name)


def plane_cleanup(name) -> None:
    try:
        h = open_plane(name)
        h._shm.unlink()
        h.close()
    except PlaneError:
        pass


def cmd_agent(args) -> int:
    plane = open_plane(args.plane_name)
    agent = E3Agent(plane, args.e3_endpoint).start()
    agent.start_polling(interval_s=args.poll_interval_us / 1e6)
    print(f"agent serving plane {plane.name!r} at {args.e3_endpoint}")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait(timeout=args.duration_s if args.duration_s > 0 else None)
    agent.stop()
    plane.close()
    return EXIT_OK


def cmd_dapp(args) -> int:
    scene = scene_from_args(args)
    plane = open_plane(args.plane_name)
    geometry = grid_from_args(args, scene)
    template = (pipeline.load_background(args.background) if args.background
                else estimate_background(scene, args.background_ttis))
    backend = build_backend(args.backend, scene, geometry, template,
                            plane.tti_period_ns, args)
    data_type = DataType.IQ if args.backend == "iq_processor" else DataType.HEST
    cfg = DappConfig(args.e3_endpoint,
                     ((int(data_type), args.period_ttis, args.duration_ttis),),
                     args.backend, control_enabled=args.control)
    tracker = None
    if args.backend != "iq_processor":
        tracker = LocalizationTracker(geometry, average_n=args.average_n,
                                      dt_s=args.period_ttis * plane.tti_period_ns / 1e9,
                                      q=args.q, r_base=args.r_base, r_units=args.r_units)
    result = run_dapp(cfg, plane, backend, tracker=tracker,
                      max_iterations=args.max_iterations or None,
                      idle_timeout_s=args.idle_timeout_s)
    if args.trace_out:
        result.trace.save_csv(args.trace_out)
    if tracker is not None and args.trajectory_out:
        tracker.trajectory_csv(args.trajectory_out)
    print(result.summary())
    plane.close()
    return EXIT_OK


def cmd_background(args) -> int:
    scene = scene_from_args(args)
    template = estimate_background(scene, args.ttis, seed_offset=args.noise_seed_offset)
    pipeline.save_background(template, args.out)
    valid = int(template.valid_subcarrier_mask.sum())
    print(f"background template over {args.ttis} slots -> {args.out} "
          f"({valid}/{scene.subcarriers} valid subcarriers)")
    return EXIT_OK


def cmd_dataset(args) -> int:
    scene = scene_from_args(args)
    geometry = grid_from_args(args, scene)
    traj = parse_trajectory(args, scene)
    bg = synth_background(scene)
    template = estimate_background(scene, args.background_ttis)
    period_ns = args.tti_period_ns

    positions: dict[int, tuple[float, float]] = {}
    if args.detections:
        if not args.homography:
            raise CliError("--detections needs --homography")
        homog = load_homography(args.homography)
        dets = read_detections_csv(args.detections)
        frame_times = [d[0] for d in dets]
        csi_times = [int(t * period_ns + 37 * 10**9) for t in range(args.ttis)]
        cfg = SyncConfig(frame_period_s=args.frame_period_s)
        res = align(csi_times, frame_times, cfg)
        for csi_idx, frame_idx in res.pairs:
            _, u, v, _ = dets[frame_idx]
            positions[csi_idx] = project(homog, (u, v))
        print(f"labeled {len(res.pairs)} records from detections ({res.dropped} dropped)")
    else:
        for tti in range(args.ttis):
            positions[tti] = traj.position_at(tti * period_ns / 1e9)

    tags = make_splits(args.ttis, seed=args.split_seed)
    valid = template.valid_subcarrier_mask
    records = []
    feature_rows = []
    window: list[np.ndarray] = []
    window_ttis = max(int(round(args.window_ns / period_ns)), 0)
    feats_all = []
    from cusense.labeling import SPLIT_NAMES

    for tti in range(args.ttis):
        if tti not in positions:
            continue
        pos = positions[tti]
        csi = synth_csi(scene, bg, pos, noise_seed=tti)
        window.append(csi)
        if len(window) > window_ttis + 1:
            window.pop(0)
        avg = pipeline.coherent_average(window)
        feat = pipeline.subtract_and_reduce(avg, template, valid)
        cell = geometry.world_to_cell(*pos)
        split = SPLIT_NAMES[int(tags[tti])]
        records.append(DatasetRecord(tti, tti * period_ns, csi, pos, cell, split))
        feature_rows.append((tti, tti * period_ns, pos[0], pos[1], cell[0], cell[1],
                             split, feat.ravel().tolist()))
        if split == "train":
            feats_all.append(feat)

    header = DatasetHeader(scene.antennas, scene.subcarriers, scene.dmrs_symbols, geometry)
    if args.out:
        n = write_dataset(args.out, header, records)
        print(f"dataset: {n} records -> {args.out}")
    if args.csv_out:
        dim = scene.antennas * int(valid.sum())
        write_feature_csv(args.csv_out, feature_rows, dim)
        print(f"feature csv -> {args.csv_out}")
    if args.stats_out:
        stats = pipeline.compute_norm_stats(feats_all)
        with open(args.stats_out, "w") as f:
            json.dump({"mu": stats.mu, "sigma": stats.sigma, "eps": stats.eps,
                       "grid_h": geometry.h, "grid_w": geometry.w,
                       "antennas": scene.antennas,
                       "valid_subcarriers": int(valid.sum())}, f, indent=2)
        print(f"norm stats -> {args.stats_out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_weights(args.weights, in_channels=args.antennas)
    stats = pipeline.NormStats(0.0, 1.0)
    if args.stats:
        doc = json.loads(open(args.stats).read())
        stats = pipeline.NormStats(doc["mu"], doc["sigma"], doc.get("eps", 1e-8))
    geometry = GridGeometry(model.grid_h, model.grid_w)

    rows = []
    if args.input.endswith(".csv"):
        feats = read_feature_rows(args.input, args.antennas)
        for tti, raw in feats:
            x = pipeline.zscore(raw, stats).astype(np.float32)
            grid = model.forward(x)
            from cusense.nn import argmax_location

            i, j = argmax_location(grid)
            rows.append((tti, *geometry.cell_to_world(i, j), i, j))
    else:
        from cusense.labeling import read_dataset
        from cusense.nn import argmax_location

        if not args.background:
            raise CliError("binary dataset input needs --background to rebuild features")
        template = pipeline.load_background(args.background)
        valid = template.valid_subcarrier_mask
        header, records = read_dataset(args.input)
        geometry = GridGeometry(model.grid_h, model.grid_w,
                                header.geometry.width_m, header.geometry.depth_m)
        window: list[tuple[int, np.ndarray]] = []
        for rec in sorted(records, key=lambda r: r.timestamp_ns):
            window.append((rec.timestamp_ns, rec.csi))
            while window and window[0][0] < rec.timestamp_ns - args.window_ns:
                window.pop(0)
            avg = pipeline.coherent_average([c for _, c in window], template.tau)
            feat = pipeline.subtract_and_reduce(avg, template, valid)
            x = pipeline.zscore(feat, stats).astype(np.float32)
            i, j = argmax_location(model.forward(x))
            rows.append((rec.tti, *geometry.cell_to_world(i, j), i, j))

    with open(args.out, "w") as f:
        f.write("tti,x_m,y_m,cell_i,cell_j\n")
        for tti, x, y, i, j in rows:
            f.write(f"{tti},{x:.4f},{y:.4f},{i},{j}\n")
    print(f"{len(rows)} predictions -> {args.out}")
    return EXIT_OK


def read_feature_rows(path, antennas: int):
    out = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        n_feat = len(header) - 7
        if header[:7] != ["tti", "t_ns", "x_m", "y_m", "cell_i", "cell_j", "split"] \
                or n_feat < 1 or n_feat % antennas:
            raise CliError(f"{path}: not a feature CSV for {antennas} antennas")
        for line in f:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            raw = np.array(parts[7:], dtype=np.float64).reshape(antennas, -1)
            out.append((int(parts[0]), raw))
    return out


def load_homography(path) -> Homography:
    doc = json.loads(open(path).read())
    if "matrix" in doc:
        return Homography(np.array(doc["matrix"], dtype=float))
    return estimate_homography(doc["image_corners"], doc["world_corners"])


def read_positions_csv(path) -> dict[int, tuple[float, float]]:
    out = {}
    with open(path) as f:
        header = f.readline().strip().split(",")
        cols = {name: i for i, name in enumerate(header)}
        for key in ("tti", "x_m", "y_m"):
            if key not in cols:
                raise CliError(f"{path}: missing column {key!r}")
        for line in f:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            out[int(parts[cols["tti"]])] = (float(parts[cols["x_m"]]),
                                            float(parts[cols["y_m"]]))
    return out


def cmd_evaluate(args) -> int:
    pred = read_positions_csv(args.predictions)
    if args.truth_manifest:
        manifest = RunManifest.load(args.truth_manifest)
        truth = {tti: (x, y) for tti, _t, x, y in manifest.entries}
    else:
        truth = read_positions_csv(args.truth)
    common = sorted(set(pred) & set(truth))
    if not common:
        raise CliError("no overlapping TTIs between predictions and truth")
    report = evaluate([pred[t] for t in common], [truth[t] for t in common])
    emit_metrics(report, args)
    return EXIT_OK


def emit_metrics(report, args, extra: dict | None = None) -> None:
    extra = dict(extra or {})
    if not args.no_timestamps:
        extra["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    doc = report.to_json(**extra)
    if args.out:
        with open(args.out, "w") as f:
            f.write(doc + "\n")
        print(f"metrics -> {args.out}")
    else:
        print(doc)
    if args.cdf_out:
        with open(args.cdf_out, "w") as f:
            f.write(report.cdf_csv())
    if args.csv_out:
        with open(args.csv_out, "w") as f:
            f.write(report.to_csv_row())


def cmd_bench(args) -> int:
    if args.iterations < 100:
        print(f"error: insufficient iterations ({args.iterations}), need >= 100",
              file=sys.stderr)
        return EXIT_RUNTIME
    scene = scene_from_args(args)
    plane = create_plane(
        [RegionSpec(DataType.IQ, args.slots_per_buffer, scene.iq_nbytes)],
        args.tti_period_ns, name=args.plane_name)
    agent = E3Agent(plane, args.e3_endpoint, queue_slots=None).start()
    try:
        bg = synth_background(scene)
        pool = []
        for i in range(16):
            hest = synth_csi(scene, bg, None, noise_seed=i)
            pool.append(synth_iq(scene, hest, noise_seed=i).tobytes())
        dims = (scene.antennas, 14, scene.total_prb, 12, 2)
        backend = be.IqProcessorBackend(dims=dims)
        cfg = DappConfig(args.e3_endpoint, ((int(DataType.IQ), 1, 0),),
                         "iq_processor", control_enabled=args.control)
        report = bench_loop(plane, agent, cfg, backend, iterations=args.iterations,
                            payload_fn=lambda tti: pool[tti % len(pool)],
                            data_type=int(DataType.IQ),
                            emulated_copy_delay_us=args.emulated_copy_delay_us)
        csv = report.to_csv()
        if args.out:
            with open(args.out, "w") as f:
                f.write(csv)
            print(f"bench table -> {args.out}")
        print(csv)
        print(f"iterations={report.iterations} total_median_us={report.total_median_us:.1f}")
        return EXIT_OK
    finally:
        agent.stop()
        plane.close()
        plane.unlink()


class _LockstepGate:
    """Serializes emulator and dApp: each indicated TTI must be processed
    before the next write starts. Keeps free-running runs reproducible."""

    def __init__(self, agent: E3Agent, period_ttis: int, timeout_s: float):
        self.agent = agent
        self.period = period_ttis
        self.timeout_s = timeout_s
        self.processed = threading.Event()
        self.last_processed = -1

    def on_iteration(self, tti, _out) -> None:
        self.last_processed = tti
        self.processed.set()

    def on_write(self, data_type, tti, ref) -> None:
        self.agent.notify_write(data_type, tti, ref)
        if data_type != int(DataType.HEST) or tti % self.period:
            return
        while self.last_processed < tti:
            self.processed.clear()
            if self.last_processed >= tti:
                break
            if not self.processed.wait(timeout=self.timeout_s):
                raise CliError(f"dApp stalled at tti {tti} (lockstep)")


def cmd_e2e(args) -> int:
    scene = scene_from_args(args)
    geometry = grid_from_args(args, scene)
    plane = create_plane(
        [RegionSpec(DataType.HEST, args.slots_per_buffer, scene.hest_nbytes),
         RegionSpec(DataType.FAPI_META, args.slots_per_buffer, 16)],
        args.tti_period_ns, name=args.plane_name)
    agent = E3Agent(plane, args.e3_endpoint, queue_slots=None).start()
    try:
        template = estimate_background(scene, args.background_ttis)
        backend = build_backend(args.backend, scene, geometry, template,
                                plane.tti_period_ns, args)
        cfg = DappConfig(args.e3_endpoint,
                         ((int(DataType.HEST), args.period_ttis, args.ttis),),
                         args.backend)
        tracker = LocalizationTracker(
            geometry, average_n=args.average_n,
            dt_s=args.period_ttis * plane.tti_period_ns / 1e9,
            q=args.q, r_base=args.r_base, r_units=args.r_units)
        traj = parse_trajectory(args, scene)

        gate = _LockstepGate(agent, args.period_ttis, args.idle_timeout_s) \
            if args.lockstep else None
        on_write = gate.on_write if gate else agent.notify_write
        manifest_box: dict[str, RunManifest] = {}
        emu_err: list[Exception] = []

        def emulate():
            try:
                manifest_box["m"] = run_emulator(scene, traj, plane, args.ttis,
                                                 on_write=on_write)
            except Exception as e:  # surfaced after join
                emu_err.append(e)

        th = threading.Thread(target=emulate, name="e2e-emulator")
        expected = args.ttis // args.period_ttis + (1 if args.ttis % args.period_ttis else 0)
        result = run_dapp(cfg, plane, backend, tracker=tracker,
                          max_iterations=expected, idle_timeout_s=args.idle_timeout_s,
                          on_ready=th.start,
                          on_iteration=gate.on_iteration if gate else None)
        th.join()
        if emu_err:
            raise CliError(f"emulator failed: {emu_err[0]}")
        manifest = manifest_box["m"]
        truth = {tti: (x, y) for tti, _t, x, y in manifest.entries}

        points = [p for p in tracker.points if p.tti in truth]
        if not points:
            raise CliError("no tracked points overlap the manifest")
        report = evaluate([p.kalman for p in points], [truth[p.tti] for p in points])

        outputs = {
            "backend": args.backend,
            "ttis": args.ttis,
            "iterations": result.iterations,
            "stale_skips": result.stale_skips,
            "trajectory": args.trajectory,
            "seed": args.seed,
            "snr_db": args.snr_db,
            "grid": f"{geometry.h}x{geometry.w}",
            "frac_le_1m": report.fraction_within(1.0),
        }
        emit_metrics(report, args, extra=outputs)
        if args.trace_out:
            result.trace.save_csv(args.trace_out)
        if args.trajectory_out:
            tracker.trajectory_csv(args.trajectory_out, truth)
        if args.manifest_out:
            manifest.save(args.manifest_out)
        print(f"e2e: {result.summary()} mean_error_cm={report.mean_cm:.1f} "
              f"frac<=1m={report.fraction_within(1.0):.3f}")

        if args.criteria:
            failures = check_criteria(args.criteria, report)
            if failures:
                for f in failures:
                    print(f"criteria violation: {f}", file=sys.stderr)
                return EXIT_CRITERIA
        return EXIT_OK
    finally:
        agent.stop()
        plane.close()
        plane.unlink()


def check_criteria(path, report) -> list[str]:
    rules = load_config_file(path)
    failures = []
    checks = {
        "max_mean_error_cm": (report.mean_cm, lambda v, lim: v <= lim),
        "max_median_error_cm": (report.median_cm, lambda v, lim: v <= lim),
        "max_rmse_cm": (report.rmse_cm, lambda v, lim: v <= lim),
        "min_frac_le_1m": (report.fraction_within(1.0), lambda v, lim: v >= lim),
        "min_frac_le_0_5m": (report.fraction_within(0.5), lambda v, lim: v >= lim),
    }
    for key, raw in rules.items():
        if key not in checks:
            raise CliError(f"{path}: unknown criterion {key!r}")
        value, ok = checks[key]
        if not ok(value, float(raw)):
            failures.append(f"{key}: value {value:.4f} vs limit {raw}")
    return failures


# -- parser ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    root = argparse.ArgumentParser(prog="cusense", description=__doc__,
                                   formatter_class=argparse.RawDescriptionHelpFormatter)
    root.add_argument("--config", help="key = value defaults file")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("emulate", help="synthesize uplink TTIs into a telemetry plane")
    add_scene_flags(p)
    p.add_argument("--plane-name", default=None)
    p.add_argument("--ttis", type=int, required=True)
    p.add_argument("--trajectory", default="stationary",
                   choices=("lawnmower", "spiral", "random_walk", "stationary", "none"))
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--tti-period-ns", type=int, default=500_000)
    p.add_argument("--pace", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--write-iq", action="store_true")
    p.add_argument("--slots-per-buffer", type=int, default=64)
    p.add_argument("--overrun-budget-ttis", type=int, default=64,
                   help="error when the paced schedule slips this many TTIs")
    p.add_argument("--manifest-out")
    p.add_argument("--keep-plane", action="store_true")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("agent", help="serve the E3 agent over an existing plane")
    p.add_argument("--plane-name", default=None)
    p.add_argument("--e3-endpoint", default=DEFAULT_ENDPOINT)
    p.add_argument("--poll-interval-us", type=float, default=200.0)
    p.add_argument("--duration-s", type=float, default=0.0, help="0 = until SIGINT")
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("dapp", help="run a dApp against a live agent")
    add_scene_flags(p)
    add_grid_flag(p)
    p.add_argument("--plane-name", default=None)
    p.add_argument("--e3-endpoint", default=DEFAULT_ENDPOINT)
    p.add_argument("--backend", default="cusense", choices=be.BACKEND_NAMES)
    p.add_argument("--period-ttis", type=int, default=1)
    p.add_argument("--duration-ttis", type=int, default=0)
    p.add_argument("--control", action="store_true")
    p.add_argument("--trace-out")
    p.add_argument("--trajectory-out")
    p.add_argument("--weights")
    p.add_argument("--stats")
    p.add_argument("--background", help="background template file (CUSB0001)")
    p.add_argument("--background-ttis", type=int, default=128)
    p.add_argument("--decimate", type=int, default=4)
    p.add_argument("--average-n", type=int, default=10)
    p.add_argument("--q", type=float, default=1e-5)
    p.add_argument("--r-base", type=float, default=750.0)
    p.add_argument("--r-units", default="cm2", choices=("cm2", "m2", "cell2"))
    p.add_argument("--max-iterations", type=int, default=0)
    p.add_argument("--idle-timeout-s", type=float, default=2.0)
    p.set_defaults(func=cmd_dapp)

    p = sub.add_parser("background", help="estimate and persist a background template")
    add_scene_flags(p)
    p.add_argument("--ttis", type=int, default=256)
    p.add_argument("--noise-seed-offset", type=int, default=1 << 20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_background)

    p = sub.add_parser("dataset", help="build a labeled dataset (binary + CSV)")
    add_scene_flags(p)
    add_grid_flag(p)
    p.add_argument("--ttis", type=int, required=True)
    p.add_argument("--trajectory", default="lawnmower",
                   choices=("lawnmower", "spiral", "random_walk", "stationary"))
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--tti-period-ns", type=int, default=500_000)
    p.add_argument("--window-ns", type=int, default=2_000_000)
    p.add_argument("--background-ttis", type=int, default=128)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--detections", help="detection CSV t_ns,u,v,confidence")
    p.add_argument("--homography", help="JSON homography or corner pairs")
    p.add_argument("--frame-period-s", type=float, default=1 / 30)
    p.add_argument("--out", help="binary dataset path (CUSD0001)")
    p.add_argument("--csv-out", help="feature CSV for the trainer")
    p.add_argument("--stats-out", help="normalization stats JSON")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("infer", help="offline forward pass over a recorded dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True,
                   help="feature CSV or binary dataset (CUSD0001)")
    p.add_argument("--stats", help="normalization stats JSON")
    p.add_argument("--background", help="background template (binary dataset input)")
    p.add_argument("--antennas", type=int, default=4)
    p.add_argument("--window-ns", type=int, default=2_000_000)
    p.add_argument("--out", required=True, help="predictions CSV (tti,x_m,y_m,...)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True, help="CSV with tti,x_m,y_m")
    p.add_argument("--truth", help="CSV with tti,x_m,y_m")
    p.add_argument("--truth-manifest", help="emulator manifest file")
    p.add_argument("--out")
    p.add_argument("--cdf-out")
    p.add_argument("--csv-out")
    p.add_argument("--no-timestamps", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="end-to-end loop latency table")
    add_scene_flags(p)
    p.add_argument("--plane-name", default=None)
    p.add_argument("--e3-endpoint", default="tcp:127.0.0.1:7799")
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--tti-period-ns", type=int, default=500_000)
    p.add_argument("--slots-per-buffer", type=int, default=64)
    p.add_argument("--emulated-copy-delay-us", type=float, default=0.0)
    p.add_argument("--control", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("e2e", help="emulator -> agent -> dApp -> tracking -> metrics")
    add_scene_flags(p)
    add_grid_flag(p)
    p.add_argument("--plane-name", default=None)
    p.add_argument("--e3-endpoint", default="tcp:127.0.0.1:7790")
    p.add_argument("--ttis", type=int, default=5000)
    p.add_argument("--trajectory", default="lawnmower",
                   choices=("lawnmower", "spiral", "random_walk", "stationary"))
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--tti-period-ns", type=int, default=500_000)
    p.add_argument("--period-ttis", type=int, default=1)
    p.add_argument("--slots-per-buffer", type=int, default=256)
    p.add_argument("--backend", default="matched_filter",
                   choices=("matched_filter", "cusense"))
    p.add_argument("--weights")
    p.add_argument("--stats")
    p.add_argument("--background-ttis", type=int, default=256)
    p.add_argument("--decimate", type=int, default=4)
    p.add_argument("--average-n", type=int, default=10)
    p.add_argument("--q", type=float, default=1e-5)
    p.add_argument("--r-base", type=float, default=750.0)
    p.add_argument("--r-units", default="cm2", choices=("cm2", "m2", "cell2"))
    p.add_argument("--idle-timeout-s", type=float, default=5.0)
    p.add_argument("--lockstep", action=argparse.BooleanOptionalAction, default=True,
                   help="gate each TTI on the dApp finishing the previous one "
                        "(reproducible artifacts)")
    p.add_argument("--criteria", help="key = value thresholds file")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--cdf-out")
    p.add_argument("--csv-out")
    p.add_argument("--trace-out")
    p.add_argument("--trajectory-out")
    p.add_argument("--manifest-out")
    p.add_argument("--no-timestamps", action="store_true")
    p.set_defaults(func=cmd_e2e)

    return root, list(sub.choices.values())


def apply_config_defaults(subparsers, defaults: dict[str, str]) -> None:
    """Config values become per-subcommand defaults, coerced through each
    flag's declared type; explicit command-line flags still win."""
    for sp in subparsers:
        updates = {}
        for action in sp._actions:  # noqa: SLF001 (argparse has no public view)
            if action.dest not in defaults:
                continue
            raw = defaults[action.dest]
            if isinstance(action, (argparse._StoreTrueAction,  # noqa: SLF001
                                   argparse.BooleanOptionalAction)):
                updates[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                updates[action.dest] = action.type(raw)
            else:
                updates[action.dest] = raw
        sp.set_defaults(**updates)


def main(argv=None) -> int:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre_args, _rest = pre.parse_known_args(argv)
    parser, subparsers = build_parser()
    try:
        if pre_args.config:
            apply_config_defaults(subparsers, load_config_file(pre_args.config))
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, PlaneError, EmulatorError, DappError, LabelingError,
            TrackingError, NNError, pipeline.PipelineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
