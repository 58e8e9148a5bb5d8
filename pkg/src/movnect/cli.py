"""movnect command line: bench, infer, distill, export.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""
import argparse
import csv
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__, kernels
from . import distill as D
from . import network as N
from .decode import (
    BOOTSTRAP_FRAMES,
    BBox,
    TrackerState,
    TrackingLost,
    bbox_from_keypoints,
    crop_resize,
    decode_keypoints,
    decode_pose,
    keypoints_to_frame,
    track,
)
from .postprocess import STAGES, PoseFrame, Stabilizer, StreamConfig
from .skeleton import Skeleton

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")
RECORD_FIELDS = ("frame", "t", "kp2d", "pose3d", "root", "rot", "crop", "lost")
EXPORT_FORMATS = ("jsonl", "anim")
INFER_STAGES = ("crop", "forward", "decode") + STAGES


class InputError(Exception):
    pass


class NumericError(Exception):
    pass


# ---------------------------------------------------------------- bench


def host_descriptor():
    return f"{platform.machine()} {platform.system()} python {platform.python_version()} " \
           f"numpy {np.__version__} kernels {kernels.BACKEND}"


def measure_latency(net, runs, warmup, seed=0):
    """Per-frame forward latencies (ms) on a fixed random input."""
    S = net.spec.input_size
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 3, S, S)).astype(np.float32)
    for _ in range(warmup):
        N.forward(net, x)
    out = []
    for _ in range(runs):
        t0 = time.perf_counter()
        N.forward(net, x)
        out.append((time.perf_counter() - t0) * 1e3)
    return np.array(out)


def bench_rows(variants, runs, warmup, input_size=256):
    if runs < 10 or warmup < 3:
        raise InputError(f"need runs >= 10 and warmup >= 3, got {runs} and {warmup}")
    from threadpoolctl import threadpool_limits

    rows = []
    with threadpool_limits(limits=1):
        for v in variants:
            spec = N.profile(v, input_size=input_size)
            net = N.build(spec, seed=0)
            lat = measure_latency(N.fold_network(net), runs, warmup)
            rows.append({
                "variant": spec.variant,
                "structure": f"13a{list(spec.block13a_widths)} 13b{list(spec.block13b_widths)} {spec.upsampling}",
                "params": N.count_params(net),
                "macs": N.count_flops(net),
                "median_ms": float(np.median(lat)),
                "p90_ms": float(np.percentile(lat, 90)),
            })
    return rows


def cmd_bench(args):
    rows = bench_rows(args.variant or ["a", "b", "c"], args.runs, args.warmup, args.input_size)
    host = host_descriptor()
    print(f"host: {host}; input {args.input_size}x{args.input_size}; {args.runs} runs after {args.warmup} warmups")
    print(f"{'variant':<8} {'structure':<52} {'params':>10} {'MACs':>13} {'median ms':>10} {'p90 ms':>9}")
    for r in rows:
        print(f"{r['variant']:<8} {r['structure']:<52} {r['params']:>10,} {r['macs']:>13,} "
              f"{r['median_ms']:>10.2f} {r['p90_ms']:>9.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) + ["host"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "host": host})
    return EXIT_OK


# ---------------------------------------------------------------- infer


def list_frames(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith(IMAGE_EXTS))
        if not names:
            raise InputError(f"{path}: no images found")
        return [os.path.join(path, n) for n in names]
    if not os.path.isfile(path):
        raise InputError(f"{path}: no such file or directory")
    return [path]


def load_frame(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"{path}: cannot decode image ({exc})") from exc


def load_network(weights, input_size):
    if not os.path.isfile(weights):
        raise InputError(f"{weights}: no such weight file")
    try:
        spec = N.detect_spec(weights, input_size=input_size)
        net = N.build(spec, weights=weights)
    except (N.WeightMismatch, ValueError) as exc:
        raise InputError(f"{weights}: {exc}") from exc
    return N.fold_network(net)


def full_frame_box(frame):
    h, w = frame.shape[:2]
    return BBox(w / 2.0, h / 2.0, float(w), float(h))


def _round_list(a):
    return [[float(v) for v in row] for row in np.asarray(a)]


def make_record(index, t, stable, transform):
    kp = stable.keypoints
    return {
        "frame": index,
        "t": float(t),
        "kp2d": [[float(u), float(v), float(c)] for (u, v), c in zip(kp.uv, kp.conf)],
        "pose3d": _round_list(stable.pose3d),
        "root": [float(v) for v in stable.pose.root],
        "rot": _round_list(stable.pose.rotations),
        "crop": [float(v) for v in transform.coeffs],
        "lost": bool(stable.lost),
    }


def infer_frames(net, frames, timestamps, focal, principal_point=None):
    """Run track -> crop -> forward -> decode -> stabilize over decoded frames.

    Returns (records, per-frame stage timings in ms, per-frame end-to-end ms).
    """
    S = net.spec.input_size
    stride = net.spec.output_stride
    stab = Stabilizer(StreamConfig(focal=focal, principal_point=principal_point, stride=stride))
    tracker = TrackerState()
    bootstrap = BOOTSTRAP_FRAMES
    records, timings, totals = [], [], []
    for index, (frame, t) in enumerate(zip(frames, timestamps)):
        start = time.perf_counter()
        ms = {}
        box = full_frame_box(frame) if bootstrap > 0 else tracker.box
        crop, transform = crop_resize(frame, box, size=S)
        x = (crop / 127.5 - 1.0).astype(np.float32)
        t1 = time.perf_counter()
        ms["crop"] = (t1 - start) * 1e3
        out = N.forward(net, x)
        t2 = time.perf_counter()
        ms["forward"] = (t2 - t1) * 1e3
        if not (np.all(np.isfinite(out.H)) and np.all(np.isfinite(out.X))):
            raise NumericError(f"frame {index}: network produced non-finite maps")
        locmaps = np.stack([out.X, out.Y, out.Z]).astype(np.float64)
        kp = decode_keypoints(out.H, stride)
        pose3d = decode_pose(locmaps, kp, stride)
        lost = False
        try:
            observed = bbox_from_keypoints(keypoints_to_frame(kp, transform))
        except TrackingLost:
            lost = True
        t3 = time.perf_counter()
        ms["decode"] = (t3 - t2) * 1e3
        if lost:
            tracker = TrackerState()
            bootstrap = BOOTSTRAP_FRAMES
        else:
            track(tracker, observed)
            bootstrap = max(bootstrap - 1, 0)
        stable = stab.step(PoseFrame(t, kp, pose3d, transform, locmaps, lost=lost))
        ms.update(stable.stage_ms)
        totals.append((time.perf_counter() - start) * 1e3)
        timings.append(ms)
        records.append(make_record(index, t, stable, transform))
    return records, timings, totals


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: r[k] for k in RECORD_FIELDS}) + "\n")


def read_jsonl(path):
    records = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                r = json.loads(line)
                missing = [k for k in RECORD_FIELDS if k not in r]
                if missing:
                    raise InputError(f"{path}:{lineno}: missing fields {missing}")
                records.append(r)
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    return records


def cmd_infer(args):
    paths = list_frames(args.input)
    net = load_network(args.weights, args.input_size)
    frames = [load_frame(p) for p in paths]
    h, w = frames[0].shape[:2]
    pp = (w / 2.0, h / 2.0)
    ts = np.arange(len(frames)) / args.fps
    records, timings, totals = infer_frames(net, frames, ts, args.focal, pp)
    write_jsonl(args.out, records)
    lost = sum(r["lost"] for r in records)
    print(f"{len(records)} frames -> {args.out} ({lost} lost)")
    for s in INFER_STAGES:
        print(f"  {s:<10} {np.median([m.get(s, 0.0) for m in timings]):8.2f} ms")
    stage_sum = float(np.median([sum(m.values()) for m in timings]))
    print(f"  {'stages':<10} {stage_sum:8.2f} ms   end-to-end {np.median(totals):8.2f} ms (median per frame)")
    return EXIT_OK


# ---------------------------------------------------------------- distill


def cmd_distill(args):
    try:
        with open(args.config) as fh:
            cfg = D.parse_experiment_config(fh.read())
    except OSError as exc:
        raise InputError(f"{args.config}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"{args.config}: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    results, _ = D.run_experiment(cfg, log=lambda msg: print(msg, flush=True))
    for r in results:
        tag = "teacher" if r.role == "teacher" else f"{r.role}_seed{r.seed}"
        D.write_metrics(os.path.join(args.out, f"{tag}.csv"), r.metrics)
        N.save_weights(r.net, os.path.join(args.out, f"{tag}.mvnw"))
    summary = D.summarize(results)
    teacher = results[0]
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "alpha_gt", "alpha_distill", "gt_only_mpjpe_mm", "distilled_mpjpe_mm", "improvement_mm"])
        for seed, gt, dist, gain in summary["rows"]:
            w.writerow([seed, 1.0, cfg.alpha, repr(gt), repr(dist), repr(gain)])
    print(f"teacher {teacher.net.spec.variant}: final val MPJPE {teacher.final_mpjpe:.2f} mm")
    print(f"{'seed':>4} {'alpha=1':>10} {'alpha=' + str(cfg.alpha):>10} {'gain mm':>9}")
    for seed, gt, dist, gain in summary["rows"]:
        print(f"{seed:>4} {gt:>10.2f} {dist:>10.2f} {gain:>9.2f}")
    print(f"distilled <= GT-only in {summary['wins']}/{len(summary['rows'])} seeds; "
          f"mean improvement {summary['mean_improvement_mm']:.2f} mm")
    return EXIT_OK


# ---------------------------------------------------------------- export


def write_anim(path, records, skeleton=None):
    """Plain-text animation: a header with the rig, then one line per frame."""
    skel = skeleton or Skeleton()
    with open(path, "w") as fh:
        fh.write("MOVNECT-ANIM 1\n")
        fh.write(f"joints {skel.joint_count}\n")
        for name, parent, off in zip(skel.names, skel.parents, skel.offsets):
            fh.write(f"{name} {parent} " + " ".join(repr(float(v)) for v in off) + "\n")
        fh.write(f"frames {len(records)}\n")
        for r in records:
            vals = [r["t"], *r["root"], *(c for q in r["rot"] for c in q)]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_anim(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "MOVNECT-ANIM 1":
        raise InputError(f"{path}: not an anim file")
    j = int(lines[1].split()[1])
    rig = [ln.split() for ln in lines[2 : 2 + j]]
    n = int(lines[2 + j].split()[1])
    body = np.array([[float(v) for v in ln.split()] for ln in lines[3 + j : 3 + j + n]]).reshape(n, -1)
    return {
        "names": [r[0] for r in rig],
        "parents": [int(r[1]) for r in rig],
        "offsets": np.array([[float(v) for v in r[2:]] for r in rig]),
        "t": body[:, 0] if n else np.zeros(0),
        "root": body[:, 1:4] if n else np.zeros((0, 3)),
        "rot": body[:, 4:].reshape(n, j, 4) if n else np.zeros((0, j, 4)),
    }


def cmd_export(args):
    records = read_jsonl(args.input)
    if args.format == "jsonl":
        write_jsonl(args.out, records)
    else:
        write_anim(args.out, records)
    print(f"{len(records)} records -> {args.out} ({args.format})")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser():
    p = argparse.ArgumentParser(prog="movnect", description="Lightweight 3D pose estimation toolkit.")
    p.add_argument("--version", action="version", version=f"movnect {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="parameter, MAC and latency table for the network variants")
    b.add_argument("--variant", action="append", choices=["a", "b", "c"], help="repeatable; default all")
    b.add_argument("--runs", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--input-size", type=int, default=256)
    b.add_argument("--csv", help="also write the table as CSV")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("infer", help="run the full pipeline over an image or image directory")
    i.add_argument("--weights", required=True)
    i.add_argument("--input", required=True, help="image file or directory of frames (sorted by name)")
    i.add_argument("--focal", type=float, required=True, help="camera focal length in pixels")
    i.add_argument("--out", required=True, help="pose stream (JSONL)")
    i.add_argument("--fps", type=float, default=30.0, help="frame rate used for timestamps")
    i.add_argument("--input-size", type=int, default=256, help="network input size the weights were built for")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("distill", help="teacher then paired students on synthetic data")
    d.add_argument("--config", required=True, help="key = value experiment config")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("export", help="convert a pose stream")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--format", required=True, choices=EXPORT_FORMATS)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"movnect {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, D.DivergenceError, FloatingPointError) as exc:
        print(f"movnect {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
