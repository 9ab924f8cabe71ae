"""Command-line entry point: render, train, gradcheck, bench, synth."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io, splatting
from .cameras import CameraModel

log = logging.getLogger("splatcam")

MODELS = [m.value for m in CameraModel]


class CommandError(RuntimeError):
    """Operational failure reported to the user with exit status 1."""


def _rgb(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,g,b floats, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return np.array(vals)


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from None


def _write_jsonl(records, path):
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if path is None:
        sys.stdout.write(lines)
    else:
        Path(path).write_text(lines)


# -- commands ----------------------------------------------------------------------------

def cmd_render(args) -> int:
    scene = io.load_ply(args.scene)
    cameras = io.load_cameras(args.cameras)
    if args.model_override:
        cameras = [cam.with_model(args.model_override) for cam in cameras]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, cam in enumerate(cameras):
        result = splatting.render(scene, cam, background=args.bg, precision=args.precision,
                                  threads=args.threads)
        name = f"view_{i:03d}.{args.format}"
        io.write_image(result.image, out / name)
        records.append({"frame": i, "image": name, "camera_model": cam.model.value,
                        **result.stats.as_record()})
    _write_jsonl(records, out / "stats.jsonl")
    log.info("rendered %d views into %s", len(cameras), out)
    return 0


def cmd_train(args) -> int:
    from .optimize import TrainConfig, train

    config = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    dataset = io.load_dataset(args.dataset)
    if args.init == "synthetic":
        init_path = Path(args.dataset) / "init.ply"
        if not init_path.exists():
            raise CommandError(f"{init_path} not found; --init synthetic needs a dataset written by `synth`")
    else:
        if not args.init_path:
            raise CommandError("--init ply needs --init-path")
        init_path = Path(args.init_path)
    initial = io.load_ply(init_path)

    def progress(it, value, test_psnr):
        if test_psnr is not None:
            log.info("iteration %d  loss %.6f  test psnr %.2f dB", it, value, test_psnr)

    result = train(initial, dataset, config, callback=progress)
    out = Path(args.out)
    io.save_ply(result.scene, out)
    trace = out.with_name(out.stem + "_trace.csv")
    with open(trace, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr"])
        for it, value, p in result.trace_rows():
            writer.writerow([it, f"{value:.8g}", "" if p is None else f"{p:.4f}"])
    summary = {"iterations": config.iterations, "final_loss": result.losses[-1], **result.test_metrics}
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args) -> int:
    from .oracle import check_scene, gradcheck

    models = [args.model] if args.model else MODELS
    records, ok = [], True
    for model in models:
        scene, cam = check_scene(model, seed=args.seed, n=args.scene_size, size=args.image_size)
        report = gradcheck(scene, cam)
        ok &= report.passed
        for g in report.groups:
            records.append({"model": model, "seed": args.seed, **g.record()})
    _write_jsonl(records, args.out)
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    scene = io.load_ply(args.scene)
    cameras = io.load_cameras(args.cameras)
    records = []
    for i, cam in enumerate(cameras):
        times, stats = [], None
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            result = splatting.render(scene, cam, precision=args.precision, threads=args.threads)
            times.append((time.perf_counter() - t0) * 1e3)
            if stats is not None and stats.num_intersections != result.stats.num_intersections:
                raise CommandError(f"frame {i}: intersection count changed between repeats")
            stats = result.stats
        mean_ms = float(np.mean(times))
        records.append({
            "frame": i,
            "camera_model": cam.model.value,
            "fps": round(1e3 / mean_ms, 3),
            "mean_ms": round(mean_ms, 3),
            "max_ms": round(max(times), 3),
            "num_intersections": stats.num_intersections,
            "aux_bytes": stats.peak_aux_bytes,
        })
    _write_jsonl(records, args.out)
    return 0


def cmd_synth(args) -> int:
    from .optimize import SynthSpec, make_synthetic, perturb_means

    spec = SynthSpec.from_dict(_read_json(args.spec)) if args.spec else SynthSpec()
    gt, dataset = make_synthetic(spec)
    init = perturb_means(gt, spec.init_noise * spec.extent, seed=spec.seed + 1)
    io.save_dataset(dataset, args.out, ground_truth=gt, init=init, spec=asdict(spec))
    log.info("wrote %d views to %s", len(dataset.views), args.out)
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatcam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def perf(sp):
        sp.add_argument("--precision", choices=["single", "double"], default="double")
        sp.add_argument("--threads", type=_positive, default=None,
                        help=f"worker threads (default: ${splatting.THREADS_ENV} or 1)")

    r = sub.add_parser("render", help="render a PLY scene through every camera in a file")
    r.add_argument("--scene", required=True)
    r.add_argument("--cameras", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--model-override", choices=MODELS)
    r.add_argument("--bg", type=_rgb, default=None, help="background as r,g,b in [0, 1]")
    r.add_argument("--format", choices=["png", "ppm"], default="png")
    perf(r)
    r.set_defaults(fn=cmd_render)

    t = sub.add_parser("train", help="optimize a scene against a dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--init", choices=["synthetic", "ply"], required=True,
                   help="synthetic: the dataset's init.ply; ply: the file given by --init-path")
    t.add_argument("--init-path")
    t.add_argument("--config", help="JSON file of training options")
    t.add_argument("--out", required=True, help="trained scene (.ply); loss trace goes next to it")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    g.add_argument("--model", choices=MODELS, help="default: all models")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scene-size", type=_positive, default=10, help="number of Gaussians")
    g.add_argument("--image-size", type=_positive, default=32)
    g.add_argument("--out", help="report file (default: stdout)")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="time repeated renders")
    b.add_argument("--scene", required=True)
    b.add_argument("--cameras", required=True)
    b.add_argument("--repeat", type=_positive, default=5)
    b.add_argument("--out", help="records file (default: stdout)")
    perf(b)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--spec", help="JSON file of generator options")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CommandError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"splatcam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
