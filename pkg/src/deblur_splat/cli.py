"""Command-line entry point: synth, train, render, eval, bench.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .errors import InvalidInputError, LoadError
from .metrics import psnr, ssim
from .presets import TOY_BLUR_STRENGTH, TOY_MAX_SIGMA, toy_train_config
from .rasterizer import RasterConfig, render
from .trainer import NumericFailure, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("DEBLUR_SPLAT_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"DEBLUR_SPLAT_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e}")
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
        return v

    return parse


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .presets import toy_defocus, toy_scene_config
    from .scene import generate_toy_scene

    params = toy_defocus(args.blur_strength, args.max_sigma, args.focus_depth)
    out = _writable_dir(Path(args.out))
    cfg = toy_scene_config(args.width, args.height)
    ds = generate_toy_scene(out, args.seed, args.gaussians, args.train_views, args.test_views, params, cfg)
    info = ds.extras["blur_info"]
    print(
        f"wrote {len(ds)} views ({len(ds.indices('train'))} train, {len(ds.indices('test'))} test), "
        f"{len(ds.points)} points to {out}; blurred test PSNR "
        f"{np.mean(info['blurred_psnr_test']) if info['blurred_psnr_test'] else float('nan'):.2f} dB"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise LoadError(f"{path}: cannot read config ({e})") from e
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise LoadError(f"{path}: config must be a JSON object")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise LoadError(f"{path}: config must be flat, nested key(s): {', '.join(nested)}")
    unknown = set(doc) - TrainConfig.field_names()
    if unknown:
        raise LoadError(f"{path}: unknown config key(s): {', '.join(sorted(unknown))}")
    return doc


def build_train_config(args) -> TrainConfig:
    overrides = {}
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
            overrides.update(manifest["config"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise LoadError(f"{args.manifest}: not a run manifest ({e})") from e
    if args.config:
        overrides.update(load_config_file(args.config))
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.no_blur_field:
        overrides["use_blur_field"] = False
    if args.no_extra_points:
        overrides["extra_points"] = False
    if args.naive_prune:
        overrides["w_p"] = 1.0
    if args.hard_fail_nan:
        overrides["hard_fail_nan"] = True
    try:
        if args.preset == "toy" and not args.manifest:
            base = toy_train_config(overrides.get("iterations", 5000))
        else:
            base = TrainConfig()
        return base.replace(**overrides)
    except (InvalidInputError, TypeError) as e:
        raise UsageError(f"invalid training config: {e}")


def _versions() -> dict:
    import numba
    import scipy

    return {
        "deblur_splat": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def cmd_train(args) -> int:
    from .scene import load_scene

    data = args.data
    if data is None and args.manifest:
        try:
            data = json.loads(Path(args.manifest).read_text())["inputs"]["data"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise LoadError(f"{args.manifest}: not a run manifest ({e})") from e
    if data is None:
        raise UsageError("--data is required")
    cfg = build_train_config(args)
    out = _writable_dir(Path(args.out))
    dataset = load_scene(data)
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "inputs": {"data": str(Path(data).resolve())},
        "outputs": {"dir": str(out.resolve()), "checkpoint": "checkpoint.ckpt", "metrics": "metrics.csv"},
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")

    def progress(row):
        if not args.quiet and row["psnr_eval"] is not None:
            print(f"iter {row['iteration']:6d}  loss {row['loss']:.5f}  test PSNR {row['psnr_eval']:.3f}  "
                  f"gaussians {row['gaussian_count']}")

    result = train(dataset, cfg, out_dir=out, progress=progress)
    with open(out / "events.jsonl", "w") as f:
        for ev in result.events:
            f.write(json.dumps(ev) + "\n")
    if result.eval_rows:
        _write_eval_csv(out / "train_eval.csv", result.eval_rows)
    manifest["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"trained {len(result.cloud)} Gaussians; mean test PSNR {result.test_psnr:.4f} dB, "
          f"SSIM {result.test_ssim:.4f}; checkpoint {out / 'checkpoint.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render / eval / bench


def _load_ckpt(path):
    if not Path(path).is_file():
        raise LoadError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


def _select_cameras(dataset, names, split):
    if names:
        available = [c.name for c in dataset.cameras]
        missing = [n for n in names if n not in available]
        if missing:
            raise UsageError(
                f"unknown camera(s) {', '.join(missing)}; available: {', '.join(available)}"
            )
        return [dataset.camera_by_name(n) for n in names]
    return dataset.indices(split) if split != "all" else list(range(len(dataset)))


def cmd_render(args) -> int:
    from .scene import load_scene, write_png

    dataset = load_scene(args.data)
    ids = _select_cameras(dataset, args.camera, args.split)
    cloud, field = _load_ckpt(args.checkpoint)
    if args.with_blur_field and field is None:
        raise UsageError("--with-blur-field given but the checkpoint holds no blur field")
    out = _writable_dir(Path(args.out))
    bg = np.asarray(args.background, dtype=np.float64)
    for i in ids:
        cam = dataset.cameras[i]
        img = render(cloud, cam, field if args.with_blur_field else None, bg)
        write_png(out / f"{cam.name}.png", img)
    print(f"rendered {len(ids)} view(s) to {out}")
    return EXIT_OK


def _write_eval_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["view", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, _num(p), _num(s)])
        w.writerow(["mean", _num(float(np.mean([r[1] for r in rows]))), _num(float(np.mean([r[2] for r in rows])))])


def _num(v: float) -> str:
    return "inf" if v == float("inf") else repr(float(v))


def evaluate_checkpoint(checkpoint, data, background=(0.0, 0.0, 0.0)):
    from .scene import load_scene
    from .trainer import evaluate

    dataset = load_scene(data)
    ids = dataset.indices("test")
    if not ids:
        raise UsageError(f"{data}: test split is empty")
    cloud, _ = _load_ckpt(checkpoint)
    return evaluate(cloud, dataset, ids, background, RasterConfig())


def cmd_eval(args) -> int:
    rows = evaluate_checkpoint(args.checkpoint, args.data, args.background)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.csv"
    _writable_dir(out.parent)
    _write_eval_csv(out, rows)
    print(f"{'view':<16}{'PSNR':>10}{'SSIM':>10}")
    for name, p, s in rows:
        print(f"{name:<16}{p:>10.4f}{s:>10.4f}")
    print(f"{'mean':<16}{np.mean([r[1] for r in rows]):>10.4f}{np.mean([r[2] for r in rows]):>10.4f}")
    return EXIT_OK


def bench(cloud, camera, frames: int = 20, warmup: int = 2, background=(0.0, 0.0, 0.0)) -> dict:
    bg = np.asarray(background, dtype=np.float64)
    for _ in range(warmup):
        render(cloud, camera, None, bg)
    samples = []
    for _ in range(frames):
        t = time.perf_counter()
        render(cloud, camera, None, bg)
        samples.append(time.perf_counter() - t)
    fps = [1.0 / s for s in samples]
    return {
        "frames": frames,
        "width": camera.width,
        "height": camera.height,
        "gaussian_count": len(cloud),
        "samples_s": samples,
        "mean_fps": float(np.mean(fps)),
        "median_fps": float(statistics.median(fps)),
    }


def default_bench_camera(cloud, width, height):
    from .gaussians import Camera

    center = np.median(cloud.positions, axis=0) if len(cloud) else np.zeros(3)
    eye = center - np.array([0.0, 0.0, 1.0]) * max(float(np.ptp(cloud.positions[:, 2])) if len(cloud) else 1.0, 1.0)
    f = 0.8 * width
    return Camera.look_at(eye, center, fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


def cmd_bench(args) -> int:
    from .scene import load_scene

    cloud, _ = _load_ckpt(args.checkpoint)
    if args.data:
        dataset = load_scene(args.data)
        ids = _select_cameras(dataset, args.camera, "test") or list(range(len(dataset)))
        cam = dataset.cameras[ids[0]]
        if args.width or args.height:
            cam = cam.resized(args.width or cam.width, args.height or cam.height)
    else:
        cam = default_bench_camera(cloud, args.width or 800, args.height or 600)
    report = bench(cloud, cam, args.frames, args.warmup)
    if args.out:
        out = Path(args.out)
        _writable_dir(out.parent)
        out.write_text(json.dumps(report, indent=1) + "\n")
    print(
        f"{report['gaussian_count']} Gaussians at {cam.width}x{cam.height}: "
        f"median {report['median_fps']:.2f} FPS, mean {report['mean_fps']:.2f} FPS over {args.frames} frame(s)"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deblur-splat", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap worker threads (env DEBLUR_SPLAT_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic defocus-blurred scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gaussians", type=_positive(int), default=40)
    s.add_argument("--train-views", type=_positive(int), default=12)
    s.add_argument("--test-views", type=_positive(int), default=4)
    s.add_argument("--focus-depth", type=_positive(float), default=None,
                   help="fixed focal plane; default draws one per view across the scene depth")
    s.add_argument("--blur-strength", type=float, default=TOY_BLUR_STRENGTH,
                   help="defocus sigma in px per unit of |1/depth - 1/focus|")
    s.add_argument("--max-sigma", type=_positive(float), default=TOY_MAX_SIGMA)
    s.add_argument("--width", type=_positive(int), default=80)
    s.add_argument("--height", type=_positive(int), default=60)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a scene directory")
    t.add_argument("--data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=_positive(int), default=None)
    t.add_argument("--preset", choices=("full", "toy"), default="full",
                   help="toy: schedule scaled to --iters for the synthetic scenes")
    t.add_argument("--config", default=None, help="flat JSON object overriding TrainConfig fields")
    t.add_argument("--manifest", default=None, help="re-run from a previous run's manifest.json")
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--no-blur-field", action="store_true", help="ablation: identity offsets")
    t.add_argument("--no-extra-points", action="store_true")
    t.add_argument("--naive-prune", action="store_true", help="single pruning threshold (w_p = 1)")
    t.add_argument("--hard-fail-nan", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--camera", action="append", default=None, help="camera name (repeatable)")
    r.add_argument("--split", choices=("train", "test", "all"), default="test")
    r.add_argument("--with-blur-field", action="store_true")
    r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="CSV path (default: next to the checkpoint)")
    e.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time repeated renders")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", default=None)
    b.add_argument("--camera", action="append", default=None)
    b.add_argument("--frames", type=_positive(int), default=20)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--width", type=_positive(int), default=None)
    b.add_argument("--height", type=_positive(int), default=None)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
