"""``fieldforge`` command line: one subcommand per stage plus the full pipeline."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate, save_diff_map, write_kv
from .frames import FrameSet, read_depth, read_pgm, write_pgm8
from .learn import Coordinator, ModelShape, frame_image, load_params, predict, run_worker, save_params
from .pipeline import (
    ConfigError, PipelineConfig, PipelineError, configure_logging, format_seed_tree, render_scene, run_pipeline,
    seed_tree, validate,
)
from .plantsim import PlantParams, PlantStructure, grow
from .scene import PLANT_FIELDS, load_ranges, load_scene, place_plants, sample_scene
from .stream import Broker, FrameServer, collect

log = logging.getLogger("fieldforge")

EXIT_FAILURE = 1
EXIT_USAGE = 2


def _default_params(path) -> PlantParams:
    return PlantParams.load(path) if path else PipelineConfig(master_seed=0).load_plant_params()


def _frame_ids(path: Path) -> tuple[int, int]:
    text = path.as_posix()
    scene = re.findall(r"scene_(\d+)", text)
    frame = re.findall(r"frame_(\d+)", text)
    return (int(scene[-1]) if scene else 0, int(frame[-1]) if frame else 0)


def load_frame_dir(path) -> list[FrameSet]:
    """All frames under ``path`` (recursively), in sorted file order."""
    frames = []
    for ppm in sorted(Path(path).rglob("*.ppm")):
        sid, fid = _frame_ids(ppm.with_suffix(""))
        frames.append(FrameSet.load(ppm.with_suffix(""), scene_id=sid, frame_id=fid))
    return frames


def _scene_frames(scene_file, plants_dir=None, params_file=None, times=None) -> list[FrameSet]:
    config, master = load_scene(scene_file)
    if master is None:
        raise ValueError(f"{scene_file}: scene file does not record its master seed")
    params = _default_params(params_file)
    placements = place_plants(config, master, params)
    structures = []
    for pl in placements:
        plant_file = Path(plants_dir) / f"plant_{pl.plant_id:04d}.txt" if plants_dir else None
        if plant_file is not None and plant_file.exists():
            structures.append(PlantStructure.load(plant_file))
        elif plants_dir:
            raise FileNotFoundError(f"missing plant file {plant_file}")
        else:
            structures.append(PlantStructure.from_text(grow(params, pl.growth_seed, config.plant_age).to_text()))
    if times is not None:
        from dataclasses import replace

        config = replace(config, capture_times=tuple(times))
    return render_scene(config, placements, structures, params)


# ---------------------------------------------------------------- commands


def cmd_grow(args):
    params = _default_params(args.params)
    structure = grow(params, args.seed, args.days, args.dt)
    structure.save(args.out)
    print(f"{len(structure.nodes)} nodes -> {args.out}")


def cmd_scene(args):
    ranges = load_ranges(args.ranges) if args.ranges else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid in range(args.first, args.first + args.count):
        config = sample_scene(args.master, sid, ranges)
        path = out / f"scene_{sid:04d}.toml"
        path.write_text(config.to_toml(args.master))
        print(path)


def cmd_render(args):
    times = [args.time] if args.time is not None else None
    frames = _scene_frames(args.scene, args.plants, args.params, times)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if len(frames) == 1:
        frames[0].save(args.out)
        print(f"{args.out}.ppm/.pgm/.dpth")
    else:
        for f in frames:
            f.save(f"{args.out}_frame_{f.frame_id:02d}")
        print(f"{len(frames)} frames -> {args.out}_frame_*")


def cmd_broker(args):
    broker = Broker(args.bind).start()
    print(f"broker listening on {broker.address}", flush=True)
    try:
        broker.wait()
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
        print(f"broker bytes {broker.byte_volume}")


def cmd_stream(args):
    frames = _scene_frames(args.scene, args.plants, args.params)
    server = FrameServer(args.broker, frames, args.fps).start()
    print(f"SESSION {server.session_id}", flush=True)
    report = server.join()
    print(f"sent {report.frames_sent} frames, {report.bytes_sent} bytes")


def cmd_collect(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def sink(frame: FrameSet):
        frame.save(out / f"scene_{frame.scene_id:04d}_frame_{frame.frame_id:02d}")

    n = collect(args.broker, args.session, sink)
    print(f"collected {n} frames -> {out}")


def cmd_coordinator(args):
    coord = Coordinator(args.bind, args.workers, args.steps, args.lr, args.seed, ModelShape(hidden=args.hidden))
    print(f"coordinator listening on {coord.address}", flush=True)
    result = coord.run()
    save_params(args.out, result.params)
    print(f"final loss {result.loss_history[-1]!r} after {len(result.loss_history)} steps -> {args.out}")


def cmd_worker(args):
    source = Path(args.frames)
    if source.is_dir():
        frames = load_frame_dir(source)
    else:
        if not args.broker:
            raise ValueError("--frames is not a directory; a session id needs --broker")
        frames = []
        collect(args.broker, args.frames, frames.append)
    steps = run_worker(args.coordinator, frames, args.batch, args.worker_id, ModelShape(hidden=args.hidden))
    print(f"worker {args.worker_id}: {steps} steps on {len(frames)} frames")


def cmd_predict(args):
    params = load_params(args.params)
    shape = ModelShape(hidden=args.hidden)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(args.frames)
    for ppm in sorted(root.rglob("*.ppm")):
        frame = FrameSet.load(ppm.with_suffix(""))
        name = ppm.relative_to(root).with_suffix(".pgm").as_posix().replace("/", "_")
        write_pgm8(out / name, predict(params, frame_image(frame), shape))
    print(f"predictions -> {out}")


def _class_image(path) -> np.ndarray:
    raw = read_pgm(path)
    # 16-bit files are label planes (class * 4096 + plant), 8-bit ones plain class ids
    return raw.astype(np.int64) // 4096 if raw.dtype == np.uint16 else raw.astype(np.int64)


def cmd_eval(args):
    preds = sorted(Path(args.pred).rglob("*.pgm"))
    gts = sorted(Path(args.gt).rglob("*.pgm"))
    depths = sorted(Path(args.depth).rglob("*.dpth"))
    if not preds or len(preds) != len(gts) or len(gts) != len(depths):
        raise ValueError(f"need matching files: {len(preds)} pred, {len(gts)} gt, {len(depths)} depth")
    p_img = [_class_image(p) for p in preds]
    g_img = [_class_image(g) for g in gts]
    d_img = [read_depth(d) for d in depths]
    metrics = evaluate(p_img, g_img, d_img, args.bins)
    out = Path(args.out)
    write_kv(out, metrics.to_kv())
    out.with_suffix(".txt").write_text(metrics.to_text() + "\n")
    diff_dir = out.parent / (out.stem + "_diff")
    diff_dir.mkdir(exist_ok=True)
    for path, p, g in zip(preds, p_img, g_img):
        save_diff_map(diff_dir / path.name, p, g)
    print(metrics.to_text())


def cmd_validate(args):
    cfg = validate(args.config)
    print(cfg.to_toml(), end="")


def cmd_pipeline(args):
    cfg = validate(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    print(cfg.to_toml(), end="", flush=True)
    report = run_pipeline(cfg)
    print(report.to_text(), end="")


def cmd_seeds(args):
    fields = args.fields.split(",") if args.fields else PLANT_FIELDS
    rows = seed_tree(args.master, range(args.scene, args.scene + args.scenes),
                     range(args.plant, args.plant + args.plants), fields)
    print(format_seed_tree(args.master, rows), end="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fieldforge", description=__doc__)
    ap.add_argument("--version", action="version", version=f"fieldforge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grow", help="grow one plant structure")
    p.add_argument("--params", help="plant parameter TOML (default: packaged)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--days", type=float, required=True)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("scene", help="sample scene configurations")
    p.add_argument("--master", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--first", type=int, default=0)
    p.add_argument("--ranges")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("render", help="render a scene from its plant files")
    p.add_argument("--scene", required=True)
    p.add_argument("--plants", help="directory of plant_NNNN.txt files (default: regrow from seeds)")
    p.add_argument("--params")
    p.add_argument("--time", type=float, help="single capture time in seconds (default: all)")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("broker", help="run the signaling broker")
    p.add_argument("--bind", default="127.0.0.1:0")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("stream", help="render a scene and serve it as one session")
    p.add_argument("--broker", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--plants")
    p.add_argument("--params")
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("collect", help="join a session and save its frames")
    p.add_argument("--broker", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("coordinator", help="run the gradient-averaging coordinator")
    p.add_argument("--bind", default="127.0.0.1:0")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="train one data shard against a coordinator")
    p.add_argument("--coordinator", required=True)
    p.add_argument("--frames", required=True, help="frame directory or stream session id")
    p.add_argument("--broker", help="broker address when --frames is a session id")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--worker-id", type=int, default=0)
    p.add_argument("--hidden", type=int, default=8)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("predict", help="write class predictions for a frame directory")
    p.add_argument("--params", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--out", required=True, help="key=value report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("validate", help="check a pipeline config and print it resolved")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("seeds", help="print the derived seed table")
    p.add_argument("--master", type=int, required=True)
    p.add_argument("--scene", type=int, default=0, help="first scene")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--plant", type=int, default=0, help="first plant")
    p.add_argument("--plants", type=int, default=1)
    p.add_argument("--fields", help="comma-separated subset of " + ",".join(PLANT_FIELDS))
    p.set_defaults(func=cmd_seeds)
    return ap


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"pipeline failed at {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
