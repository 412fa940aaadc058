"""Configuration, the seed table, and end-to-end orchestration on one machine.

Each worker owns a contiguous block of scenes. It grows and renders them,
streams its training scenes to its own collector through the broker, and
trains on the collected frames; the last scene of every block is held out
for evaluation. Stages run as phases, each phase parallel across workers.
"""

from __future__ import annotations

import dataclasses
import difflib
import logging
import multiprocessing as mp
import os
import queue
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config_io import dumps_toml, load_toml, loads_toml
from .evaluation import SegMetrics, evaluate, save_diff_map, write_kv
from .frames import FrameSet
from .geom import animate, merge_meshes, plant_mesh, transform_mesh
from .learn import (
    TAG_DONE, TAG_GRADIENT, TAG_HELLO, TAG_PARAMS, Coordinator, ModelShape, init_params, load_params,
    message_size, predict, run_worker, save_params,
)
from .plantsim import PlantParams, PlantStructure, grow
from .render import Camera, rasterize
from .rng import derive_seed
from .scene import (
    PLANT_FIELDS, SceneConfig, check_ranges, load_ranges, partition_scenes, place_plants, plant_seed, sample_scene,
)
from .stream import Broker, FrameServer, collect

log = logging.getLogger(__name__)

TRAIN_NAMESPACE = 0x545241494E  # seed path tag for model initialisation


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class PipelineError(RuntimeError):
    def __init__(self, stage: str, worker: Optional[int], cause: BaseException):
        where = f"stage {stage}" + (f", worker {worker}" if worker is not None else "")
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.worker = worker
        self.cause = cause


@dataclass
class PipelineConfig:
    master_seed: int
    scene_count: int = 2
    workers: int = 1
    plant_params: str = ""  # path; empty = packaged default
    scene_ranges: str = ""  # path; empty = packaged default
    image_width: int = 64
    image_height: int = 64
    frames_per_scene: int = 3
    fps: float = 60.0
    steps: int = 50
    batch_size: int = 4
    lr: float = 0.3
    hidden_channels: int = 8
    bins: int = 4
    tube_sides: int = 6
    angle_tol: float = 0.01
    grow_dt: float = 1.0
    output_dir: str = "fieldforge_run"

    @property
    def init_seed(self) -> int:
        return derive_seed(self.master_seed, [TRAIN_NAMESPACE])

    def model_shape(self) -> ModelShape:
        return ModelShape(hidden=self.hidden_channels)

    def load_plant_params(self) -> PlantParams:
        if self.plant_params:
            return PlantParams.load(self.plant_params)
        text = resources.files("fieldforge").joinpath("data/default_plant.toml").read_text()
        return PlantParams.from_dict(loads_toml(text))

    def load_ranges(self) -> dict:
        ranges = load_ranges(self.scene_ranges) if self.scene_ranges else check_ranges({})
        ranges["width"] = (self.image_width, self.image_width)
        ranges["height"] = (self.image_height, self.image_height)
        ranges["frame_count"] = (self.frames_per_scene, self.frames_per_scene)
        return check_ranges(ranges)

    def to_toml(self) -> str:
        return dumps_toml(dataclasses.asdict(self))


CONFIG_KEYS = [f.name for f in dataclasses.fields(PipelineConfig)]

_CHECKS: list[tuple[str, Callable, str]] = [
    ("master_seed", lambda v: 0 <= v < 2**64, "must be an unsigned 64-bit integer"),
    ("workers", lambda v: v >= 1, "must be >= 1"),
    ("image_width", lambda v: v >= 16, "must be >= 16"),
    ("image_height", lambda v: v >= 16, "must be >= 16"),
    ("frames_per_scene", lambda v: v >= 1, "must be >= 1"),
    ("fps", lambda v: v > 0, "must be > 0"),
    ("steps", lambda v: v >= 1, "must be >= 1"),
    ("batch_size", lambda v: v >= 1, "must be >= 1"),
    ("lr", lambda v: v > 0, "must be > 0"),
    ("hidden_channels", lambda v: v >= 1, "must be >= 1"),
    ("bins", lambda v: v >= 1, "must be >= 1"),
    ("tube_sides", lambda v: v >= 3, "must be >= 3"),
    ("angle_tol", lambda v: v >= 0, "must be >= 0"),
    ("grow_dt", lambda v: v > 0, "must be > 0"),
]


def config_from_dict(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    for key in data:
        if key not in CONFIG_KEYS:
            hint = difflib.get_close_matches(key, CONFIG_KEYS, n=1)
            suggestion = f" (did you mean '{hint[0]}'?)" if hint else ""
            raise ConfigError(key, f"unknown key{suggestion}")
    if "master_seed" not in data:
        raise ConfigError("master_seed", "required")
    types = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    values = {}
    for key, value in data.items():
        want = types[key]
        if want in ("int", int) and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        if want in ("float", float) and not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if want in ("str", str) and not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        values[key] = float(value) if want in ("float", float) else value
    for key in ("plant_params", "scene_ranges"):
        if values.get(key) and base_dir is not None and not Path(values[key]).is_absolute():
            values[key] = str(base_dir / values[key])
    cfg = PipelineConfig(**values)
    for key, ok, message in _CHECKS:
        if not ok(getattr(cfg, key)):
            raise ConfigError(key, message)
    if cfg.scene_count < 2 * cfg.workers:
        raise ConfigError("scene_count", "needs at least two scenes per worker (one trains, one is held out)")
    for key in ("plant_params", "scene_ranges"):
        path = getattr(cfg, key)
        if path and not Path(path).is_file():
            raise ConfigError(key, f"file not found: {path}")
    try:
        cfg.load_plant_params()
    except ValueError as exc:
        raise ConfigError("plant_params", str(exc)) from exc
    try:
        cfg.load_ranges()
    except ValueError as exc:
        raise ConfigError("scene_ranges", str(exc)) from exc
    return cfg


def validate(path) -> PipelineConfig:
    path = Path(path)
    return config_from_dict(load_toml(path), base_dir=path.parent)


# ---------------------------------------------------------------- seed table


def seed_tree(master: int, scenes=(), plants=(), fields=PLANT_FIELDS) -> list[tuple]:
    """Rows of (scene, plant, field, seed) for every requested combination."""
    return [
        (s, p, f, plant_seed(master, s, p, f))
        for s in scenes
        for p in plants
        for f in fields
    ]


def format_seed_tree(master: int, rows: list[tuple]) -> str:
    lines = [f"# master_seed={master}", "scene plant field seed"]
    lines += [f"{s} {p} {f} {seed}" for s, p, f, seed in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- stages


@dataclass
class RenderedScene:
    config: SceneConfig
    frames: list
    plant_count: int


def grow_placement(params: PlantParams, placement, plant_age: float, dt: float) -> PlantStructure:
    # round-trip through the text format so a re-run from plant files is byte-identical
    return PlantStructure.from_text(grow(params, placement.growth_seed, plant_age, dt).to_text())


def render_scene(config: SceneConfig, placements, structures, params: PlantParams,
                 sides: int = 6, angle_tol: float = 0.01) -> list[FrameSet]:
    camera = Camera.from_spec(config.camera)
    placed = []
    for pl, structure in zip(placements, structures):
        if len(structure.nodes) < 2:
            continue
        mesh = plant_mesh(structure, params, plant_id=pl.plant_id, sides=sides, angle_tol=angle_tol)
        if mesh.n_vertices == 0:
            continue
        placed.append((pl, transform_mesh(mesh, pl.position, pl.yaw, pl.scale)))
    frames = []
    for k, t in enumerate(config.capture_times):
        # a plant lying flat on the ground has nothing to sway
        meshes = [animate(m, m.heights, config.wind, t, pl.phase) if m.heights.max() > 0 else m
                  for pl, m in placed]
        frame = rasterize(merge_meshes(meshes), camera, config)
        frame.frame_id = k
        frame.sim_time = t
        frames.append(frame)
    return frames


def build_scene(master: int, scene_id: int, ranges: dict, params: PlantParams, cfg: PipelineConfig,
                out_dir: Optional[Path] = None) -> RenderedScene:
    config = sample_scene(master, scene_id, ranges)
    placements = place_plants(config, master, params)
    structures = [grow_placement(params, pl, config.plant_age, cfg.grow_dt) for pl in placements]
    frames = render_scene(config, placements, structures, params, cfg.tube_sides, cfg.angle_tol)
    if out_dir is not None:
        sdir = out_dir / f"scene_{scene_id:04d}"
        (sdir / "plants").mkdir(parents=True, exist_ok=True)
        (sdir / "scene.toml").write_text(config.to_toml(master))
        for pl, st in zip(placements, structures):
            st.save(sdir / "plants" / f"plant_{pl.plant_id:04d}.txt")
        for f in frames:
            f.save(sdir / f"frame_{f.frame_id:02d}")
    return RenderedScene(config, frames, len(placements))


@dataclass
class WorkerOutcome:
    worker_id: int
    scenes: list
    heldout_scene_id: int
    frames_streamed: int
    steps_done: int
    metrics: SegMetrics
    untrained_metrics: SegMetrics
    pooled: tuple  # (preds, untrained preds, gts, depths) of the held-out frames


@dataclass
class RunReport:
    loss_history: list
    metrics: SegMetrics
    untrained_metrics: SegMetrics
    worker_metrics: dict
    timings: dict
    wall_time: float
    broker_bytes: int
    coordinator_bytes: int
    coordinator_expected_bytes: int
    coordinator_signature_hits: int
    frames_streamed: int
    output_dir: Path

    def to_kv(self) -> dict:
        kv = {
            "steps": len(self.loss_history),
            "final_loss": self.loss_history[-1] if self.loss_history else float("nan"),
            "loss_history": " ".join(repr(float(x)) for x in self.loss_history),
            "wall_time_s": self.wall_time,
            "broker_bytes": self.broker_bytes,
            "coordinator_bytes": self.coordinator_bytes,
            "coordinator_expected_bytes": self.coordinator_expected_bytes,
            "coordinator_signature_hits": self.coordinator_signature_hits,
            "frames_streamed": self.frames_streamed,
        }
        for stage, secs in self.timings.items():
            kv[f"time_{stage}_s"] = secs
        kv.update(self.metrics.to_kv("eval_"))
        kv.update(self.untrained_metrics.to_kv("untrained_"))
        for wid, m in self.worker_metrics.items():
            kv.update(m.to_kv(f"worker{wid}_"))
        return kv

    def to_text(self) -> str:
        lines = ["fieldforge pipeline report", ""]
        lines.append(f"training steps   {len(self.loss_history)}")
        if self.loss_history:
            lines.append(f"loss first/last  {self.loss_history[0]:.5f} / {self.loss_history[-1]:.5f}")
        lines.append(f"frames streamed  {self.frames_streamed}")
        lines.append(f"broker bytes     {self.broker_bytes}")
        lines.append(f"trainer bytes    {self.coordinator_bytes} (expected {self.coordinator_expected_bytes})")
        lines.append("")
        lines.append("held-out evaluation (trained):")
        lines.append(self.metrics.to_text())
        lines.append("")
        lines.append("held-out evaluation (untrained):")
        lines.append(self.untrained_metrics.to_text())
        lines.append("")
        lines.append("stage timings:")
        lines += [f"  {k:10s} {v:8.3f} s" for k, v in self.timings.items()]
        lines.append(f"  {'wall':10s} {self.wall_time:8.3f} s")
        return "\n".join(lines) + "\n"


STAGES = ("render", "stream", "train", "eval")


def configure_logging() -> None:
    level = os.environ.get("FIELDFORGE_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(asctime)s %(processName)s %(name)s %(levelname)s: %(message)s")


def evaluate_frames(params, untrained, frames, shape: ModelShape, bins: int, diff_dir: Optional[Path] = None):
    preds, preds0, gts, depths = [], [], [], []
    for f in frames:
        image = f.rgb.astype(np.float64) / 255.0
        p = predict(params, image, shape)
        gt = f.organ_classes()
        if diff_dir is not None:
            save_diff_map(diff_dir / f"scene_{f.scene_id:04d}_frame_{f.frame_id:02d}_diff.pgm", p, gt)
        preds.append(p)
        preds0.append(predict(untrained, image, shape))
        gts.append(gt)
        depths.append(f.depth)
    return preds, preds0, gts, depths


def _worker_main(cfg: PipelineConfig, worker_id: int, scenes: list, broker: str, coordinator: str,
                 barrier, results) -> None:
    """Everything one worker process does: render, stream to itself, train its shard, evaluate."""
    configure_logging()
    stage = "render"
    try:
        out = Path(cfg.output_dir)
        params = cfg.load_plant_params()
        ranges = cfg.load_ranges()
        shape = cfg.model_shape()
        rendered = {sid: build_scene(cfg.master_seed, sid, ranges, params, cfg, out / "scenes").frames
                    for sid in scenes}
        log.info("worker %d: rendered scenes %s", worker_id, scenes)
        barrier.wait()

        stage = "stream"
        collected: list = []
        for sid in scenes[:-1]:
            server = FrameServer(broker, rendered[sid], cfg.fps).start()
            n = collect(broker, server.session_id, collected.append)
            server.join()
            if n != len(rendered[sid]):
                raise RuntimeError(f"scene {sid}: collected {n} of {len(rendered[sid])} frames")
        barrier.wait()

        stage = "train"
        steps_done = run_worker(coordinator, collected, cfg.batch_size, worker_id, shape)
        barrier.wait()

        stage = "eval"
        trained = load_params(out / "params.bin")
        untrained = init_params(cfg.init_seed, shape)
        heldout = scenes[-1]
        pooled = evaluate_frames(trained, untrained, rendered[heldout], shape, cfg.bins, out / "eval")
        preds, preds0, gts, depths = pooled
        results.put(("ok", WorkerOutcome(
            worker_id, scenes, heldout, len(collected), steps_done,
            evaluate(preds, gts, depths, cfg.bins), evaluate(preds0, gts, depths, cfg.bins), pooled)))
        barrier.wait()
    except threading.BrokenBarrierError:
        pass  # another participant failed and reports it
    except BaseException as exc:
        log.error("worker %d failed in %s: %s", worker_id, stage, exc)
        results.put(("error", (stage, worker_id, f"{type(exc).__name__}: {exc}")))
        barrier.abort()


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    t_start = time.perf_counter()
    out = Path(cfg.output_dir)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.toml").write_text(cfg.to_toml())
    shape = cfg.model_shape()
    partition = partition_scenes(cfg.scene_count, cfg.workers)

    ctx = mp.get_context("spawn")
    barrier = ctx.Barrier(cfg.workers + 1)
    results = ctx.Queue()
    timings: dict[str, float] = {}
    train_out: dict = {}
    procs: list = []
    broker = Broker("127.0.0.1:0").start()
    coordinator = None
    coord_thread = None
    stage = "render"

    def fail(stage_name, worker, cause):
        barrier.abort()
        return PipelineError(stage_name, worker, cause)

    def watchdog():
        while not barrier.broken and any(p.is_alive() for p in procs):
            for p in procs:
                if p.exitcode not in (None, 0):
                    barrier.abort()
            time.sleep(0.2)

    try:
        coordinator = Coordinator("127.0.0.1:0", cfg.workers, cfg.steps, cfg.lr, cfg.init_seed, shape)
        procs = [ctx.Process(target=_worker_main, name=f"worker-{w}",
                             args=(cfg, w, scenes, broker.address, coordinator.address, barrier, results))
                 for w, scenes in enumerate(partition)]
        for p in procs:
            p.start()
        threading.Thread(target=watchdog, daemon=True).start()

        mark = time.perf_counter()
        for stage in STAGES:
            if stage == "train":
                def run_coord():
                    try:
                        train_out["result"] = coordinator.run()
                    except BaseException as exc:
                        train_out["error"] = exc

                coord_thread = threading.Thread(target=run_coord, name="coordinator")
                coord_thread.start()
                coord_thread.join()
                if "error" in train_out:
                    raise fail("train", None, train_out["error"])
                save_params(out / "params.bin", train_out["result"].params)
            barrier.wait()
            now = time.perf_counter()
            timings[stage] = now - mark
            mark = now
            if stage == "stream":
                broker.stop()
        outcomes = sorted((results.get()[1] for _ in procs), key=lambda o: o.worker_id)
    except threading.BrokenBarrierError:
        errors = []
        while True:
            try:
                kind, payload = results.get(timeout=2.0)
            except queue.Empty:
                break
            if kind == "error":
                errors.append(payload)
        if "error" in train_out:
            raise PipelineError("train", None, train_out["error"]) from None
        if errors:
            stage_name, worker, message = min(errors, key=lambda e: (STAGES.index(e[0]), e[1]))
            raise PipelineError(stage_name, worker, RuntimeError(message)) from None
        dead = [i for i, p in enumerate(procs) if p.exitcode not in (None, 0)]
        raise PipelineError(stage, dead[0] if dead else None, RuntimeError("worker process exited")) from None
    finally:
        broker.stop()
        if coordinator is not None and coord_thread is None:
            coordinator.close()
        for p in procs:
            p.join(timeout=30)
            if p.is_alive():
                p.terminate()

    result = train_out["result"]
    pooled = [[], [], [], []]
    for o in outcomes:
        for acc, part in zip(pooled, o.pooled):
            acc.extend(part)
    metrics = evaluate(pooled[0], pooled[2], pooled[3], cfg.bins)
    untrained_metrics = evaluate(pooled[1], pooled[2], pooled[3], cfg.bins)

    n = shape.size
    expected = cfg.workers * (
        message_size(TAG_HELLO)
        + cfg.steps * (message_size(TAG_PARAMS, n) + message_size(TAG_GRADIENT, n))
        + message_size(TAG_DONE)
    )
    report = RunReport(
        loss_history=result.loss_history,
        metrics=metrics,
        untrained_metrics=untrained_metrics,
        worker_metrics={o.worker_id: o.metrics for o in outcomes},
        timings=timings,
        wall_time=0.0,
        broker_bytes=broker.byte_volume,
        coordinator_bytes=result.bytes_total,
        coordinator_expected_bytes=expected,
        coordinator_signature_hits=sum(c.signature_hits for c in result.channels),
        frames_streamed=sum(o.frames_streamed for o in outcomes),
        output_dir=out,
    )
    (out / "loss_history.txt").write_text("".join(f"{float(x)!r}\n" for x in result.loss_history))
    report.wall_time = time.perf_counter() - t_start
    (out / "report.txt").write_text(report.to_text())
    write_kv(out / "report.kv", report.to_kv())
    return report
