"""Scene sampling, plant placement and the static scene-to-worker split."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from importlib import resources

from .config_io import dumps_toml, load_toml, loads_toml
from .geom import WindField
from .rng import Stream, derive_seed

# Field order is part of the seed contract: field i is drawn from
# derive_seed(master, [scene_id, i]).
RANGE_FIELDS = (
    "sun_azimuth",
    "sun_elevation",
    "fog_density",
    "ambient_factor",
    "sky_r",
    "sky_g",
    "sky_b",
    "wind_speed",
    "wind_direction",
    "gust_frequency",
    "sway_coefficient",
    "rows",
    "plants_per_row",
    "row_spacing",
    "in_row_spacing",
    "jitter_sd",
    "background_density",
    "camera_x",
    "camera_y",
    "camera_z",
    "look_x",
    "look_y",
    "look_z",
    "vertical_fov",
    "width",
    "height",
    "frame_count",
    "frame_interval",
    "plant_age",
)
INTEGER_FIELDS = {"rows", "plants_per_row", "width", "height", "frame_count"}

# (lower, upper, lower_open, upper_open)
_LIMITS = {
    "sun_elevation": (0.0, math.pi / 2, True, False),
    "fog_density": (0.0, math.inf, False, True),
    "ambient_factor": (0.0, 1.0, False, False),
    "sky_r": (0.0, 1.0, False, False),
    "sky_g": (0.0, 1.0, False, False),
    "sky_b": (0.0, 1.0, False, False),
    "wind_speed": (0.0, math.inf, False, True),
    "gust_frequency": (0.0, math.inf, False, True),
    "sway_coefficient": (0.0, math.inf, False, True),
    "rows": (1, math.inf, False, True),
    "plants_per_row": (1, math.inf, False, True),
    "row_spacing": (0.0, math.inf, True, True),
    "in_row_spacing": (0.0, math.inf, True, True),
    "jitter_sd": (0.0, math.inf, False, True),
    "background_density": (0.0, 1.0, False, False),
    "vertical_fov": (0.0, math.pi, True, True),
    "width": (16, 4096, False, False),
    "height": (16, 4096, False, False),
    "frame_count": (1, math.inf, False, True),
    "frame_interval": (0.0, math.inf, False, True),
    "plant_age": (0.0, math.inf, False, True),
}

PLANT_NAMESPACE = 1 << 32
PLANT_FIELDS = ("growth_seed", "jitter", "yaw", "scale", "phase", "background_position")
FOREGROUND_SCALE = (0.8, 1.2)
BACKGROUND_SCALE = (0.3, 0.8)


class InvalidRanges(ValueError):
    pass


def default_ranges() -> dict:
    text = resources.files("fieldforge").joinpath("data/default_ranges.toml").read_text()
    return {k: tuple(v) for k, v in loads_toml(text).items()}


def check_ranges(ranges: dict) -> dict:
    """Validate a range table and fill missing fields from the defaults."""
    unknown = set(ranges) - set(RANGE_FIELDS)
    if unknown:
        raise InvalidRanges(f"unknown range field(s): {sorted(unknown)}")
    merged = dict(default_ranges())
    merged.update(ranges)
    out = {}
    for name in RANGE_FIELDS:
        pair = merged[name]
        if len(pair) != 2:
            raise InvalidRanges(f"{name}: expected [min, max]")
        lo, hi = pair
        if lo > hi:
            raise InvalidRanges(f"{name}: min {lo} > max {hi}")
        if name in _LIMITS:
            a, b, a_open, b_open = _LIMITS[name]
            if lo < a or (a_open and lo == a) or hi > b or (b_open and hi == b and b != math.inf):
                raise InvalidRanges(f"{name}: range [{lo}, {hi}] outside allowed limits")
        if name in INTEGER_FIELDS:
            if int(lo) != lo or int(hi) != hi:
                raise InvalidRanges(f"{name}: integer field needs integer bounds")
            lo, hi = int(lo), int(hi)
        out[name] = (lo, hi)
    return out


def load_ranges(path) -> dict:
    return check_ranges({k: tuple(v) for k, v in load_toml(path).items()})


@dataclass(frozen=True)
class Layout:
    rows: int
    plants_per_row: int
    row_spacing: float
    in_row_spacing: float
    jitter_sd: float


@dataclass(frozen=True)
class CameraSpec:
    position: tuple
    look_at: tuple
    vertical_fov: float
    width: int
    height: int


@dataclass(frozen=True)
class SceneConfig:
    scene_id: int
    sun_azimuth: float
    sun_elevation: float
    fog_density: float
    ambient_factor: float
    sky_color: tuple
    wind: WindField
    layout: Layout
    background_density: float
    camera: CameraSpec
    capture_times: tuple
    plant_age: float = 25.0  # days of growth before capture

    def sun_direction(self) -> tuple:
        ce = math.cos(self.sun_elevation)
        return (ce * math.cos(self.sun_azimuth), ce * math.sin(self.sun_azimuth), math.sin(self.sun_elevation))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wind"] = asdict(self.wind)
        return d

    def to_toml(self, master: int | None = None) -> str:
        d = self.to_dict()
        for key in ("sky_color", "capture_times"):
            d[key] = list(d[key])
        d["wind"]["direction"] = list(d["wind"]["direction"])
        d["camera"]["position"] = list(d["camera"]["position"])
        d["camera"]["look_at"] = list(d["camera"]["look_at"])
        if master is not None:
            d = {"master": master, **d}
        return dumps_toml(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d.pop("master", None)
        wind = d.pop("wind")
        cam = d.pop("camera")
        return cls(
            wind=WindField(**{**wind, "direction": tuple(wind["direction"])}),
            layout=Layout(**d.pop("layout")),
            camera=CameraSpec(**{**cam, "position": tuple(cam["position"]), "look_at": tuple(cam["look_at"])}),
            sky_color=tuple(d.pop("sky_color")),
            capture_times=tuple(d.pop("capture_times")),
            **d,
        )


def load_scene(path) -> tuple[SceneConfig, int | None]:
    """Read a scene file; returns the config and the master seed if recorded."""
    data = load_toml(path)
    return SceneConfig.from_dict(data), data.get("master")


def sample_scene(master: int, scene_id: int, ranges: dict | None = None) -> SceneConfig:
    ranges = check_ranges(ranges or {})
    v = {}
    for index, name in enumerate(RANGE_FIELDS):
        lo, hi = ranges[name]
        rng = Stream.derived(master, [scene_id, index])
        v[name] = rng.integer(lo, hi) if name in INTEGER_FIELDS else rng.uniform_range(lo, hi)
    wind = WindField(
        speed=v["wind_speed"],
        direction=(math.cos(v["wind_direction"]), math.sin(v["wind_direction"])),
        gust_frequency=v["gust_frequency"],
        sway_coefficient=v["sway_coefficient"],
    )
    return SceneConfig(
        scene_id=scene_id,
        sun_azimuth=v["sun_azimuth"],
        sun_elevation=v["sun_elevation"],
        fog_density=v["fog_density"],
        ambient_factor=v["ambient_factor"],
        sky_color=(v["sky_r"], v["sky_g"], v["sky_b"]),
        wind=wind,
        layout=Layout(v["rows"], v["plants_per_row"], v["row_spacing"], v["in_row_spacing"], v["jitter_sd"]),
        background_density=v["background_density"],
        camera=CameraSpec(
            position=(v["camera_x"], v["camera_y"], v["camera_z"]),
            look_at=(v["look_x"], v["look_y"], v["look_z"]),
            vertical_fov=v["vertical_fov"],
            width=v["width"],
            height=v["height"],
        ),
        capture_times=tuple(k * v["frame_interval"] for k in range(v["frame_count"])),
        plant_age=v["plant_age"],
    )


@dataclass(frozen=True)
class Placement:
    plant_id: int
    position: tuple  # ground position (x, y), cm
    yaw: float
    scale: float
    growth_seed: int
    phase: float
    is_background: bool = False
    params_variant: object = field(default=None, compare=False)


def plant_seed(master: int, scene_id: int, plant_id: int, field_name: str) -> int:
    return derive_seed(master, [scene_id, PLANT_NAMESPACE, plant_id, PLANT_FIELDS.index(field_name)])


def _plant_stream(master, scene_id, plant_id, field_name) -> Stream:
    return Stream(plant_seed(master, scene_id, plant_id, field_name))


def place_plants(config: SceneConfig, master: int, params=None) -> list[Placement]:
    lay = config.layout
    sid = config.scene_id
    placements = []
    plant_id = 0
    for r in range(lay.rows):
        for j in range(lay.plants_per_row):
            gx = (j - (lay.plants_per_row - 1) / 2.0) * lay.in_row_spacing
            gy = r * lay.row_spacing
            jit = _plant_stream(master, sid, plant_id, "jitter")
            dx, dy = jit.normal(0.0, lay.jitter_sd), jit.normal(0.0, lay.jitter_sd)
            placements.append(_placement(master, sid, plant_id, (gx + dx, gy + dy), FOREGROUND_SCALE, False, params))
            plant_id += 1

    n_background = math.floor(config.background_density * len(placements))
    band_start = (lay.rows - 1) * lay.row_spacing + 0.75 * lay.row_spacing
    band_depth = 2.0 * lay.row_spacing
    half_width = (lay.plants_per_row / 2.0 + 1.0) * lay.in_row_spacing
    for _ in range(n_background):
        pos = _plant_stream(master, sid, plant_id, "background_position")
        x = pos.uniform_range(-half_width, half_width)
        y = band_start + band_depth * pos.uniform()
        placements.append(_placement(master, sid, plant_id, (x, y), BACKGROUND_SCALE, True, params))
        plant_id += 1
    return placements


def _placement(master, sid, plant_id, position, scale_range, background, params) -> Placement:
    return Placement(
        plant_id=plant_id,
        position=position,
        yaw=2.0 * math.pi * _plant_stream(master, sid, plant_id, "yaw").uniform(),
        scale=_plant_stream(master, sid, plant_id, "scale").uniform_range(*scale_range),
        growth_seed=plant_seed(master, sid, plant_id, "growth_seed"),
        phase=2.0 * math.pi * _plant_stream(master, sid, plant_id, "phase").uniform(),
        is_background=background,
        params_variant=params,
    )


def partition_scenes(scene_count: int, workers: int) -> list[list[int]]:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if scene_count < 0:
        raise ValueError("scene_count must be >= 0")
    base, extra = divmod(scene_count, workers)
    out, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        out.append(list(range(start, start + size)))
        start += size
    return out
