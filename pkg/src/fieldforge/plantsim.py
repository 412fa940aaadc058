"""Stochastic plant growth on a node tree with sample-and-select tropism.

A plant is grown from a single root node. Every axis (the main stem and each
lateral branch) owns an apex that elongates at a fixed rate, drops a node
each time it has covered a sampled internode distance, and re-steers its
heading through :func:`apply_tropism`. New stem and branch nodes carry leaf
attachments placed by the golden-angle rule and may schedule a lateral
branch that starts growing after a delay.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config_io import load_toml
from .rng import Stream

UP = np.array([0.0, 0.0, 1.0])
GOLDEN_ANGLE = math.radians(137.5)
RADIUS_FLOOR = 0.02  # cm
TROPISM_KINDS = ("gravitropism", "plagiotropism", "none")
ORGANS = ("stem", "branch", "leaf")

ORGAN_STEM, ORGAN_BRANCH, ORGAN_LEAF = 0, 1, 2


class InvalidParams(ValueError):
    pass


@dataclass(frozen=True)
class AxisParams:
    """Growth parameters of one axis kind (main stem or lateral branch)."""

    max_length: float = 60.0  # cm
    elongation_rate: float = 4.0  # cm/day
    internode_mean: float = 6.0
    internode_sd: float = 1.0
    insertion_angle_mean: float = 45.0  # degrees
    insertion_angle_sd: float = 8.0
    branching_delay: float = 4.0  # days
    max_branch_order: int = 1
    radius_base: float = 0.9
    radius_taper: float = 0.01  # cm per cm
    leaves_per_node: int = 1


@dataclass(frozen=True)
class LeafParams:
    leaf_length: float = 22.0  # cm
    leaf_width: float = 4.0
    insertion_angle_mean: float = 50.0  # degrees
    insertion_angle_sd: float = 6.0
    curvature: float = 0.35  # midrib droop, fraction of leaf_length at the tip


@dataclass(frozen=True)
class TropismParams:
    kind: str = "gravitropism"
    trials: int = 5
    sigma: float = 0.25  # radians


@dataclass(frozen=True)
class PlantParams:
    stem: AxisParams = field(default_factory=AxisParams)
    branch: AxisParams = field(
        default_factory=lambda: AxisParams(
            max_length=18.0,
            elongation_rate=2.5,
            internode_mean=6.0,
            internode_sd=1.0,
            insertion_angle_mean=40.0,
            branching_delay=6.0,
            max_branch_order=1,
            radius_base=0.6,
            radius_taper=0.01,
            leaves_per_node=1,
        )
    )
    leaf: LeafParams = field(default_factory=LeafParams)
    tropism: TropismParams = field(default_factory=TropismParams)

    def validate(self) -> None:
        for name in ("stem", "branch"):
            ax: AxisParams = getattr(self, name)
            for attr in ("max_length", "elongation_rate", "internode_mean", "radius_base"):
                if not getattr(ax, attr) > 0:
                    raise InvalidParams(f"{name}.{attr} must be > 0")
            for attr in ("internode_sd", "insertion_angle_sd", "radius_taper", "branching_delay"):
                if not getattr(ax, attr) >= 0:
                    raise InvalidParams(f"{name}.{attr} must be >= 0")
            if ax.max_branch_order < 0:
                raise InvalidParams(f"{name}.max_branch_order must be >= 0")
            if ax.leaves_per_node < 0:
                raise InvalidParams(f"{name}.leaves_per_node must be >= 0")
        lf = self.leaf
        if not (lf.leaf_length > 0 and lf.leaf_width > 0):
            raise InvalidParams("leaf.leaf_length and leaf.leaf_width must be > 0")
        if lf.insertion_angle_sd < 0:
            raise InvalidParams("leaf.insertion_angle_sd must be >= 0")
        tr = self.tropism
        if tr.kind not in TROPISM_KINDS:
            raise InvalidParams(f"tropism.kind must be one of {TROPISM_KINDS}")
        if tr.trials < 1:
            raise InvalidParams("tropism.trials must be >= 1")
        if tr.sigma < 0:
            raise InvalidParams("tropism.sigma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PlantParams":
        sections = {"stem": AxisParams, "branch": AxisParams, "leaf": LeafParams, "tropism": TropismParams}
        unknown = set(data) - set(sections)
        if unknown:
            raise InvalidParams(f"unknown plant parameter section(s): {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            values = dict(data.get(name, {}))
            known = {f.name for f in dataclasses.fields(typ)}
            bad = set(values) - known
            if bad:
                raise InvalidParams(f"unknown key(s) in [{name}]: {sorted(bad)}")
            kwargs[name] = typ(**values)
        params = cls(**kwargs)
        params.validate()
        return params

    @classmethod
    def load(cls, path) -> "PlantParams":
        return cls.from_dict(load_toml(path))

    def digest(self) -> str:
        return hashlib.sha256(repr(self.to_dict()).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PlantNode:
    id: int
    parent: Optional[int]
    organ: int
    position: tuple
    radius: float
    creation_time: float
    branch_order: int


@dataclass
class PlantStructure:
    nodes: list
    params_digest: str = ""
    seed: int = 0

    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=float).reshape(-1, 3)

    def to_text(self) -> str:
        lines = [f"PLANT v1 {len(self.nodes)}"]
        for n in self.nodes:
            parent = -1 if n.parent is None else n.parent
            x, y, z = n.position
            lines.append(
                f"{n.id} {parent} {ORGANS[n.organ]} {x:.9f} {y:.9f} {z:.9f} "
                f"{n.radius:.9f} {n.creation_time:.9f} {n.branch_order}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PlantStructure":
        lines = text.strip().splitlines()
        head = lines[0].split()
        if head[:2] != ["PLANT", "v1"]:
            raise ValueError("not a PLANT v1 file")
        count = int(head[2])
        nodes = []
        for line in lines[1 : 1 + count]:
            f = line.split()
            parent = int(f[1])
            nodes.append(
                PlantNode(
                    id=int(f[0]),
                    parent=None if parent < 0 else parent,
                    organ=ORGANS.index(f[2]),
                    position=(float(f[3]), float(f[4]), float(f[5])),
                    radius=float(f[6]),
                    creation_time=float(f[7]),
                    branch_order=int(f[8]),
                )
            )
        if len(nodes) != count:
            raise ValueError(f"expected {count} nodes, found {len(nodes)}")
        return cls(nodes)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PlantStructure":
        return cls.from_text(Path(path).read_text())


def _perpendicular(v: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(v, ref)
    return u / np.linalg.norm(u)


def _rotate_away(heading: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Tilt ``heading`` by ``angle`` towards the unit vector ``axis`` (axis ⟂ heading)."""
    out = heading * math.cos(angle) + axis * math.sin(angle)
    return out / np.linalg.norm(out)


def perturb_heading(heading, sigma: float, rng: Stream) -> np.ndarray:
    heading = np.asarray(heading, dtype=float)
    alpha = abs(rng.normal(0.0, sigma))
    phi = 2.0 * math.pi * rng.uniform()
    u = _perpendicular(heading)
    v = np.cross(heading, u)
    # rotating about an axis orthogonal to heading moves it along the
    # perpendicular direction (axis x heading)
    axis = math.cos(phi) * u + math.sin(phi) * v
    direction = np.cross(axis, heading)
    out = heading * math.cos(alpha) + direction * math.sin(alpha)
    return out / np.linalg.norm(out)


def tropism_objective(candidate: np.ndarray, kind: str) -> float:
    if kind == "gravitropism":
        return -float(np.dot(candidate, UP))
    if kind == "plagiotropism":
        return abs(float(np.dot(candidate, UP)))
    return 0.0


def apply_tropism(heading, kind: str, trials: int, sigma: float, rng: Stream) -> np.ndarray:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    best = None
    best_score = math.inf
    for _ in range(trials):
        cand = perturb_heading(heading, sigma, rng)
        if kind == "none":
            # first candidate wins; later draws still consume the stream
            if best is None:
                best = cand
            continue
        score = tropism_objective(cand, kind)
        if score < best_score:
            best, best_score = cand, score
    return best


@dataclass
class _Apex:
    axis_id: int
    organ: int
    order: int
    heading: np.ndarray
    position: np.ndarray
    last_node: int
    base_distance: float  # path length from the root to the axis base
    rng: Stream
    length: float = 0.0
    since_node: float = 0.0
    next_internode: float = 0.0
    node_count: int = 0
    leaf_count: int = 0


def _sample_internode(ax: AxisParams, rng: Stream) -> float:
    return max(rng.normal(ax.internode_mean, ax.internode_sd), 0.1 * ax.internode_mean)


def grow(params: PlantParams, seed: int, t_end: float, dt: float = 1.0) -> PlantStructure:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if t_end < 0:
        raise ValueError("t_end must be >= 0")
    params.validate()
    trop = params.tropism

    nodes: list[PlantNode] = [
        PlantNode(0, None, ORGAN_STEM, (0.0, 0.0, 0.0), max(params.stem.radius_base, RADIUS_FLOOR), 0.0, 0)
    ]
    axis_counter = 0

    def new_apex(organ, order, heading, position, last_node, base_distance):
        nonlocal axis_counter
        apex = _Apex(
            axis_id=axis_counter,
            organ=organ,
            order=order,
            heading=heading,
            position=position.copy(),
            last_node=last_node,
            base_distance=base_distance,
            rng=Stream.derived(seed, [axis_counter]),
        )
        axis_counter += 1
        apex.next_internode = _sample_internode(_axis_params(organ), apex.rng)
        return apex

    def _axis_params(organ):
        return params.stem if organ == ORGAN_STEM else params.branch

    apices = [new_apex(ORGAN_STEM, 0, UP.copy(), np.zeros(3), 0, 0.0)]
    pending: list[tuple] = []  # (spawn_time, parent id, heading, order, base_distance, azimuth, angle)

    n_steps = int(math.floor(t_end / dt + 1e-9))
    for step in range(n_steps):
        t = (step + 1) * dt
        for apex in list(apices):
            ax = _axis_params(apex.organ)
            remaining = min(ax.elongation_rate * dt, ax.max_length - apex.length)
            while remaining > 1e-12:
                seg = min(remaining, apex.next_internode - apex.since_node)
                apex.position = apex.position + apex.heading * seg
                apex.since_node += seg
                apex.length += seg
                remaining -= seg
                if apex.since_node >= apex.next_internode - 1e-12:
                    _emit_node(params, ax, apex, nodes, pending, t)
                    apex.heading = apply_tropism(apex.heading, trop.kind, trop.trials, trop.sigma, apex.rng)
                    apex.since_node = 0.0
                    apex.next_internode = _sample_internode(ax, apex.rng)
        ready = [p for p in pending if p[0] <= t + 1e-9]
        pending = [p for p in pending if p[0] > t + 1e-9]
        for _, parent_id, heading, order, base_distance, azimuth, angle in ready:
            u = _perpendicular(heading)
            v = np.cross(heading, u)
            lateral = math.cos(azimuth) * u + math.sin(azimuth) * v
            start = np.array(nodes[parent_id].position)
            apices.append(
                new_apex(ORGAN_BRANCH, order, _rotate_away(heading, lateral, angle), start, parent_id, base_distance)
            )

    return PlantStructure(nodes, params_digest=params.digest(), seed=seed)


def _emit_node(params: PlantParams, ax: AxisParams, apex: _Apex, nodes, pending, t: float) -> None:
    distance = apex.base_distance + apex.length
    radius = max(ax.radius_base - ax.radius_taper * distance, RADIUS_FLOOR)
    node_id = len(nodes)
    pos = tuple(float(c) for c in apex.position)
    nodes.append(PlantNode(node_id, apex.last_node, apex.organ, pos, radius, t, apex.order))
    apex.last_node = node_id
    apex.node_count += 1
    rng = apex.rng

    u = _perpendicular(apex.heading)
    v = np.cross(apex.heading, u)
    lf = params.leaf
    for k in range(ax.leaves_per_node):
        azimuth = apex.leaf_count * GOLDEN_ANGLE + 2.0 * math.pi * k / ax.leaves_per_node
        apex.leaf_count += 1
        angle = math.radians(rng.normal(lf.insertion_angle_mean, lf.insertion_angle_sd))
        lateral = math.cos(azimuth) * u + math.sin(azimuth) * v
        leaf_dir = _rotate_away(apex.heading, lateral, angle)
        # anchor sits on the axis surface so its heading is recoverable from positions
        anchor = tuple(float(c) for c in np.asarray(pos) + leaf_dir * radius)
        nodes.append(PlantNode(len(nodes), node_id, ORGAN_LEAF, anchor, radius, t, apex.order))

    bax = params.branch
    if apex.order < ax.max_branch_order and apex.node_count >= 2:
        azimuth = (apex.node_count * GOLDEN_ANGLE) + math.pi
        angle = math.radians(rng.normal(bax.insertion_angle_mean, bax.insertion_angle_sd))
        pending.append((t + ax.branching_delay, node_id, apex.heading.copy(), apex.order + 1, distance, azimuth, angle))
