"""Geometrization of plant node trees into labeled triangle meshes, plus wind sway.

Axes become generalized cylinders whose ring frames are carried along the
polyline by parallel transport; leaves become quad-strip blades. Every
triangle carries ``(organ_class, plant_id, organ_id)`` so that renders can
emit exact ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .plantsim import ORGAN_LEAF, LeafParams, PlantParams, PlantStructure

CLASS_BACKGROUND, CLASS_STEM, CLASS_LEAF = 0, 1, 2
LEAF_QUADS = 8
_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Axis:
    vertices: np.ndarray  # (n, 3) cm
    radii: np.ndarray
    heights: np.ndarray
    organ_class: int
    plant_id: int
    organ_id: int


@dataclass
class LeafAnchor:
    position: np.ndarray
    heading: np.ndarray
    height: float
    plant_id: int
    organ_id: int


@dataclass
class Skeleton:
    axes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)


@dataclass
class LabeledMesh:
    vertices: np.ndarray  # (V, 3) float64, cm
    triangles: np.ndarray  # (T, 3) int64
    tri_class: np.ndarray  # (T,)
    tri_plant: np.ndarray
    tri_organ: np.ndarray
    normals: np.ndarray  # (V, 3) unit
    vertex_class: np.ndarray  # (V,) organ class of the owning primitive
    vertex_organ: np.ndarray
    heights: np.ndarray  # (V,) height above ground, cm

    @classmethod
    def empty(cls) -> "LabeledMesh":
        return cls(
            vertices=np.zeros((0, 3)),
            triangles=np.zeros((0, 3), dtype=np.int64),
            tri_class=np.zeros(0, dtype=np.int64),
            tri_plant=np.zeros(0, dtype=np.int64),
            tri_organ=np.zeros(0, dtype=np.int64),
            normals=np.zeros((0, 3)),
            vertex_class=np.zeros(0, dtype=np.int64),
            vertex_organ=np.zeros(0, dtype=np.int64),
            heights=np.zeros(0),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def labels(self) -> list:
        return sorted(zip(self.tri_class.tolist(), self.tri_plant.tolist(), self.tri_organ.tolist()))

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def to_text(self) -> str:
        lines = [f"MESH v1 {self.n_vertices} {self.n_triangles}"]
        lines += [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in self.vertices]
        for (i, j, k), c, p, o in zip(self.triangles, self.tri_class, self.tri_plant, self.tri_organ):
            lines.append(f"t {i} {j} {k} {c} {p} {o}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def merge_meshes(meshes) -> LabeledMesh:
    meshes = [m for m in meshes if m.n_vertices]
    if not meshes:
        return LabeledMesh.empty()
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes[:-1]])
    return LabeledMesh(
        vertices=np.concatenate([m.vertices for m in meshes]),
        triangles=np.concatenate([m.triangles + off for m, off in zip(meshes, offsets)]),
        tri_class=np.concatenate([m.tri_class for m in meshes]),
        tri_plant=np.concatenate([m.tri_plant for m in meshes]),
        tri_organ=np.concatenate([m.tri_organ for m in meshes]),
        normals=np.concatenate([m.normals for m in meshes]),
        vertex_class=np.concatenate([m.vertex_class for m in meshes]),
        vertex_organ=np.concatenate([m.vertex_organ for m in meshes]),
        heights=np.concatenate([m.heights for m in meshes]),
    )


def _turn_angle(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = float(np.dot(a, b) / (na * nb))
    return math.acos(max(-1.0, min(1.0, c)))


def skeletonize(structure: PlantStructure, angle_tol: float = 0.01, plant_id: int = 0) -> Skeleton:
    """Reduce the node tree to one polyline per axis.

    An axis is a maximal run of nodes sharing organ and branch order; a lateral axis starts at
    the node it branches from. Interior vertices whose direction change is
    below ``angle_tol`` are dropped.
    """
    nodes = structure.nodes
    children: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        if n.parent is not None:
            children[n.parent].append(n.id)

    skeleton = Skeleton()
    organ_counter = 0

    # axis starts: the root, and every non-leaf node whose (organ, order) differs from its parent
    def axis_key(n):
        return (n.organ, n.branch_order)

    starts = [(nodes[0].id, None)]
    for n in nodes[1:]:
        if n.organ != ORGAN_LEAF and axis_key(nodes[n.parent]) != axis_key(n):
            starts.append((n.id, n.parent))

    for first, base in starts:
        key = axis_key(nodes[first])
        own = []
        cur = first
        while True:
            own.append(cur)
            nxt = [c for c in children[cur] if axis_key(nodes[c]) == key]
            if not nxt:
                break
            cur = nxt[0]
        chain = own if base is None else [base] + own
        organ_id = organ_counter
        organ_counter += 1
        pts = np.array([nodes[i].position for i in chain], dtype=float)
        radii = np.array([nodes[i].radius for i in chain], dtype=float)
        keep = _simplify(pts, angle_tol)
        if len(keep) >= 2:
            skeleton.axes.append(
                Axis(
                    vertices=pts[keep],
                    radii=radii[keep],
                    heights=pts[keep, 2].copy(),
                    organ_class=CLASS_STEM,
                    plant_id=plant_id,
                    organ_id=organ_id,
                )
            )
        for i in own:
            for c in children[i]:
                if nodes[c].organ == ORGAN_LEAF:
                    pos = np.array(nodes[c].position, dtype=float)
                    heading = pos - np.array(nodes[i].position, dtype=float)
                    skeleton.leaves.append(
                        LeafAnchor(
                            position=pos,
                            heading=heading / np.linalg.norm(heading),
                            height=float(pos[2]),
                            plant_id=plant_id,
                            organ_id=organ_counter,
                        )
                    )
                    organ_counter += 1
    return skeleton


def _simplify(pts: np.ndarray, angle_tol: float) -> list:
    if len(pts) <= 2:
        return list(range(len(pts)))
    keep = [0]
    for i in range(1, len(pts) - 1):
        if _turn_angle(pts[i] - pts[keep[-1]], pts[i + 1] - pts[i]) >= angle_tol:
            keep.append(i)
    keep.append(len(pts) - 1)
    return keep


def polyline_length(pts: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def _initial_normal(t: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n = ref - np.dot(ref, t) * t
    return n / np.linalg.norm(n)


def tube_mesh(skeleton: Skeleton, sides: int = 6) -> LabeledMesh:
    if sides < 3:
        raise ValueError("tube_mesh needs at least 3 sides")
    theta = 2.0 * math.pi * np.arange(sides) / sides
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    parts = []
    for axis in skeleton.axes:
        pts = axis.vertices
        n_v = len(pts)
        seg = np.diff(pts, axis=0)
        seg /= np.linalg.norm(seg, axis=1, keepdims=True)
        tangents = np.empty_like(pts)
        tangents[0], tangents[-1] = seg[0], seg[-1]
        if n_v > 2:
            mid = seg[:-1] + seg[1:]
            norms = np.linalg.norm(mid, axis=1, keepdims=True)
            tangents[1:-1] = np.where(norms > 1e-12, mid / np.maximum(norms, 1e-300), seg[1:])
        frame_n = np.empty_like(pts)
        frame_n[0] = _initial_normal(tangents[0])
        for i in range(1, n_v):
            n = frame_n[i - 1] - np.dot(frame_n[i - 1], tangents[i]) * tangents[i]
            norm = np.linalg.norm(n)
            frame_n[i] = n / norm if norm > 1e-12 else _initial_normal(tangents[i])
        frame_b = np.cross(tangents, frame_n)
        # ring directions: (n_v, sides, 3)
        dirs = cos_t[None, :, None] * frame_n[:, None, :] + sin_t[None, :, None] * frame_b[:, None, :]
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        verts = pts[:, None, :] + axis.radii[:, None, None] * dirs
        ring = np.arange(n_v - 1)[:, None] * sides
        j = np.arange(sides)[None, :]
        a = ring + j
        b = ring + (j + 1) % sides
        c = a + sides
        d = b + sides
        tris = np.concatenate([np.stack([a, b, d], -1), np.stack([a, d, c], -1)], axis=1).reshape(-1, 3)
        n_t = len(tris)
        parts.append(
            LabeledMesh(
                vertices=verts.reshape(-1, 3),
                triangles=tris.astype(np.int64),
                tri_class=np.full(n_t, axis.organ_class, dtype=np.int64),
                tri_plant=np.full(n_t, axis.plant_id, dtype=np.int64),
                tri_organ=np.full(n_t, axis.organ_id, dtype=np.int64),
                normals=dirs.reshape(-1, 3),
                vertex_class=np.full(n_v * sides, axis.organ_class, dtype=np.int64),
                vertex_organ=np.full(n_v * sides, axis.organ_id, dtype=np.int64),
                heights=np.repeat(axis.heights, sides),
            )
        )
    return merge_meshes(parts)


def leaf_mesh(anchor: LeafAnchor, params: PlantParams | LeafParams) -> LabeledMesh:
    """Quad-strip blade: 9 stations along a parabolic midrib, elliptic width."""
    lf = params.leaf if isinstance(params, PlantParams) else params
    d = np.asarray(anchor.heading, dtype=float)
    d = d / np.linalg.norm(d)
    w = np.cross(d, _UP)
    if np.linalg.norm(w) < 1e-9:
        w = np.array([1.0, 0.0, 0.0])
    w /= np.linalg.norm(w)
    droop = np.cross(w, d)  # points "up" relative to the blade; midrib bends against it

    s = np.arange(LEAF_QUADS + 1) / LEAF_QUADS
    L = lf.leaf_length
    mid = anchor.position[None, :] + (L * s)[:, None] * d[None, :] - (lf.curvature * L * s**2)[:, None] * droop[None, :]
    half = 0.5 * lf.leaf_width * np.maximum(np.sqrt(np.clip(1.0 - (2.0 * s - 1.0) ** 2, 0.0, None)), 0.04)
    left = mid - half[:, None] * w[None, :]
    right = mid + half[:, None] * w[None, :]
    verts = np.stack([left, right], axis=1).reshape(-1, 3)

    # blade normal from the midrib tangent
    tangent = d[None, :] - (2.0 * lf.curvature * s)[:, None] * droop[None, :]
    normal = np.cross(w[None, :], tangent)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normals = np.repeat(normal, 2, axis=0)

    i = 2 * np.arange(LEAF_QUADS)
    tris = np.concatenate(
        [np.stack([i, i + 1, i + 3], -1), np.stack([i, i + 3, i + 2], -1)], axis=0
    ).astype(np.int64)
    n_t = len(tris)
    n_v = len(verts)
    return LabeledMesh(
        vertices=verts,
        triangles=tris,
        tri_class=np.full(n_t, CLASS_LEAF, dtype=np.int64),
        tri_plant=np.full(n_t, anchor.plant_id, dtype=np.int64),
        tri_organ=np.full(n_t, anchor.organ_id, dtype=np.int64),
        normals=normals,
        vertex_class=np.full(n_v, CLASS_LEAF, dtype=np.int64),
        vertex_organ=np.full(n_v, anchor.organ_id, dtype=np.int64),
        heights=np.maximum(verts[:, 2], 0.0),
    )


def plant_mesh(structure: PlantStructure, params: PlantParams, plant_id: int = 0,
               sides: int = 6, angle_tol: float = 0.01) -> LabeledMesh:
    skel = skeletonize(structure, angle_tol, plant_id=plant_id)
    return merge_meshes([tube_mesh(skel, sides)] + [leaf_mesh(a, params) for a in skel.leaves])


@dataclass(frozen=True)
class WindField:
    speed: float = 0.0  # m/s
    direction: tuple = (1.0, 0.0)
    gust_frequency: float = 0.5  # Hz
    sway_coefficient: float = 1.5  # cm per m/s

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("wind speed must be >= 0")
        if abs(math.hypot(*self.direction) - 1.0) > 1e-9:
            raise ValueError("wind direction must be a unit vector")


def sway_offsets(heights: np.ndarray, vertex_class: np.ndarray, vertex_organ: np.ndarray,
                 wind: WindField, t: float, plant_phase: float) -> np.ndarray:
    """Horizontal displacement magnitude (cm) along the wind direction per vertex."""
    h_max = float(np.max(heights)) if len(heights) else 0.0
    if h_max <= 0:
        raise ValueError("animate needs a positive maximum height")
    omega = 2.0 * math.pi * wind.gust_frequency
    delta = wind.sway_coefficient * wind.speed * (heights / h_max) ** 2 * math.sin(omega * t + plant_phase)
    leaf = vertex_class == CLASS_LEAF
    flutter = 0.25 * delta * np.sin(2.0 * omega * t + vertex_organ.astype(float))
    return np.where(leaf, delta + flutter, delta)


def animate(mesh: LabeledMesh, heights, wind: WindField, t: float, plant_phase: float = 0.0) -> LabeledMesh:
    heights = np.asarray(heights, dtype=float)
    if heights.shape != (mesh.n_vertices,):
        raise ValueError("heights must align with mesh vertices")
    offset = sway_offsets(heights, mesh.vertex_class, mesh.vertex_organ, wind, t, plant_phase)
    direction = np.array([wind.direction[0], wind.direction[1], 0.0])
    return replace(mesh, vertices=mesh.vertices + offset[:, None] * direction[None, :])


def transform_mesh(mesh: LabeledMesh, position, yaw: float, scale: float) -> LabeledMesh:
    """Place a plant-local mesh in the field (rotate about z, scale, translate)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    verts = (mesh.vertices @ rot.T) * scale + np.array([position[0], position[1], 0.0])
    return replace(mesh, vertices=verts, normals=mesh.normals @ rot.T, heights=mesh.heights * scale)
