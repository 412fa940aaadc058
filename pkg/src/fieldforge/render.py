"""CPU rasterizer producing RGB, label and depth planes from one visibility pass.

Visibility is resolved per pixel over all candidate fragments at once: the
winning fragment is the nearest one, ties broken by plant id and then by
triangle content, so the result does not depend on the order in which
meshes are submitted. RGB, label and depth are all read off that single
winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frames import LABEL_CLASS_STRIDE, FrameSet
from .geom import CLASS_LEAF, CLASS_STEM, LabeledMesh, merge_meshes
from .rng import Stream, derive_seed

NEAR_PLANE = 1.0  # cm; triangles touching it are culled whole
SHADOW_EPS = 0.1  # cm
ALBEDO = {
    CLASS_STEM: np.array([0.35, 0.28, 0.12]),
    CLASS_LEAF: np.array([0.10, 0.45, 0.12]),
}
TINT_NAMESPACE = 0x7417
_FRAGMENT_CHUNK = 1 << 21
_WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    vertical_fov: float
    width: int
    height: int

    @classmethod
    def look_at(cls, position, look_at, vertical_fov: float, width: int, height: int) -> "Camera":
        position = np.asarray(position, dtype=float)
        forward = np.asarray(look_at, dtype=float) - position
        forward /= np.linalg.norm(forward)
        ref = _WORLD_UP if abs(forward @ _WORLD_UP) < 0.999 else np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, ref)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return cls(position, right, up, forward, float(vertical_fov), int(width), int(height))

    @classmethod
    def from_spec(cls, spec) -> "Camera":
        return cls.look_at(spec.position, spec.look_at, spec.vertical_fov, spec.width, spec.height)

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / math.tan(self.vertical_fov / 2.0)

    def to_view(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to view coordinates (right, up, forward)."""
        rel = np.asarray(points, dtype=float) - self.position
        return np.stack([rel @ self.right, rel @ self.up, rel @ self.forward], axis=-1)

    def project_points(self, points: np.ndarray):
        view = self.to_view(points)
        z = view[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.width / 2.0 + self.focal * view[..., 0] / z
            y = self.height / 2.0 - self.focal * view[..., 1] / z
        return np.stack([x, y], axis=-1), z

    def pixel_rays(self) -> np.ndarray:
        """Per-pixel-center ray directions scaled to unit forward component, (H, W, 3)."""
        px = np.arange(self.width) + 0.5
        py = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid((px - self.width / 2.0) / self.focal, (self.height / 2.0 - py) / self.focal)
        return (self.forward[None, None, :] + gx[..., None] * self.right + gy[..., None] * self.up)


def project(camera: Camera, point) -> tuple:
    xy, z = camera.project_points(np.asarray(point, dtype=float)[None, :])
    return (float(xy[0, 0]), float(xy[0, 1])), float(z[0])


def sun_direction(azimuth: float, elevation: float) -> np.ndarray:
    ce = math.cos(elevation)
    return np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def quantize(color: np.ndarray) -> np.ndarray:
    return np.floor(255.0 * np.clip(color, 0.0, 1.0) + 0.5).astype(np.uint8)


def shade_linear(normals, albedo, sun_dir, ambient: float, fog_density: float, sky_color, shadowed, depth):
    """Vectorized shading in linear [0, 1] color; depth in meters."""
    normals = np.atleast_2d(normals)
    lambert = np.maximum(0.0, normals @ np.asarray(sun_dir, dtype=float))
    lit = np.where(np.asarray(shadowed), 0.0, 1.0)
    intensity = ambient + (1.0 - ambient) * lambert * lit
    color = np.atleast_2d(albedo) * intensity[:, None]
    transmit = np.exp(-fog_density * np.asarray(depth, dtype=float))[:, None]
    return color * transmit + np.asarray(sky_color, dtype=float)[None, :] * (1.0 - transmit)


def shade(normal, albedo, sun_dir, weather, shadowed: bool, depth: float) -> np.ndarray:
    """RGB bytes for one surface sample.

    ``weather`` is ``(fog_density, ambient_factor, sky_color)``.
    """
    fog_density, ambient, sky = weather
    c = shade_linear(np.asarray(normal, float)[None, :], np.asarray(albedo, float)[None, :], sun_dir,
                     ambient, fog_density, sky, np.array([shadowed]), np.array([depth]))
    return quantize(c[0])


def _ray_triangle_hits(origins, direction, v0, v1, v2, t_min=1e-9):
    """Möller–Trumbore for paired rays/triangles (all arrays (N, 3))."""
    e1 = v1 - v0
    e2 = v2 - v0
    h = np.cross(np.broadcast_to(direction, e2.shape), e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > 1e-14
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = origins - v0
    u = f * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = f * (q @ direction if direction.ndim == 1 else np.einsum("ij,ij->i", q, direction))
    t = f * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > t_min)


def shadow_test(point, sun_dir, occluders) -> bool:
    occ = np.asarray(occluders, dtype=float).reshape(-1, 3, 3)
    if len(occ) == 0:
        return False
    sun_dir = np.asarray(sun_dir, dtype=float)
    origin = np.asarray(point, dtype=float) + SHADOW_EPS * sun_dir
    origins = np.broadcast_to(origin, (len(occ), 3))
    return bool(_ray_triangle_hits(origins, sun_dir, occ[:, 0], occ[:, 1], occ[:, 2]).any())


def shadow_mask(points: np.ndarray, sun_dir, tri_verts: np.ndarray, grid: int = 48) -> np.ndarray:
    """shadow_test for many points, with a sun-aligned 2D grid to prune candidates.

    A shadow ray can only hit a triangle whose projection onto the plane
    orthogonal to the sun contains the point's projection, so bucketing by
    that projection is exact.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n_pts = len(points)
    if n_pts == 0 or len(tri_verts) == 0:
        return np.zeros(n_pts, dtype=bool)
    sun_dir = np.asarray(sun_dir, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(sun_dir[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    bu = np.cross(sun_dir, ref)
    bu /= np.linalg.norm(bu)
    bv = np.cross(sun_dir, bu)
    basis = np.stack([bu, bv], axis=1)

    origins = points + SHADOW_EPS * sun_dir
    p2 = origins @ basis  # (P, 2)
    t2 = tri_verts @ basis  # (T, 3, 2)
    lo = np.minimum(p2.min(axis=0), t2.reshape(-1, 2).min(axis=0))
    hi = np.maximum(p2.max(axis=0), t2.reshape(-1, 2).max(axis=0))
    cell = np.maximum((hi - lo) / grid, 1e-9)

    def cell_of(xy):
        return np.clip(((xy - lo) / cell).astype(np.int64), 0, grid - 1)

    # only triangles ahead of some point along the sun matter; cheap global filter
    ahead = (tri_verts @ sun_dir).max(axis=1) > (origins @ sun_dir).min()
    tri_idx = np.nonzero(ahead)[0]
    if len(tri_idx) == 0:
        return np.zeros(n_pts, dtype=bool)
    cmin = cell_of(t2[tri_idx].min(axis=1))
    cmax = cell_of(t2[tri_idx].max(axis=1))
    spans = cmax - cmin + 1
    counts = spans[:, 0] * spans[:, 1]
    rep_tri = np.repeat(np.arange(len(tri_idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cx = cmin[rep_tri, 0] + local % spans[rep_tri, 0]
    cy = cmin[rep_tri, 1] + local // spans[rep_tri, 0]
    cell_ids = cx * grid + cy
    order = np.argsort(cell_ids, kind="stable")
    cell_sorted = cell_ids[order]
    tri_sorted = tri_idx[rep_tri[order]]
    starts = np.searchsorted(cell_sorted, np.arange(grid * grid), side="left")
    ends = np.searchsorted(cell_sorted, np.arange(grid * grid), side="right")

    pc = cell_of(p2)
    pcell = pc[:, 0] * grid + pc[:, 1]
    n_cand = ends[pcell] - starts[pcell]
    total = int(n_cand.sum())
    hit = np.zeros(n_pts, dtype=bool)
    if total == 0:
        return hit
    chunk = 1 << 20
    pt_all = np.repeat(np.arange(n_pts), n_cand)
    off_all = np.arange(total) - np.repeat(np.cumsum(n_cand) - n_cand, n_cand)
    for s in range(0, total, chunk):
        pt = pt_all[s : s + chunk]
        tri = tri_sorted[starts[pcell[pt]] + off_all[s : s + chunk]]
        tv = tri_verts[tri]
        h = _ray_triangle_hits(origins[pt], sun_dir, tv[:, 0], tv[:, 1], tv[:, 2])
        hit[pt[h]] = True
    return hit


def plant_tint(scene_id: int, plant_id: int) -> float:
    u = Stream(derive_seed(scene_id, [TINT_NAMESPACE, plant_id])).uniform()
    return 1.0 + 0.1 * (2.0 * u - 1.0)


def _fragments(xy, z, tris, width, height):
    """Covered pixel samples for every triangle (top-left fill rule).

    Yields (tri_index, pixel_index, b0, b1, b2) in screen-space barycentrics.
    """
    p0, p1, p2 = xy[tris[:, 0]], xy[tris[:, 1]], xy[tris[:, 2]]

    def edge(a, b, px, py):
        return (px - a[..., 0]) * (b[..., 1] - a[..., 1]) - (py - a[..., 1]) * (b[..., 0] - a[..., 0])

    area = edge(p0, p1, p2[:, 0], p2[:, 1])
    valid = np.isfinite(area) & (area != 0.0)
    # orient every triangle so that area > 0; remember the swap for barycentrics
    swap = area < 0
    q1 = np.where(swap[:, None], p2, p1)
    q2 = np.where(swap[:, None], p1, p2)
    area = np.abs(area)

    allx = np.stack([p0[:, 0], p1[:, 0], p2[:, 0]], 1)
    ally = np.stack([p0[:, 1], p1[:, 1], p2[:, 1]], 1)
    with np.errstate(invalid="ignore"):
        xmin = np.clip(np.ceil(allx.min(1) - 0.5), 0, width)
        xmax = np.clip(np.floor(allx.max(1) - 0.5), -1, width - 1)
        ymin = np.clip(np.ceil(ally.min(1) - 0.5), 0, height)
        ymax = np.clip(np.floor(ally.max(1) - 0.5), -1, height - 1)
    nx = np.where(valid, xmax - xmin + 1, 0).clip(0).astype(np.int64)
    ny = np.where(valid, ymax - ymin + 1, 0).clip(0).astype(np.int64)
    counts = nx * ny
    xmin = np.nan_to_num(xmin).astype(np.int64)
    ymin = np.nan_to_num(ymin).astype(np.int64)

    def is_top_left(a, b):
        dx = b[:, 0] - a[:, 0]
        dy = b[:, 1] - a[:, 1]
        return ((dy == 0) & (dx < 0)) | (dy > 0)

    tl0 = is_top_left(q1, q2)  # edge opposite vertex 0
    tl1 = is_top_left(q2, p0)  # opposite (oriented) vertex 1
    tl2 = is_top_left(p0, q1)  # opposite (oriented) vertex 2

    cum = np.cumsum(counts)
    start = 0
    n_tri = len(tris)
    while start < n_tri:
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + _FRAGMENT_CHUNK, side="right"))
        stop = max(stop, start + 1)
        sel = np.arange(start, min(stop, n_tri))
        c = counts[sel]
        if c.sum():
            t = np.repeat(sel, c)
            local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
            px = xmin[t] + local % nx[t]
            py = ymin[t] + local // nx[t]
            cx = px + 0.5
            cy = py + 0.5
            w0 = edge(q1[t], q2[t], cx, cy)
            w1 = edge(q2[t], p0[t], cx, cy)
            w2 = edge(p0[t], q1[t], cx, cy)
            inside = (
                ((w0 > 0) | ((w0 == 0) & tl0[t]))
                & ((w1 > 0) | ((w1 == 0) & tl1[t]))
                & ((w2 > 0) | ((w2 == 0) & tl2[t]))
            )
            t, px, py = t[inside], px[inside], py[inside]
            a = area[t]
            b0, b1, b2 = w0[inside] / a, w1[inside] / a, w2[inside] / a
            sw = swap[t]
            # undo the orientation swap so b1/b2 refer to the original vertices 1/2
            b1, b2 = np.where(sw, b2, b1), np.where(sw, b1, b2)
            yield t, py * width + px, b0, b1, b2
        start = stop


def rasterize(meshes, camera: Camera, config) -> FrameSet:
    """Render labeled meshes with the scene's sun, fog and sky.

    ``config`` is a :class:`~fieldforge.scene.SceneConfig` (only its lighting,
    weather and scene id are read).
    """
    mesh = meshes if isinstance(meshes, LabeledMesh) else merge_meshes(list(meshes))
    w, h = camera.width, camera.height
    sky = np.asarray(config.sky_color, dtype=float)

    rgb = np.broadcast_to(quantize(sky), (h, w, 3)).copy()
    label = np.zeros((h, w), dtype=np.uint16)
    depth = np.full((h, w), np.inf, dtype=np.float32)
    if mesh.n_triangles == 0:
        return FrameSet(rgb, label, depth, scene_id=config.scene_id)

    xy, z = camera.project_points(mesh.vertices)
    tri_z = z[mesh.triangles]
    keep = (tri_z > NEAR_PLANE).all(axis=1)
    tris = mesh.triangles[keep]
    tri_ids = np.nonzero(keep)[0]
    centroid = mesh.vertices[tris].mean(axis=1)

    best_pix, best_tri, best_b, best_z = [], [], [], []
    for t, pix, b0, b1, b2 in _fragments(xy, z, tris, w, h):
        inv_z = b0 / z[tris[t, 0]] + b1 / z[tris[t, 1]] + b2 / z[tris[t, 2]]
        fz = 1.0 / inv_z
        best_pix.append(pix)
        best_tri.append(t)
        best_b.append(np.stack([b0, b1, b2], 1))
        best_z.append(fz)
    if not best_pix:
        return FrameSet(rgb, label, depth, scene_id=config.scene_id)
    pix = np.concatenate(best_pix)
    t = np.concatenate(best_tri)
    bary = np.concatenate(best_b)
    fz = np.concatenate(best_z)

    orig = tri_ids[t]
    order = np.lexsort((
        centroid[t, 2], centroid[t, 1], centroid[t, 0],
        mesh.tri_organ[orig], mesh.tri_class[orig], mesh.tri_plant[orig],
        fz, pix,
    ))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    wp, wt, wb, wz = pix[win], t[win], bary[win], fz[win]
    wo = tri_ids[wt]
    vidx = tris[wt]  # (N, 3)

    # perspective-correct normal interpolation
    pw = wb / z[vidx]
    pw /= pw.sum(axis=1, keepdims=True)
    normals = np.einsum("nk,nkc->nc", pw, mesh.normals[vidx])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    rays = camera.pixel_rays().reshape(-1, 3)[wp]
    points = camera.position + wz[:, None] * rays
    flip = np.einsum("ij,ij->i", normals, points - camera.position) > 0
    normals[flip] *= -1.0  # surfaces are two-sided

    sun = sun_direction(config.sun_azimuth, config.sun_elevation)
    shadowed = shadow_mask(points, sun, mesh.vertices[mesh.triangles])

    cls = mesh.tri_class[wo]
    plant = mesh.tri_plant[wo]
    albedo = np.where((cls == CLASS_LEAF)[:, None], ALBEDO[CLASS_LEAF], ALBEDO[CLASS_STEM])
    tints = {int(p): plant_tint(config.scene_id, int(p)) for p in np.unique(plant)}
    albedo = albedo * np.array([tints[int(p)] for p in plant])[:, None]

    depth_m = wz / 100.0
    colors = shade_linear(normals, albedo, sun, config.ambient_factor, config.fog_density, sky, shadowed, depth_m)

    rgb.reshape(-1, 3)[wp] = quantize(colors)
    label.reshape(-1)[wp] = (cls * LABEL_CLASS_STRIDE + plant).astype(np.uint16)
    depth.reshape(-1)[wp] = depth_m.astype(np.float32)
    return FrameSet(rgb, label, depth, scene_id=config.scene_id)
