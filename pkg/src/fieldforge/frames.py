"""The FrameSet payload and its on-disk image formats (PPM, 16-bit PGM, DPTH)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

LABEL_CLASS_STRIDE = 4096
DEPTH_MAGIC = b"DPTH"


@dataclass
class FrameSet:
    """Paired RGB / label / depth planes of one rendered frame.

    Any plane may be ``None`` for frames decoded from a partial channel mask.
    """

    rgb: Optional[np.ndarray]  # (H, W, 3) uint8
    label: Optional[np.ndarray]  # (H, W) uint16
    depth: Optional[np.ndarray]  # (H, W) float32, meters, +inf = background
    scene_id: int = 0
    frame_id: int = 0
    sim_time: float = 0.0

    @property
    def shape(self) -> tuple:
        for plane in (self.rgb, self.label, self.depth):
            if plane is not None:
                return plane.shape[:2]
        raise ValueError("frame has no channels")

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def organ_classes(self) -> np.ndarray:
        return (self.label // LABEL_CLASS_STRIDE).astype(np.int64)

    def plant_ids(self) -> np.ndarray:
        return (self.label % LABEL_CLASS_STRIDE).astype(np.int64)

    def save(self, prefix) -> None:
        prefix = str(prefix)
        write_ppm(prefix + ".ppm", self.rgb)
        write_pgm16(prefix + ".pgm", self.label)
        write_depth(prefix + ".dpth", self.depth)

    @classmethod
    def load(cls, prefix, scene_id: int = 0, frame_id: int = 0, sim_time: float = 0.0) -> "FrameSet":
        prefix = str(prefix)
        return cls(
            rgb=read_ppm(prefix + ".ppm"),
            label=read_pgm(prefix + ".pgm"),
            depth=read_depth(prefix + ".dpth"),
            scene_id=scene_id,
            frame_id=frame_id,
            sim_time=sim_time,
        )

    def equals(self, other: "FrameSet") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (
            same(self.rgb, other.rgb)
            and same(self.label, other.label)
            and same(self.depth, other.depth)
            and (self.scene_id, self.frame_id) == (other.scene_id, other.frame_id)
        )


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    h, w = values.shape
    body = np.ascontiguousarray(values, dtype=">u2").tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + body)


def write_pgm8(path, values: np.ndarray) -> None:
    h, w = values.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(values, dtype=np.uint8).tobytes())


def _read_pnm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, w, h, maxval, data[pos:]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_pnm(path)
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: unsupported PPM variant")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_pnm(path)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)
    return arr.astype(np.uint16 if maxval >= 256 else np.uint8)


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<III", w, h, 0)
    Path(path).write_bytes(header + np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic")
    w, h, _ = struct.unpack("<III", data[4:16])
    return np.frombuffer(data[16:], dtype="<f4", count=w * h).reshape(h, w).astype(np.float32)
