"""Per-pixel segmentation network and synchronous gradient averaging.

The model is conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1 -> softmax with
hand-written backpropagation. Parameters live in one flat float64 vector;
the layout is ``W1 (h, 3, 3, 3), b1 (h), W2 (h, h, 3, 3), b2 (h), W3 (C, h),
b3 (C)`` with every weight tensor in row-major (out, in, ky, kx) order.

Training is data parallel: a coordinator broadcasts parameters, every
worker answers with the gradient of its own minibatch, and the coordinator
applies the sample-weighted mean.
"""

from __future__ import annotations

import math
import socket
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frames import LABEL_CLASS_STRIDE, FrameSet
from .rng import Stream
from .stream import MAGIC, format_endpoint, parse_endpoint

N_CLASSES = 3
HIDDEN = 8
PARAMS_MAGIC = b"FFPARAMS"


@dataclass(frozen=True)
class ModelShape:
    hidden: int = HIDDEN
    classes: int = N_CLASSES
    in_channels: int = 3

    def layer_shapes(self) -> list[tuple]:
        h, c, i = self.hidden, self.classes, self.in_channels
        return [(h, i, 3, 3), (h,), (h, h, 3, 3), (h,), (c, h), (c,)]

    @property
    def size(self) -> int:
        return sum(math.prod(s) for s in self.layer_shapes())

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {flat.shape}")
        out, off = [], 0
        for s in self.layer_shapes():
            n = math.prod(s)
            out.append(flat[off : off + n].reshape(s))
            off += n
        return out


DEFAULT_SHAPE = ModelShape()


def init_params(seed: int, shape: ModelShape = DEFAULT_SHAPE) -> np.ndarray:
    """Glorot-uniform weights (one stream per tensor), zero biases."""
    parts = []
    for index, s in enumerate(shape.layer_shapes()):
        n = math.prod(s)
        if len(s) == 1:
            parts.append(np.zeros(n))
            continue
        receptive = math.prod(s[2:]) if len(s) > 2 else 1
        fan_in, fan_out = s[1] * receptive, s[0] * receptive
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        rng = Stream.derived(seed, [index])
        parts.append(np.array([rng.uniform_range(-bound, bound) for _ in range(n)]))
    return np.concatenate(parts)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H*W, C*9) zero-padded 3x3 neighbourhoods, ordered (c, ky, kx)."""
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    return win.reshape(h * w, c * 9)


def _col2im(dcols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    d = dcols.reshape(h, w, c, 3, 3)
    dxp = np.zeros((h + 2, w + 2, c))
    for ky in range(3):
        for kx in range(3):
            dxp[ky : ky + h, kx : kx + w, :] += d[:, :, :, ky, kx]
    return dxp[1:-1, 1:-1, :]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cache(params, image, shape: ModelShape):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != shape.in_channels:
        raise ValueError(f"image must be (H, W, {shape.in_channels}), got {image.shape}")
    h, w, _ = image.shape
    if h < 3 or w < 3:
        raise ValueError("image must be at least 3x3")
    w1, b1, w2, b2, w3, b3 = shape.unflatten(params)
    cols1 = _im2col(image)
    z1 = cols1 @ w1.reshape(shape.hidden, -1).T + b1
    a1 = np.maximum(z1, 0.0)
    cols2 = _im2col(a1.reshape(h, w, shape.hidden))
    z2 = cols2 @ w2.reshape(shape.hidden, -1).T + b2
    a2 = np.maximum(z2, 0.0)
    logits = a2 @ w3.T + b3
    return (cols1, z1, cols2, z2, a2, logits), (h, w)


def logits(params, image, shape: ModelShape = DEFAULT_SHAPE) -> np.ndarray:
    cache, (h, w) = _forward_cache(params, image, shape)
    return cache[-1].reshape(h, w, shape.classes)


def forward(params, image, shape: ModelShape = DEFAULT_SHAPE) -> np.ndarray:
    """Per-pixel class probabilities, shape (H, W, C)."""
    return _softmax(logits(params, image, shape))


def predict(params, image, shape: ModelShape = DEFAULT_SHAPE) -> np.ndarray:
    return forward(params, image, shape).argmax(axis=-1)


@dataclass
class Minibatch:
    images: list
    targets: list

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ValueError("images and targets are not aligned")

    @property
    def pixel_count(self) -> int:
        return int(sum(t.size for t in self.targets))

    @classmethod
    def from_frames(cls, frames: Sequence[FrameSet]) -> "Minibatch":
        return cls(
            images=[frame_image(f) for f in frames],
            targets=[(f.label // LABEL_CLASS_STRIDE).astype(np.int64) for f in frames],
        )


def frame_image(frame: FrameSet) -> np.ndarray:
    return frame.rgb.astype(np.float64) / 255.0


def _image_loss_grad(params, image, target, shape: ModelShape):
    """Summed cross-entropy and summed gradient over one image's pixels."""
    (cols1, z1, cols2, z2, a2, lg), (h, w) = _forward_cache(params, image, shape)
    _, _, w2, _, w3, _ = shape.unflatten(params)
    t = np.asarray(target).reshape(-1)
    if t.shape[0] != h * w or t.min() < 0 or t.max() >= shape.classes:
        raise ValueError("target does not match the image or holds an invalid class")
    shifted = lg - lg.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp_t = shifted[np.arange(t.size), t] - logsum
    loss_sum = float(-logp_t.sum())

    dlogits = np.exp(shifted - logsum[:, None])
    dlogits[np.arange(t.size), t] -= 1.0
    g_w3 = dlogits.T @ a2
    g_b3 = dlogits.sum(axis=0)
    dz2 = (dlogits @ w3) * (z2 > 0)
    g_w2 = dz2.T @ cols2
    g_b2 = dz2.sum(axis=0)
    da1 = _col2im(dz2 @ w2.reshape(shape.hidden, -1), h, w, shape.hidden).reshape(h * w, shape.hidden)
    dz1 = da1 * (z1 > 0)
    g_w1 = dz1.T @ cols1
    g_b1 = dz1.sum(axis=0)
    grad = np.concatenate([g.reshape(-1) for g in (g_w1, g_b1, g_w2, g_b2, g_w3, g_b3)])
    return loss_sum, grad


def loss_and_gradient(params, batch: Minibatch, shape: ModelShape = DEFAULT_SHAPE):
    """Mean per-pixel cross-entropy over the batch, its gradient, and the pixel count."""
    total_loss = 0.0
    total_grad = np.zeros(shape.size)
    count = 0
    for image, target in zip(batch.images, batch.targets):
        l, g = _image_loss_grad(params, image, target, shape)
        total_loss += l
        total_grad += g
        count += np.asarray(target).size
    if count == 0:
        raise ValueError("empty minibatch")
    return total_loss / count, total_grad / count, count


def loss_only(params, batch: Minibatch, shape: ModelShape = DEFAULT_SHAPE) -> float:
    total, count = 0.0, 0
    for image, target in zip(batch.images, batch.targets):
        lg = logits(params, image, shape).reshape(-1, shape.classes)
        t = np.asarray(target).reshape(-1)
        shifted = lg - lg.max(axis=1, keepdims=True)
        total += float(-(shifted[np.arange(t.size), t] - np.log(np.exp(shifted).sum(axis=1))).sum())
        count += t.size
    return total / count


@dataclass
class GradientMsg:
    step: int
    worker_id: int
    sample_count: int
    gradient: np.ndarray
    loss: float = 0.0

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be > 0")


def average_gradients(msgs: Sequence[GradientMsg]) -> np.ndarray:
    """Sample-count-weighted mean, summed in worker-id order."""
    if not msgs:
        raise ValueError("no gradient messages")
    steps = {m.step for m in msgs}
    if len(steps) != 1:
        raise ValueError(f"messages from mixed steps {sorted(steps)}")
    lengths = {len(m.gradient) for m in msgs}
    if len(lengths) != 1:
        raise ValueError(f"mismatched gradient lengths {sorted(lengths)}")
    if len(msgs) == 1:
        return np.array(msgs[0].gradient, dtype=np.float64)
    ordered = sorted(msgs, key=lambda m: m.worker_id)
    total = np.zeros(lengths.pop())
    n = 0
    for m in ordered:
        total += m.sample_count * np.asarray(m.gradient, dtype=np.float64)
        n += m.sample_count
    return total / n


def weighted_loss(msgs: Sequence[GradientMsg]) -> float:
    ordered = sorted(msgs, key=lambda m: m.worker_id)
    return sum(m.sample_count * m.loss for m in ordered) / sum(m.sample_count for m in ordered)


def sgd_step(params, gradient, learning_rate: float) -> np.ndarray:
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    return np.asarray(params, dtype=np.float64) - learning_rate * np.asarray(gradient, dtype=np.float64)


def cyclic_batches(n_frames: int, batch_size: int):
    """Indices of successive minibatches drawn cyclically from a frame queue."""
    cursor = 0
    while True:
        yield [(cursor + k) % n_frames for k in range(batch_size)]
        cursor = (cursor + batch_size) % n_frames


def train_local(frames: Sequence[FrameSet], batch_size: int, steps: int, lr: float, init_seed: int,
                shape: ModelShape = DEFAULT_SHAPE, params: Optional[np.ndarray] = None):
    """Single-process reference loop; returns (params, loss history)."""
    params = init_params(init_seed, shape) if params is None else np.array(params, dtype=np.float64)
    batches = [Minibatch.from_frames([f]) for f in frames]
    history = []
    picker = cyclic_batches(len(frames), batch_size)
    for _ in range(steps):
        idx = next(picker)
        batch = Minibatch([batches[i].images[0] for i in idx], [batches[i].targets[0] for i in idx])
        loss, grad, _ = loss_and_gradient(params, batch, shape)
        history.append(loss)
        params = sgd_step(params, grad, lr)
    return params, history


def save_params(path, params: np.ndarray) -> None:
    params = np.asarray(params, dtype="<f8")
    Path(path).write_bytes(PARAMS_MAGIC + struct.pack("<I", params.size) + params.tobytes())


def load_params(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a params file")
    (count,) = struct.unpack("<I", data[8:12])
    return np.frombuffer(data[12:], dtype="<f8", count=count).astype(np.float64)


# ---------------------------------------------------------------- wire protocol
#
# Every message: tag u8, step u32, count u32, then a tag-specific body.
#   'H' hello    body: worker_id u32                          (count = 0)
#   'P' params   body: count x f64
#   'G' gradient body: worker_id u32, sample_count u64, loss f64, count x f64
#   'D' done     body: empty                                  (count = 0)

TAG_HELLO, TAG_PARAMS, TAG_GRADIENT, TAG_DONE = b"H", b"P", b"G", b"D"
MSG_HEAD = struct.Struct("<cII")
GRAD_EXTRA = struct.Struct("<IQd")
HELLO_EXTRA = struct.Struct("<I")


class TrainingProtocolError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, loss_history: list, params: np.ndarray):
        super().__init__(message)
        self.loss_history = loss_history
        self.params = params


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


class Channel:
    """A socket with per-tag byte accounting."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0
        self.by_tag: dict[str, int] = {}
        self.signature_hits = 0  # occurrences of the frame magic in any message

    def _account(self, tag: bytes, raw: bytes, sent: bool):
        if sent:
            self.bytes_sent += len(raw)
        else:
            self.bytes_received += len(raw)
        key = tag.decode()
        self.by_tag[key] = self.by_tag.get(key, 0) + len(raw)
        self.signature_hits += raw.count(MAGIC)

    def send(self, tag: bytes, step: int, vector: Optional[np.ndarray] = None, extra: bytes = b"") -> None:
        vec = b"" if vector is None else np.asarray(vector, dtype="<f8").tobytes()
        count = 0 if vector is None else len(vector)
        raw = MSG_HEAD.pack(tag, step, count) + extra + vec
        self.sock.sendall(raw)
        self._account(tag, raw, sent=True)

    def recv(self):
        head = _recv_exact(self.sock, MSG_HEAD.size)
        tag, step, count = MSG_HEAD.unpack(head)
        if tag == TAG_HELLO:
            extra = _recv_exact(self.sock, HELLO_EXTRA.size)
            body = (HELLO_EXTRA.unpack(extra)[0],)
            vec_raw = b""
        elif tag == TAG_GRADIENT:
            extra = _recv_exact(self.sock, GRAD_EXTRA.size)
            body = GRAD_EXTRA.unpack(extra)
            vec_raw = _recv_exact(self.sock, 8 * count)
        elif tag == TAG_PARAMS:
            extra, body = b"", ()
            vec_raw = _recv_exact(self.sock, 8 * count)
        elif tag == TAG_DONE:
            extra, body, vec_raw = b"", (), b""
        else:
            raise TrainingProtocolError(f"unknown message tag {tag!r}")
        if tag in (TAG_HELLO, TAG_DONE) and count:
            raise TrainingProtocolError(f"{tag!r} message must not carry a vector")
        self._account(tag, head + extra + vec_raw, sent=False)
        vec = np.frombuffer(vec_raw, dtype="<f8").astype(np.float64) if vec_raw else None
        return tag, step, body, vec

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def message_size(tag: bytes, count: int = 0) -> int:
    extra = {TAG_HELLO: HELLO_EXTRA.size, TAG_GRADIENT: GRAD_EXTRA.size}.get(tag, 0)
    return MSG_HEAD.size + extra + 8 * count


@dataclass
class TrainResult:
    params: np.ndarray
    loss_history: list
    channels: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @property
    def bytes_total(self) -> int:
        return sum(c.bytes_sent + c.bytes_received for c in self.channels)


class Coordinator:
    """Synchronous barrier coordinator; bind first, then :meth:`run`."""

    def __init__(self, bind: str, workers: int, steps: int, lr: float, init_seed: int,
                 shape: ModelShape = DEFAULT_SHAPE, keep_trajectory: bool = False, timeout: float = 300.0):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.steps = steps
        self.lr = lr
        self.init_seed = init_seed
        self.shape = shape
        self.keep_trajectory = keep_trajectory
        self.timeout = timeout
        self._listener = socket.create_server(parse_endpoint(bind, allow_ephemeral=True))
        self._listener.settimeout(timeout)
        self.address = format_endpoint(self._listener.getsockname()[:2])

    def close(self) -> None:
        """Drop the listener without training (used when a run aborts early)."""
        try:
            self._listener.close()
        except OSError:
            pass

    def _accept_workers(self) -> list[tuple[int, Channel]]:
        joined = []
        try:
            while len(joined) < self.workers:
                sock, _ = self._listener.accept()
                sock.settimeout(self.timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                ch = Channel(sock)
                tag, _, body, _ = ch.recv()
                if tag != TAG_HELLO:
                    raise TrainingProtocolError(f"expected hello, got {tag!r}")
                joined.append((body[0], ch))
        finally:
            self._listener.close()
        ids = [wid for wid, _ in joined]
        if len(set(ids)) != len(ids):
            raise TrainingProtocolError(f"duplicate worker ids {sorted(ids)}")
        return sorted(joined, key=lambda p: p[0])

    def run(self) -> TrainResult:
        params = init_params(self.init_seed, self.shape)
        result = TrainResult(params, [])
        if self.keep_trajectory:
            result.trajectory.append(params.copy())
        peers = self._accept_workers()
        result.channels = [ch for _, ch in peers]
        try:
            for step in range(self.steps):
                for _, ch in peers:
                    ch.send(TAG_PARAMS, step, params)
                msgs = []
                for wid, ch in peers:
                    try:
                        tag, got_step, body, vec = ch.recv()
                    except (ConnectionError, OSError) as exc:
                        raise TrainingAborted(f"worker {wid} lost during step {step}: {exc}",
                                              result.loss_history, params) from exc
                    if tag != TAG_GRADIENT or got_step != step:
                        raise TrainingProtocolError(f"worker {wid}: expected gradient for step {step}")
                    worker_id, sample_count, loss = body
                    msgs.append(GradientMsg(got_step, worker_id, sample_count, vec, loss))
                grad = average_gradients(msgs)
                result.loss_history.append(weighted_loss(msgs))
                params = sgd_step(params, grad, self.lr)
                if self.keep_trajectory:
                    result.trajectory.append(params.copy())
            for _, ch in peers:
                ch.send(TAG_DONE, self.steps)
        finally:
            for _, ch in peers:
                ch.close()
        result.params = params
        return result


def run_coordinator(bind: str, workers: int, steps: int, lr: float, init_seed: int, **kwargs) -> TrainResult:
    return Coordinator(bind, workers, steps, lr, init_seed, **kwargs).run()


def run_worker(coordinator: str, frames: Sequence[FrameSet], batch_size: int, worker_id: int = 0,
               shape: ModelShape = DEFAULT_SHAPE, timeout: float = 300.0, channel_out: Optional[list] = None) -> int:
    """Answer parameter broadcasts with minibatch gradients until told to stop."""
    if not frames:
        raise ValueError("worker needs a non-empty frame source")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images = [frame_image(f) for f in frames]
    targets = [(f.label // LABEL_CLASS_STRIDE).astype(np.int64) for f in frames]
    picker = cyclic_batches(len(frames), batch_size)

    sock = socket.create_connection(parse_endpoint(coordinator), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    ch = Channel(sock)
    if channel_out is not None:
        channel_out.append(ch)
    steps_done = 0
    try:
        ch.send(TAG_HELLO, 0, extra=HELLO_EXTRA.pack(worker_id))
        while True:
            tag, step, _, vec = ch.recv()
            if tag == TAG_DONE:
                return steps_done
            if tag != TAG_PARAMS or vec is None or len(vec) != shape.size:
                raise TrainingProtocolError(f"worker {worker_id}: unexpected message {tag!r} at step {step}")
            idx = next(picker)
            batch = Minibatch([images[i] for i in idx], [targets[i] for i in idx])
            loss, grad, count = loss_and_gradient(vec, batch, shape)
            ch.send(TAG_GRADIENT, step, grad, extra=GRAD_EXTRA.pack(worker_id, count, loss))
            steps_done += 1
    finally:
        ch.close()
