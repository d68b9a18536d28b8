"""Event files, framing, synthetic generators and small image sets."""

from __future__ import annotations

import csv
import io
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "EVENT_DTYPE",
    "EventStream",
    "EventFormatError",
    "FrameSpec",
    "load_events",
    "save_events",
    "frame_events",
    "frame_dataset",
    "take_first_frames",
    "SyntheticParams",
    "gen_synthetic",
    "images_to_events",
    "load_images_idx",
    "save_images_idx",
    "downsample",
    "load_digits",
    "minibatches",
    "StaticSet",
    "FrameSet",
    "ReframedSet",
]

EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<i4"), ("y", "<i4"), ("p", "<i1")])
_PACKED_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
_PACKED_MAGIC = b"EVS1"


class EventFormatError(ValueError):
    pass


@dataclass
class EventStream:
    events: np.ndarray  # EVENT_DTYPE, sorted by tick
    height: int | None = None
    width: int | None = None

    def __len__(self) -> int:
        return len(self.events)

    @property
    def t(self) -> np.ndarray:
        return self.events["t"]

    @classmethod
    def from_arrays(cls, t, x, y, p, height=None, width=None, sort: bool = True) -> EventStream:
        ev = np.empty(len(t), dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        if sort:
            ev = ev[np.argsort(ev["t"], kind="stable")]
        return cls(ev, height, width)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.events["t"]) >= 0))


def _validate(ev: np.ndarray, where: Sequence[str]) -> None:
    bad = np.flatnonzero((ev["p"] != 0) & (ev["p"] != 1))
    if bad.size:
        i = int(bad[0])
        raise EventFormatError(f"{where[i]}: polarity {int(ev['p'][i])} is not 0 or 1")
    bad = np.flatnonzero((ev["t"] < 0) | (ev["x"] < 0) | (ev["y"] < 0))
    if bad.size:
        raise EventFormatError(f"{where[int(bad[0])]}: negative field")


def load_events(path: str | Path, format: str | None = None) -> EventStream:
    """Read ``csv`` (header ``t,x,y,p``) or ``packed`` (``EVS1``) event files."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "packed")
    if fmt == "csv":
        rows, where = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "x", "y", "p"]:
                raise EventFormatError(f"{path}:1: expected header 't,x,y,p', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    if len(row) != 4:
                        raise ValueError(f"expected 4 fields, got {len(row)}")
                    rows.append(tuple(int(v) for v in row))
                except ValueError as exc:
                    raise EventFormatError(f"{path}:{lineno}: malformed record {row!r} ({exc})") from None
                where.append(f"{path}:{lineno}")
        ev = np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, EVENT_DTYPE)
    elif fmt == "packed":
        raw = path.read_bytes()
        if raw[:4] != _PACKED_MAGIC:
            raise EventFormatError(f"{path}: bad magic {raw[:4]!r}")
        (count,) = struct.unpack_from("<I", raw, 4)
        need = 8 + count * _PACKED_DTYPE.itemsize
        if len(raw) != need:
            raise EventFormatError(f"{path}: expected {need} bytes for {count} records, found {len(raw)}")
        packed = np.frombuffer(raw, dtype=_PACKED_DTYPE, count=count, offset=8)
        ev = np.empty(count, dtype=EVENT_DTYPE)
        for name in ("t", "x", "y", "p"):
            ev[name] = packed[name]
        where = [f"{path}: record {i}" for i in range(count)]
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    _validate(ev, where)
    order = np.argsort(ev["t"], kind="stable")
    return EventStream(ev[order])


def save_events(stream: EventStream, path: str | Path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "packed")
    ev = stream.events
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("t,x,y,p\n")
        for t, x, y, p in zip(ev["t"].tolist(), ev["x"].tolist(), ev["y"].tolist(), ev["p"].tolist()):
            buf.write(f"{t},{x},{y},{p}\n")
        path.write_text(buf.getvalue(), encoding="utf-8")
    elif fmt == "packed":
        if len(ev) and (ev["t"].max() > 0xFFFFFFFF or max(ev["x"].max(), ev["y"].max()) > 0xFFFF):
            raise EventFormatError("event fields exceed the packed record widths")
        packed = np.empty(len(ev), dtype=_PACKED_DTYPE)
        for name in ("t", "x", "y", "p"):
            packed[name] = ev[name]
        path.write_bytes(_PACKED_MAGIC + struct.pack("<I", len(ev)) + packed.tobytes())
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    return path


@dataclass(frozen=True)
class FrameSpec:
    T: int
    height: int
    width: int
    channels: int = 2
    t_start: int | None = None  # default: first tick
    t_stop: int | None = None  # exclusive; default: last tick + 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")


def frame_events(stream: EventStream, spec: FrameSpec) -> np.ndarray:
    """Count events into ``T`` equal-duration bins: (T, channels, H, W).

    Bins are half-open except the last, which also takes ``t_stop`` itself.
    """
    out = np.zeros((spec.T, spec.channels, spec.height, spec.width))
    ev = stream.events
    if len(ev) == 0:
        warnings.warn("framing an empty event stream", RuntimeWarning, stacklevel=2)
        return out
    t0 = int(ev["t"][0]) if spec.t_start is None else spec.t_start
    t1 = int(ev["t"][-1]) + 1 if spec.t_stop is None else spec.t_stop
    span = max(t1 - t0, 1)
    ticks = ev["t"].astype(np.int64)
    inside = (ticks >= t0) & (ticks <= t1)
    if not inside.all():
        warnings.warn(f"{int((~inside).sum())} events fall outside the framing window", RuntimeWarning, stacklevel=2)
    ev = ev[inside]
    ticks = ticks[inside]
    if np.any((ev["x"] >= spec.width) | (ev["y"] >= spec.height) | (ev["p"] >= spec.channels)):
        raise ValueError("event coordinates exceed the frame geometry")
    bins = np.minimum((ticks - t0) * spec.T // span, spec.T - 1)
    np.add.at(out, (bins, ev["p"].astype(np.int64), ev["y"], ev["x"]), 1.0)
    return out


def frame_dataset(streams: Sequence[EventStream], T: int, height: int, width: int,
                  t_start: int | None = None, t_stop: int | None = None) -> np.ndarray:
    """Frame every stream; returns (T, N, 2, H, W)."""
    spec = FrameSpec(T, height, width, 2, t_start, t_stop)
    frames = [frame_events(s, spec) for s in streams]
    return np.stack(frames, axis=1)


def take_first_frames(x: np.ndarray, t: int) -> np.ndarray:
    if not 1 <= t <= len(x):
        raise ValueError(f"cannot take {t} of {len(x)} frames")
    return x[:t]


@dataclass(frozen=True)
class SyntheticParams:
    n_samples: int = 200
    height: int = 16
    width: int = 16
    duration: int = 10_000
    rate: float = 2e-3  # events / pixel / tick inside active regions
    noise_rate: float = 2e-4  # events / pixel / tick everywhere
    bar_width: int = 3
    n_classes: int = 2


def _poisson_events(rng, rates: np.ndarray, duration: int):
    """Homogeneous Poisson events for a (2, H, W) per-tick rate map."""
    counts = rng.poisson(rates * duration)
    p, y, x = np.nonzero(counts)
    reps = counts[p, y, x]
    p, y, x = np.repeat(p, reps), np.repeat(y, reps), np.repeat(x, reps)
    t = rng.integers(0, duration, size=len(p))
    return t, x, y, p


def gen_synthetic(kind: str, params: SyntheticParams, rng: np.random.Generator) -> list[tuple[EventStream, int]]:
    """Labelled desk-scale event streams.

    ``poisson_twoclass``: each class lights a disjoint pixel region (left or
    right half, both polarities) over uniform background noise.
    ``moving_bar``: a vertical bar sweeps left-to-right (label 0) or
    right-to-left (label 1); ON events while a pixel is entered, OFF while it
    is left.
    """
    if params.rate <= 0:
        raise ValueError("rate must be positive")
    if params.noise_rate < 0:
        raise ValueError("noise rate must be non-negative")
    H, W, D = params.height, params.width, params.duration
    out = []
    for i in range(params.n_samples):
        label = int(i % 2)
        if kind == "poisson_twoclass":
            rates = np.full((2, H, W), params.noise_rate)
            half = W // 2
            cols = slice(0, half) if label == 0 else slice(half, W)
            rates[:, :, cols] += params.rate
            t, x, y, p = _poisson_events(rng, rates, D)
        elif kind == "moving_bar":
            t, x, y, p = _moving_bar(rng, params, label)
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        out.append((EventStream.from_arrays(t, x, y, p, H, W), label))
    return out


def images_to_events(images: np.ndarray, params: SyntheticParams, rng: np.random.Generator) -> list[EventStream]:
    """Poisson event streams whose per-pixel rate follows image intensity.

    ``images`` is (N, 1, H, W) or (N, H, W) in [0, 1]; a pixel of intensity
    ``a`` fires at ``params.rate * a`` per tick, split evenly over both
    polarities, on top of ``params.noise_rate`` background events.
    """
    if params.rate <= 0:
        raise ValueError("rate must be positive")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        images = images[:, 0]
    n, H, W = images.shape
    out = []
    for img in images:
        rates = np.repeat(img[None] * params.rate / 2, 2, axis=0) + params.noise_rate
        t, x, y, p = _poisson_events(rng, rates, params.duration)
        out.append(EventStream.from_arrays(t, x, y, p, H, W))
    return out


def _moving_bar(rng, params: SyntheticParams, label: int):
    H, W, D, bw = params.height, params.width, params.duration, params.bar_width
    dwell = D / (W + bw)
    ts, xs, ys, ps = [], [], [], []
    for col in range(W):
        pos = col if label == 0 else W - 1 - col
        start = pos * dwell
        for pol, offset in ((1, 0.0), (0, bw * dwell / 2)):
            lam = params.rate * bw * dwell / 2
            n = rng.poisson(lam * H)
            ts.append((start + offset + rng.uniform(0, bw * dwell / 2, n)).astype(np.int64))
            xs.append(np.full(n, col))
            ys.append(rng.integers(0, H, n))
            ps.append(np.full(n, pol))
    noise = _poisson_events(rng, np.full((2, H, W), params.noise_rate), D)
    t = np.concatenate(ts + [noise[0]])
    x = np.concatenate(xs + [noise[1]])
    y = np.concatenate(ys + [noise[2]])
    p = np.concatenate(ps + [noise[3]])
    return np.clip(t, 0, D - 1), x, y, p


# ---------------------------------------------------------------------------
# static images

_IDX_UBYTE_3D = 0x00000803
_IDX_UBYTE_1D = 0x00000801


def load_images_idx(path: str | Path, labels_path: str | Path | None = None):
    """Read an idx3-ubyte image file (and optional idx1 labels); values scaled to [0, 1].

    Returns ``(images[N, 1, H, W], labels or None)``.
    """
    raw = Path(path).read_bytes()
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != _IDX_UBYTE_3D:
        raise ValueError(f"{path}: magic {magic:#010x} is not an idx3 ubyte image file")
    images = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, 1, h, w) / 255.0
    labels = None
    if labels_path is not None:
        lraw = Path(labels_path).read_bytes()
        lmagic, ln = struct.unpack_from(">II", lraw, 0)
        if lmagic != _IDX_UBYTE_1D:
            raise ValueError(f"{labels_path}: magic {lmagic:#010x} is not an idx1 ubyte label file")
        if ln != n:
            raise ValueError(f"{labels_path}: {ln} labels for {n} images")
        labels = np.frombuffer(lraw, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    return images, labels


def save_images_idx(images: np.ndarray, path: str | Path, labels: np.ndarray | None = None,
                    labels_path: str | Path | None = None) -> None:
    imgs = np.asarray(images)
    imgs = imgs.reshape(imgs.shape[0], imgs.shape[-2], imgs.shape[-1])
    data = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", _IDX_UBYTE_3D, *data.shape) + data.tobytes())
    if labels is not None and labels_path is not None:
        lab = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", _IDX_UBYTE_1D, len(lab)) + lab.tobytes())


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool the two trailing axes by ``factor``."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return images.copy()
    *lead, h, w = images.shape
    h2, w2 = h // factor, w // factor
    trimmed = images[..., : h2 * factor, : w2 * factor]
    return trimmed.reshape(*lead, h2, factor, w2, factor).mean(axis=(-3, -1))


def load_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 8x8 handwritten digits bundled with scikit-learn: (N, 1, 8, 8) in [0, 1]."""
    from sklearn.datasets import load_digits as _load

    d = _load()
    return (d.images / 16.0).reshape(-1, 1, 8, 8), d.target.astype(np.int64)


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None = None,
                drop_last: bool = False) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# model-facing views: ``encode(idx, t)`` yields the (t, len(idx), ...) input


@dataclass
class StaticSet:
    """Images fed as constant input current on every step."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, idx: np.ndarray, t: int) -> np.ndarray:
        if t < 1:
            raise ValueError("t must be >= 1")
        batch = self.images[idx]
        return np.broadcast_to(batch, (t, *batch.shape)).copy()

    def subset(self, idx: np.ndarray) -> StaticSet:
        return StaticSet(self.images[idx], self.labels[idx])


@dataclass
class FrameSet:
    """Event data framed once at ``T_max``; a t-step stage sees the first ``t`` frames."""

    frames: np.ndarray  # (T_max, N, ...)
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, idx: np.ndarray, t: int) -> np.ndarray:
        return take_first_frames(self.frames, t)[:, idx]

    def subset(self, idx: np.ndarray) -> FrameSet:
        return FrameSet(self.frames[:, idx], self.labels[idx])


@dataclass
class ReframedSet:
    """Event data framed separately for each step count, always over the full span."""

    streams: list
    labels: np.ndarray
    height: int
    width: int
    t_stop: int | None = None
    _cache: dict | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def frames(self, t: int) -> np.ndarray:
        if self._cache is None:
            self._cache = {}
        if t not in self._cache:
            self._cache[t] = frame_dataset(self.streams, t, self.height, self.width, 0, self.t_stop)
        return self._cache[t]

    def encode(self, idx: np.ndarray, t: int) -> np.ndarray:
        return self.frames(t)[:, idx]

    def subset(self, idx: np.ndarray) -> ReframedSet:
        return ReframedSet([self.streams[i] for i in idx], self.labels[idx], self.height, self.width, self.t_stop)
