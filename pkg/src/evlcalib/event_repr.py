"""Event streams and their dense representations over an accumulation window.

Events are binned into one of three grids, all normalized to [0, 1]:

* event frame      per-pixel counts, H x W
* voxel grid       per-pixel counts in B equal temporal bins, B x H x W
* time surface     normalized recency of the last event per pixel, H x W
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError, OutOfBoundsError, UnsortedStreamError

EVENT_MAGIC = b"EVL1"
_HEADER = struct.Struct("<4sIII")
EVENT_DTYPE = np.dtype([("t_us", "<u8"), ("x", "<u2"), ("y", "<u2"),
                        ("polarity", "i1"), ("pad", "V3")])
ABLATION_DURATIONS_US = (30_000, 50_000, 80_000)
DEFAULT_VOXEL_BINS = 5
NORM_PERCENTILE = 99.0


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor size must be positive, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class AccumulationWindow:
    """Half-open interval (t_end_us - duration_us, t_end_us]."""

    t_end_us: int
    duration_us: int = 50_000

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValueError(f"duration_us must be > 0, got {self.duration_us}")

    @property
    def t_start_us(self) -> int:
        return self.t_end_us - self.duration_us


@dataclass(eq=False)
class EventStream:
    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    geom: SensorGeometry = field(default_factory=SensorGeometry)

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.polarity = np.asarray(self.polarity, dtype=np.int8).reshape(-1)
        n = len(self.t_us)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ValueError("event field arrays differ in length")

    @classmethod
    def empty(cls, geom: SensorGeometry | None = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, geom or SensorGeometry())

    def __len__(self):
        return len(self.t_us)

    def __getitem__(self, idx) -> "EventStream":
        return EventStream(self.t_us[idx], self.x[idx], self.y[idx], self.polarity[idx], self.geom)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t_us) >= 0))

    def check_bounds(self) -> None:
        W, H = self.geom.width, self.geom.height
        if len(self) and (self.x.min() < 0 or self.x.max() >= W
                          or self.y.min() < 0 or self.y.max() >= H):
            raise OutOfBoundsError(f"event coordinates outside the {W}x{H} sensor")

    def equals(self, other: "EventStream") -> bool:
        return (self.geom == other.geom and np.array_equal(self.t_us, other.t_us)
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.polarity, other.polarity))


class ReprKind(str, Enum):
    EVENT_FRAME = "frame"
    VOXEL_GRID = "voxel"
    TIME_SURFACE = "surface"


@dataclass(eq=False)
class Representation:
    kind: ReprKind
    data: np.ndarray
    bins: int = 1

    def as_image(self) -> np.ndarray:
        """Single H x W channel view of this representation.

        Voxel grids collapse by a recency-weighted sum of the bins (bin b gets
        weight (b + 1) / B), rescaled to peak 1, so temporal order survives.
        """
        if self.kind is not ReprKind.VOXEL_GRID:
            return self.data
        w = (np.arange(self.bins, dtype=np.float32) + 1) / self.bins
        img = np.tensordot(w, self.data, axes=1).astype(np.float32)
        peak = img.max()
        return img / peak if peak > 0 else img


def synchronize(events: EventStream, lidar_scan_t_us: int, duration_us: int) -> EventStream:
    """Events with t in (scan - duration, scan]."""
    if not events.is_sorted():
        raise UnsortedStreamError("event timestamps must be non-decreasing")
    lo = np.searchsorted(events.t_us, lidar_scan_t_us - duration_us, side="right")
    hi = np.searchsorted(events.t_us, lidar_scan_t_us, side="right")
    return events[lo:hi]


def event_counts(events: EventStream) -> np.ndarray:
    """Per-pixel event counts (polarity ignored) as an int64 H x W grid."""
    events.check_bounds()
    W, H = events.geom.width, events.geom.height
    flat = np.bincount(events.y * W + events.x, minlength=W * H)
    return flat.reshape(H, W)


def voxel_bin_index(t_us: np.ndarray, window: AccumulationWindow, bins: int) -> np.ndarray:
    """Temporal bin of each timestamp; bins are half-open, the last one closed."""
    offset = np.asarray(t_us, dtype=np.int64) - window.t_start_us
    idx = (offset * bins) // window.duration_us
    return np.clip(idx, 0, bins - 1)


def voxel_counts(events: EventStream, window: AccumulationWindow, bins: int) -> np.ndarray:
    """Per-bin per-pixel counts as an int64 B x H x W grid."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    events.check_bounds()
    W, H = events.geom.width, events.geom.height
    b = voxel_bin_index(events.t_us, window, bins)
    flat = np.bincount((b * H + events.y) * W + events.x, minlength=bins * H * W)
    return flat.reshape(bins, H, W)


def percentile_normalize(grid: np.ndarray, q: float = NORM_PERCENTILE) -> np.ndarray:
    """Divide by the q-th percentile of the non-zero cells and clip to [0, 1]."""
    grid = np.asarray(grid, dtype=np.float64)
    nz = grid[grid > 0]
    if nz.size == 0:
        return np.zeros(grid.shape, dtype=np.float32)
    scale = np.percentile(nz, q)
    return np.clip(grid / scale, 0.0, 1.0).astype(np.float32)


def build_event_frame(events: EventStream, geom: SensorGeometry | None = None) -> Representation:
    if geom is not None and geom != events.geom:
        events = EventStream(events.t_us, events.x, events.y, events.polarity, geom)
    return Representation(ReprKind.EVENT_FRAME, percentile_normalize(event_counts(events)))


def build_voxel_grid(events: EventStream, window: AccumulationWindow,
                     bins: int = DEFAULT_VOXEL_BINS,
                     geom: SensorGeometry | None = None) -> Representation:
    if geom is not None and geom != events.geom:
        events = EventStream(events.t_us, events.x, events.y, events.polarity, geom)
    counts = voxel_counts(events, window, bins)
    return Representation(ReprKind.VOXEL_GRID, percentile_normalize(counts), bins)


def build_time_surface(events: EventStream, window: AccumulationWindow,
                       geom: SensorGeometry | None = None) -> Representation:
    if geom is not None and geom != events.geom:
        events = EventStream(events.t_us, events.x, events.y, events.polarity, geom)
    if not events.is_sorted():
        raise UnsortedStreamError("time surface needs a time-sorted slice")
    events.check_bounds()
    W, H = events.geom.width, events.geom.height
    surface = np.zeros(H * W, dtype=np.float64)
    if len(events):
        rel = (events.t_us - window.t_start_us) / window.duration_us
        np.maximum.at(surface, events.y * W + events.x, np.clip(rel, 0.0, 1.0))
    return Representation(ReprKind.TIME_SURFACE, surface.reshape(H, W).astype(np.float32))


def build_representation(events: EventStream, window: AccumulationWindow,
                         kind: ReprKind | str, bins: int = DEFAULT_VOXEL_BINS) -> Representation:
    kind = ReprKind(kind)
    if kind is ReprKind.EVENT_FRAME:
        return build_event_frame(events)
    if kind is ReprKind.VOXEL_GRID:
        return build_voxel_grid(events, window, bins)
    return build_time_surface(events, window)


# -- file formats --------------------------------------------------------------

def write_events_bin(path, events: EventStream) -> None:
    """Little-endian: 16-byte header (magic, W, H, reserved) then 16-byte records."""
    rec = np.zeros(len(events), dtype=EVENT_DTYPE)
    rec["t_us"] = events.t_us
    rec["x"] = events.x
    rec["y"] = events.y
    rec["polarity"] = events.polarity
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EVENT_MAGIC, events.geom.width, events.geom.height, 0))
        fh.write(rec.tobytes())


def read_events_bin(path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, W, H, _ = _HEADER.unpack_from(raw)
    if magic != EVENT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) % EVENT_DTYPE.itemsize:
        raise FormatError(f"{path}: body is not a whole number of records")
    rec = np.frombuffer(body, dtype=EVENT_DTYPE)
    return EventStream(rec["t_us"].astype(np.int64), rec["x"], rec["y"], rec["polarity"],
                       SensorGeometry(W, H))


def write_events_csv(path, events: EventStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "x", "y", "polarity"])
        for row in zip(events.t_us.tolist(), events.x.tolist(), events.y.tolist(),
                       events.polarity.tolist()):
            w.writerow(row)


def read_events_csv(path, geom: SensorGeometry | None = None) -> EventStream:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return EventStream.empty(geom)
    return EventStream(data[:, 0], data[:, 1], data[:, 2], data[:, 3], geom or SensorGeometry())


def read_events(path, geom: SensorGeometry | None = None) -> EventStream:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_events_csv(path, geom)
    return read_events_bin(path)
