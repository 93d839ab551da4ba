"""On-disk sample layout shared by the CLI subcommands.

::

    <root>/manifest.json
    <root>/intrinsics.json
    <root>/sample_00000/cloud.csv        LiDAR scan, LiDAR frame
    <root>/sample_00000/events.bin       full recorded stream
    <root>/sample_00000/calib_gt.json    ground-truth extrinsic
    <root>/sample_00000/calib_decal.json decalibrated extrinsic
    <root>/sample_00000/label.json       correction label (left-composed onto decal)
    <root>/sample_00000/meta.json        seeds, category, window
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DatasetNotFoundError, FormatError
from .event_repr import AccumulationWindow, EventStream, read_events_bin, write_events_bin
from .geometry import (DecalibRange, EulerPose, RigidTransform, load_calibration,
                       save_calibration)
from .lidar_cam import (Intrinsics, PointCloud, load_intrinsics, read_point_cloud,
                        save_intrinsics, write_point_cloud)
from .simulator import Category, Sample, generate_sample

MANIFEST_SCHEMA = "evlcalib.manifest/1"
CATEGORIES = tuple(c.value for c in Category)


@dataclass(eq=False)
class StoredSample:
    name: str
    cloud: PointCloud
    events: EventStream
    gt: RigidTransform
    decalibrated: RigidTransform
    label: EulerPose
    category: str
    window: AccumulationWindow
    meta: dict


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_sample(d, s: Sample, window: AccumulationWindow, extra_meta: dict | None = None) -> None:
    """``s`` carries the recorded stream; ``window`` is the accumulation window."""
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    write_point_cloud(d / "cloud.csv", s.cloud)
    write_events_bin(d / "events.bin", s.events)
    save_calibration(d / "calib_gt.json", s.gt)
    save_calibration(d / "calib_decal.json", s.decalibrated)
    _dump(d / "label.json", s.label.to_json_dict())
    meta = {"scene_seed": s.scene_seed, "decal_seed": s.decal_seed, "category": s.category.value,
            "window": {"t_end_us": window.t_end_us, "duration_us": window.duration_us},
            "recorded_us": s.window.duration_us,
            "trajectory": {"linear_velocity_mps": list(s.trajectory.linear_velocity),
                           "angular_velocity_dps": list(s.trajectory.angular_velocity_deg)}}
    meta.update(extra_meta or {})
    _dump(d / "meta.json", meta)


def read_sample(d) -> StoredSample:
    d = Path(d)
    if not d.is_dir():
        raise DatasetNotFoundError(f"no sample directory at {d}")
    try:
        meta = json.loads((d / "meta.json").read_text())
        label = EulerPose.from_json_dict(json.loads((d / "label.json").read_text()))
        w = meta["window"]
        return StoredSample(d.name, read_point_cloud(d / "cloud.csv"), read_events_bin(d / "events.bin"),
                            load_calibration(d / "calib_gt.json"),
                            load_calibration(d / "calib_decal.json"), label, meta["category"],
                            AccumulationWindow(int(w["t_end_us"]), int(w["duration_us"])), meta)
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: malformed sample ({exc})") from exc


def generate_dataset(root, count: int, categories=CATEGORIES, decal_range: DecalibRange = DecalibRange(1.0, 0.1),
                     window_ms: float = 50.0, record_ms: float = 80.0, seed: int = 0,
                     t_end_us: int = 1_000_000, K: Intrinsics | None = None) -> dict:
    """Write ``count`` samples, categories assigned round-robin; returns the manifest."""
    if count < 0:
        raise ValueError("count must be >= 0")
    cats = [Category(c) for c in categories]
    if not cats:
        raise ValueError("at least one category is required")
    if record_ms < window_ms:
        raise ValueError("record_ms must cover the accumulation window")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    K = K or Intrinsics.default()
    save_intrinsics(root / "intrinsics.json", K)
    record = AccumulationWindow(t_end_us, int(round(record_ms * 1000)))
    window = AccumulationWindow(t_end_us, int(round(window_ms * 1000)))
    entries = []
    for i in range(count):
        scene_seed = seed * 1_000_003 + i
        cat = cats[i % len(cats)]
        s = generate_sample(scene_seed, cat, decal_range=decal_range, window=record, K=K)
        name = f"sample_{i:05d}"
        write_sample(root / name, s, window)
        entries.append({"name": name, "index": i, "category": cat.value,
                        "scene_seed": scene_seed, "decal_seed": s.decal_seed})
    manifest = {"schema": MANIFEST_SCHEMA, "count": count, "seed": seed,
                "categories": [c.value for c in cats],
                "range": {"max_rot_deg": decal_range.max_rot_deg,
                          "max_trans_m": decal_range.max_trans_m},
                "window_ms": window_ms, "record_ms": record_ms, "t_end_us": t_end_us,
                "samples": entries}
    _dump(root / "manifest.json", manifest)
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def iter_samples(root):
    root = Path(root)
    for entry in load_manifest(root)["samples"]:
        yield entry, read_sample(root / entry["name"])


def dataset_intrinsics(root) -> Intrinsics:
    path = Path(root) / "intrinsics.json"
    return load_intrinsics(path) if path.is_file() else Intrinsics.default()
