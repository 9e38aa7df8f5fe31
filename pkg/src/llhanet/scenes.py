"""Synthetic two-view scenes and the on-disk dataset container."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .geometry import (
    INLIER_THRESHOLD,
    CameraPose,
    CorrespondenceSet,
    EssentialMatrix,
    GeometryError,
    essential_from_pose,
    label_inliers,
    rotation_about_axis,
)

FORMAT_NATIVE = "llha-v1"
FORMAT_CSV = "csv-corr"
FORMAT_VERSION = 1
MAX_REJECTIONS = 1000
_FIELDS = ("coords", "labels", "rotation", "translation", "essential", "mask")
_U64 = struct.Struct("<Q")


class SceneGenerationError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message: str, record: Optional[int] = None):
        self.record = record
        prefix = f"record {record}: " if record is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class SceneConfig:
    n_correspondences: int = 512
    outlier_ratio: float = 0.7
    pixel_noise_sigma: float = 1e-3
    max_rotation_deg: float = 30.0
    depth_range: tuple = (2.0, 6.0)
    seed: int = 0
    label_threshold: float = INLIER_THRESHOLD

    def validate(self) -> "SceneConfig":
        if int(self.n_correspondences) < 16:
            raise ValueError("n_correspondences must be >= 16")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be >= 0")
        if not 0.0 < self.max_rotation_deg <= 90.0:
            raise ValueError("max_rotation_deg must lie in (0, 90]")
        z_min, z_max = self.depth_range
        if not 0.0 < z_min < z_max:
            raise ValueError("depth_range must satisfy 0 < z_min < z_max")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "depth_range" in d:
            d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)


@dataclass
class ScenePair:
    corr: CorrespondenceSet
    injected_outlier_mask: Optional[np.ndarray] = None
    config: Optional[SceneConfig] = None


def _sample_visible_points(rng, R, t, n, z_range, bound=1.0):
    """Points inside the first image's frustum that are also visible in the second image."""
    p1 = np.empty((0, 2))
    p2 = np.empty((0, 2))
    rejected = 0
    while p1.shape[0] < n:
        m = max(2 * (n - p1.shape[0]), 64)
        u = rng.uniform(-bound, bound, size=(m, 2))
        z = rng.uniform(*z_range, size=m)
        X1 = z[:, None] * np.concatenate([u, np.ones((m, 1))], 1)
        X2 = X1 @ R.T + t
        front = X2[:, 2] > 1e-6
        u2 = X2[:, :2] / np.where(front, X2[:, 2], 1.0)[:, None]
        ok = front & np.all(np.abs(u2) <= bound, axis=1)
        if not ok.any():
            rejected += m
            if rejected >= MAX_REJECTIONS:
                raise SceneGenerationError(f"no visible point after {rejected} rejections")
            continue
        rejected = 0
        p1 = np.concatenate([p1, u[ok]])
        p2 = np.concatenate([p2, u2[ok]])
    return p1[:n], p2[:n]


def generate_scene(config: SceneConfig) -> ScenePair:
    """Sample a relative pose, project points into both views and inject outliers.

    Labels are recomputed from the epipolar residual after injection, so an
    injected outlier that happens to land on its epipolar line is labeled 1.
    """
    config.validate()
    rng = np.random.default_rng(int(config.seed))
    n = int(config.n_correspondences)

    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, config.max_rotation_deg))
    R = rotation_about_axis(axis, angle)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    pose = CameraPose(R, t)

    p1, p2 = _sample_visible_points(rng, R, t, n, config.depth_range)

    if config.pixel_noise_sigma > 0:
        p1 = p1 + rng.normal(scale=config.pixel_noise_sigma, size=p1.shape)
        p2 = p2 + rng.normal(scale=config.pixel_noise_sigma, size=p2.shape)

    n_out = int(np.floor(config.outlier_ratio * n))
    mask = np.zeros(n)
    idx = rng.choice(n, size=n_out, replace=False)
    mask[idx] = 1.0
    p2[idx] = rng.uniform(-1.0, 1.0, size=(n_out, 2))

    E = essential_from_pose(pose)
    corr = CorrespondenceSet(np.concatenate([p1, p2], 1), pose=pose, gt_essential=E)
    corr.labels = label_inliers(corr, E, config.label_threshold)
    return ScenePair(corr, mask, config)


def scene_seed(seed: int, index: int) -> int:
    """Per-scene seed from ``(seed, index)``; independent of generation order."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Dataset:
    scenes: list
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[ScenePair]:
        return iter(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    @property
    def has_labels(self) -> bool:
        return all(s.corr.labels is not None for s in self.scenes)

    @property
    def has_poses(self) -> bool:
        return all(s.corr.pose is not None for s in self.scenes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.scenes[i] for i in indices], dict(self.header))

    def split(self, fractions=(0.6, 0.2, 0.2)) -> list:
        """Contiguous split by scene index."""
        n = len(self.scenes)
        bounds = np.round(np.cumsum((0.0,) + tuple(fractions)) / sum(fractions) * n).astype(int)
        return [self.subset(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def generate_dataset(n_scenes: int, config_template: SceneConfig, seed: int,
                     path: Optional[Path] = None) -> Dataset:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    config_template.validate()
    scenes = [generate_scene(replace(config_template, seed=scene_seed(seed, i)))
              for i in range(n_scenes)]
    header = {"config": config_template.to_dict(), "seed": int(seed)}
    ds = Dataset(scenes, header)
    if path is not None:
        write_dataset(ds, path)
    return ds


def _pack(arr) -> bytes:
    if arr is None:
        return _U64.pack(0)
    a = np.ascontiguousarray(arr, dtype="<f8").ravel()
    return _U64.pack(a.size) + a.tobytes()


def write_dataset(dataset: Dataset, path) -> None:
    header = dict(dataset.header)
    header.update(format=FORMAT_NATIVE, version=FORMAT_VERSION, n_scenes=len(dataset),
                  fields=list(_FIELDS))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_U64.pack(len(blob)))
        fh.write(blob)
        for s in dataset:
            c = s.corr
            fh.write(_pack(c.coords))
            fh.write(_pack(c.labels))
            fh.write(_pack(None if c.pose is None else c.pose.rotation))
            fh.write(_pack(None if c.pose is None else c.pose.translation))
            fh.write(_pack(None if c.gt_essential is None else c.gt_essential.m))
            fh.write(_pack(s.injected_outlier_mask))


def _read_array(buf: memoryview, pos: int, record: int, name: str):
    if pos + 8 > len(buf):
        raise DatasetParseError(f"truncated before field '{name}'", record)
    (count,) = _U64.unpack_from(buf, pos)
    pos += 8
    end = pos + 8 * count
    if end > len(buf):
        raise DatasetParseError(f"truncated inside field '{name}'", record)
    arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64)
    return arr, end


def _record_from_fields(f: dict, record: int, config: Optional[SceneConfig]) -> ScenePair:
    coords = f["coords"]
    if coords.size % 4:
        raise DatasetParseError("coords length is not a multiple of 4", record)
    coords = coords.reshape(-1, 4)
    n = coords.shape[0]
    labels = f["labels"] if f["labels"].size else None
    mask = f["mask"] if f["mask"].size else None
    for name, arr, size in (("labels", labels, n), ("mask", mask, n)):
        if arr is not None and arr.size != size:
            raise DatasetParseError(f"{name} length {arr.size} != {size}", record)
    pose = None
    if f["rotation"].size or f["translation"].size:
        if f["rotation"].size != 9 or f["translation"].size != 3:
            raise DatasetParseError("pose fields have wrong sizes", record)
        pose = CameraPose(f["rotation"].reshape(3, 3), f["translation"])
    E = None
    if f["essential"].size:
        if f["essential"].size != 9:
            raise DatasetParseError("essential must have 9 entries", record)
        E = EssentialMatrix(f["essential"].reshape(3, 3), projected=True)
    corr = CorrespondenceSet(coords, labels, pose, E)
    try:
        corr.validate()
    except GeometryError as exc:
        raise DatasetParseError(str(exc), record) from exc
    return ScenePair(corr, mask, config)


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    buf = memoryview(data)
    if len(buf) < 8:
        raise DatasetParseError("file too short for header")
    (hlen,) = _U64.unpack_from(buf, 0)
    if 8 + hlen > len(buf):
        raise DatasetParseError("truncated header")
    try:
        header = json.loads(bytes(buf[8:8 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetParseError(f"bad header: {exc}") from exc
    if header.get("format") != FORMAT_NATIVE:
        raise DatasetParseError(f"unsupported format {header.get('format')!r}")
    config = SceneConfig.from_dict(header["config"]) if header.get("config") else None
    pos = 8 + hlen
    scenes = []
    for record in range(int(header["n_scenes"])):
        fields = {}
        for name in _FIELDS:
            fields[name], pos = _read_array(buf, pos, record, name)
        scenes.append(_record_from_fields(fields, record, config))
    if pos != len(buf):
        raise DatasetParseError("trailing bytes after last record", len(scenes))
    return Dataset(scenes, header)


def read_csv_corr(path) -> Dataset:
    """Rows of ``scene,x1,y1,x2,y2[,label]``; columns are located by header name."""
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = {"x1", "y1", "x2", "y2"} - set(cols)
        if missing:
            raise DatasetParseError(f"missing columns {sorted(missing)}")
        has_labels = "label" in cols
        for row_no, row in enumerate(reader):
            key = row.get("scene", "0")
            try:
                vals = [float(row[k]) for k in ("x1", "y1", "x2", "y2")]
                lab = float(row["label"]) if has_labels else None
            except (TypeError, ValueError) as exc:
                raise DatasetParseError(f"bad row {row_no}: {exc}", len(groups)) from exc
            groups.setdefault(key, []).append((vals, lab))
    scenes = []
    for record, rows in enumerate(groups.values()):
        coords = np.array([r[0] for r in rows])
        labels = np.array([r[1] for r in rows]) if has_labels else None
        corr = CorrespondenceSet(coords, labels)
        try:
            corr.validate()
        except GeometryError as exc:
            raise DatasetParseError(str(exc), record) from exc
        scenes.append(ScenePair(corr))
    return Dataset(scenes, {"format": FORMAT_CSV})


def import_external(path, format_id: str = FORMAT_NATIVE) -> Dataset:
    if format_id == FORMAT_NATIVE:
        return read_dataset(path)
    if format_id == FORMAT_CSV:
        return read_csv_corr(path)
    raise ValueError(f"unknown format_id {format_id!r}")


def write_csv_corr(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_labels = dataset.has_labels
        w.writerow(["scene", "x1", "y1", "x2", "y2"] + (["label"] if has_labels else []))
        for k, s in enumerate(dataset):
            for i, row in enumerate(s.corr.coords):
                extra = [int(s.corr.labels[i])] if has_labels else []
                w.writerow([k] + [repr(float(v)) for v in row] + extra)
