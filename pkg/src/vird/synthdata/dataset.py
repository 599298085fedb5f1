"""Paired cross-view samples and their on-disk layout.

A dataset directory holds ``manifest.json``, ``poses.csv`` and one PNG per
view under ``sat/`` and ``grd/``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import ImageFrame, Pose
from .render import render_ground, render_satellite, satellite_frame, to_uint8
from .scene import SynthParams, generate_scene, sample_camera_pose

FORMAT_VERSION = 1
CSV_COLUMNS = ["id", "x_m", "y_m", "theta_rad", "res_m_per_px"]


class DatasetError(RuntimeError):
    pass


@dataclass
class SamplePair:
    id: str
    sat: np.ndarray  # (A, A, 3) uint8, north up
    grd: np.ndarray  # (H, W, 3) uint8 panorama
    pose: Pose
    frame: ImageFrame


def sample_id(index: int) -> str:
    return f"{index:06d}"


def make_pair(seed: int, index: int, params: SynthParams) -> SamplePair:
    """Render sample ``index``; its randomness depends on ``(seed, index)`` only."""
    scene = generate_scene([seed, index, 0], params)
    rng = np.random.default_rng([seed, index, 1])
    pose = sample_camera_pose(scene, rng)
    frame = satellite_frame(scene, params.sat_px)
    sat = render_satellite(scene, frame)
    grd = render_ground(scene, pose, params.hfov, (params.pano_h, params.pano_w), params.cam_height,
                        (math.radians(params.elev_min_deg), math.radians(params.elev_max_deg)))
    return SamplePair(sample_id(index), to_uint8(sat), to_uint8(grd), pose, frame)


def _make(args):
    return make_pair(*args)


def generate_dataset(seed: int, count: int, params: SynthParams | None = None, jobs: int = 1,
                     start: int = 0) -> list[SamplePair]:
    params = params or SynthParams()
    tasks = [(seed, i, params) for i in range(start, start + count)]
    if jobs > 1 and count > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_make, tasks, chunksize=8))
    return [_make(t) for t in tasks]


def write_dataset(pairs, directory, seed=None, params: SynthParams | None = None) -> Path:
    directory = Path(directory)
    (directory / "sat").mkdir(parents=True, exist_ok=True)
    (directory / "grd").mkdir(parents=True, exist_ok=True)
    with open(directory / "poses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for p in pairs:
            Image.fromarray(p.sat).save(directory / "sat" / f"{p.id}.png")
            Image.fromarray(p.grd).save(directory / "grd" / f"{p.id}.png")
            writer.writerow([p.id, repr(p.pose.x), repr(p.pose.y), repr(p.pose.theta), repr(p.frame.resolution)])
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "count": len(pairs),
        "params": asdict(params) if params is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path} is missing")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path} is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"dataset format version {manifest.get('format_version')!r} != supported {FORMAT_VERSION}")
    return manifest


def _load_png(path: Path, sid: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"sample {sid}: missing {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DatasetError(f"sample {sid}: cannot read {path}: {exc}") from exc


def read_dataset(directory) -> tuple[list[SamplePair], dict]:
    """Load every sample listed in ``poses.csv``; returns ``(pairs, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    csv_path = directory / "poses.csv"
    if not csv_path.exists():
        raise DatasetError(f"{csv_path} is missing")
    pairs = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise DatasetError(f"poses.csv columns {reader.fieldnames} != {CSV_COLUMNS}")
        for row in reader:
            sid = row["id"]
            try:
                pose = Pose(float(row["x_m"]), float(row["y_m"]), float(row["theta_rad"]))
                res = float(row["res_m_per_px"])
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"sample {sid}: bad pose row: {exc}") from exc
            sat = _load_png(directory / "sat" / f"{sid}.png", sid)
            grd = _load_png(directory / "grd" / f"{sid}.png", sid)
            if sat.shape[0] != sat.shape[1]:
                raise DatasetError(f"sample {sid}: satellite image is not square")
            pairs.append(SamplePair(sid, sat, grd, pose, ImageFrame(res, sat.shape[1], sat.shape[0])))
    if manifest.get("count") is not None and manifest["count"] != len(pairs):
        raise DatasetError(f"manifest lists {manifest['count']} samples, poses.csv has {len(pairs)}")
    return pairs, manifest


def params_from_manifest(manifest: dict) -> SynthParams:
    return SynthParams(**manifest["params"]) if manifest.get("params") else SynthParams()
