"""Scene directory input/output.

A scene on disk is a directory holding ``points.txt`` (one ``x y z [r g b]``
line per point, ``#`` comments), ``cameras.json`` (a list of view records),
and ``images/`` with one PPM per view named by the camera record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import read_ppm, write_ppm
from .scene import Camera, PointCloud


def load_points(path: str | Path) -> PointCloud:
    points, colors = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) not in (3, 6):
                raise ValueError(
                    f"{path}:{lineno}: expected 3 or 6 values, got {len(parts)}"
                )
            values = [float(v) for v in parts]
            points.append(values[:3])
            if len(values) == 6:
                colors.append(values[3:])
    if not points:
        raise ValueError("empty point cloud")
    if colors and len(colors) != len(points):
        raise ValueError(f"{path}: some lines carry colors and some do not")
    return PointCloud(
        points=np.array(points), colors=np.array(colors) if colors else None
    )


def save_points(cloud: PointCloud, path: str | Path) -> None:
    with open(path, "w") as f:
        f.write("# x y z" + (" r g b" if cloud.colors is not None else "") + "\n")
        for i, p in enumerate(cloud.points):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if cloud.colors is not None:
                c = cloud.colors[i]
                row += f" {c[0]:.9g} {c[1]:.9g} {c[2]:.9g}"
            f.write(row + "\n")


def load_cameras(path: str | Path) -> tuple[list[Camera], list[str]]:
    """Returns the cameras plus their declared image file names."""
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON list of view records")
    cameras = [Camera.from_dict(r) for r in records]
    image_files = [str(r["image_file"]) for r in records]
    return cameras, image_files


def save_cameras(
    cameras: list[Camera], image_files: list[str], path: str | Path
) -> None:
    records = []
    for cam, name in zip(cameras, image_files):
        rec = cam.to_dict()
        rec["image_file"] = name
        records.append(rec)
    with open(path, "w") as f:
        json.dump(records, f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass
class SceneDirectory:
    """A loaded scene: cloud, cameras, and ground-truth images per view."""

    path: Path
    cloud: PointCloud
    cameras: list[Camera]
    image_files: list[str]
    images: list[np.ndarray]  # [H,W,3] float64 in [0,1], aligned with cameras

    @property
    def view_count(self) -> int:
        return len(self.cameras)


def load_scene(path: str | Path) -> SceneDirectory:
    """Load and validate a scene directory (image files must exist and match
    the dimensions their camera records declare)."""
    path = Path(path)
    cloud = load_points(path / "points.txt")
    cameras, image_files = load_cameras(path / "cameras.json")
    images = []
    for cam, name in zip(cameras, image_files):
        img_path = path / "images" / name
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file {img_path}")
        img = read_ppm(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"{img_path}: size {img.shape[1]}x{img.shape[0]} does not match "
                f"camera {cam.width}x{cam.height}"
            )
        images.append(img)
    return SceneDirectory(
        path=path, cloud=cloud, cameras=cameras, image_files=image_files, images=images
    )


def write_scene(
    path: str | Path,
    cloud: PointCloud,
    cameras: list[Camera],
    images: list[np.ndarray],
) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    save_points(cloud, path / "points.txt")
    image_files = [f"view_{i:03d}.ppm" for i in range(len(cameras))]
    save_cameras(cameras, image_files, path / "cameras.json")
    for name, img in zip(image_files, images):
        write_ppm(img, path / "images" / name)
