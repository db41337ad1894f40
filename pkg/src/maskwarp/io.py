"""File formats: 8-bit PNG, float32 planar binary with JSON sidecar, KITTI pose text.

The float format stores a ``(H, W, C)`` array as little-endian float32 in
planar order (all of channel 0, then channel 1, ...). The sidecar
``<name>.json`` next to ``<name>.f32`` holds::

    {"format": "maskwarp-f32-planar", "version": 1,
     "height": H, "width": W, "channels": C, "dtype": "<f4", "order": "CHW"}
"""

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError
from .geometry import Intrinsics, Pose6
from .scene import RenderedScene, SyntheticScene

FLOAT_FORMAT = "maskwarp-f32-planar"
FLOAT_VERSION = 1
IDENTITY_POSE_ROW = "1 0 0 0 0 1 0 0 0 0 1 0"


class FormatError(OSError):
    """A file exists but does not follow the expected layout."""


# -- PNG ---------------------------------------------------------------------------


def write_png(path, image):
    """Write an image in ``[0, 1]`` as 8-bit PNG (values are clipped, then rounded)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise DimensionError(f"PNG output needs (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path):
    """Read an 8-bit PNG as float64 in ``[0, 1]`` with shape ``(H, W, C)``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if im.mode in ("L", "I", "I;16") else "RGB"))
    arr = arr.astype(np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


# -- float planar --------------------------------------------------------------------


def _sidecar(path):
    path = Path(path)
    return path.with_suffix(".json")


def write_float(path, array):
    """Write ``(H, W)`` or ``(H, W, C)`` as float32 planar binary plus JSON sidecar."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DimensionError(f"expected (H, W) or (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    planar = np.ascontiguousarray(np.moveaxis(arr.astype("<f4"), 2, 0))
    path = Path(path)
    path.write_bytes(planar.tobytes())
    meta = {"format": FLOAT_FORMAT, "version": FLOAT_VERSION, "height": h, "width": w,
            "channels": c, "dtype": "<f4", "order": "CHW"}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_float(path, squeeze=True):
    """Read a float planar file; single-channel data comes back ``(H, W)`` when ``squeeze``."""
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{_sidecar(path)}: malformed sidecar ({exc})") from exc
    if meta.get("format") != FLOAT_FORMAT or meta.get("version") != FLOAT_VERSION:
        raise FormatError(f"{path}: unsupported float format {meta.get('format')!r} v{meta.get('version')}")
    h, w, c = meta["height"], meta["width"], meta["channels"]
    raw = path.read_bytes()
    if len(raw) != 4 * h * w * c:
        raise FormatError(f"{path}: expected {4 * h * w * c} bytes, found {len(raw)}")
    arr = np.moveaxis(np.frombuffer(raw, dtype="<f4").reshape(c, h, w), 0, 2).astype(np.float32)
    return arr[..., 0] if squeeze and c == 1 else arr


# -- KITTI poses ------------------------------------------------------------------------


def _format_number(x):
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def format_pose_row(T):
    """One KITTI row: the top 3x4 block of ``T`` in row-major order."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape not in ((3, 4), (4, 4)):
        raise DimensionError(f"pose matrix must be 3x4 or 4x4, got {T.shape}")
    return " ".join(_format_number(x) for x in T[:3, :4].reshape(-1))


def write_kitti_poses(path, matrices):
    """Write ``(N, 3|4, 4)`` pose matrices, one 12-number row each.

    Numbers use the shortest representation that round-trips exactly.
    """
    rows = [format_pose_row(T) for T in matrices]
    Path(path).write_text("".join(r + "\n" for r in rows))


def read_kitti_poses(path):
    """Read KITTI pose text into ``(N, 4, 4)`` matrices."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 numbers, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        T = np.eye(4)
        T[:3, :4] = np.reshape(vals, (3, 4))
        out.append(T)
    return np.array(out).reshape(-1, 4, 4)


# -- misc -------------------------------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from exc


def default_output_root():
    """Output root from ``MASKWARP_OUTPUT_ROOT``, else ``./maskwarp-runs``."""
    return Path(os.environ.get("MASKWARP_OUTPUT_ROOT", "maskwarp-runs"))


# -- scene directories --------------------------------------------------------------------


def save_scene_dir(directory, scene, rendered):
    """Write a rendered scene: ``scene.json``, ``intrinsics.json``, ``poses.txt``,
    ``images/NNNNNN.{png,f32,json}`` and ``depths/NNNNNN.{f32,json}``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "depths").mkdir(parents=True, exist_ok=True)
    write_json(directory / "scene.json", scene.to_dict())
    write_json(directory / "intrinsics.json", scene.intrinsics.to_dict())
    write_kitti_poses(directory / "poses.txt", [p.as_matrix() for p in rendered.poses])
    for k, (img, depth) in enumerate(zip(rendered.images, rendered.depths)):
        write_png(directory / "images" / f"{k:06d}.png", img)
        write_float(directory / "images" / f"{k:06d}.f32", img)
        write_float(directory / "depths" / f"{k:06d}.f32", depth)


def load_scene_dir(directory):
    """Read a scene directory; returns ``(SyntheticScene or None, RenderedScene)``.

    Images are taken from the float files, so they match what was rendered
    up to float32 rounding.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory {directory} does not exist")
    K = Intrinsics.from_dict(read_json(directory / "intrinsics.json"))
    mats = read_kitti_poses(directory / "poses.txt")
    images, depths = [], []
    for k in range(len(mats)):
        images.append(read_float(directory / "images" / f"{k:06d}.f32", squeeze=False).astype(np.float64))
        depths.append(read_float(directory / "depths" / f"{k:06d}.f32").astype(np.float64))
    spec_path = directory / "scene.json"
    scene = SyntheticScene.from_dict(read_json(spec_path)) if spec_path.exists() else None
    rendered = RenderedScene(images, depths, [Pose6.from_matrix(T) for T in mats], K, None)
    return scene, rendered
