"""Procedurally textured planar scenes with exact depth and camera poses."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import SceneError
from .geometry import DEPTH_MAX, DEPTH_MIN, Intrinsics, Pose6, compose, invert, pixel_lattice

_HASH_SIZE = 1 << 16
_OCTAVES = ((1.0, 1.0), (0.5, 0.5))

@dataclass
class Plane:
    """Textured plane ``{X : normal . X = offset}`` in world coordinates.

    ``extent`` bounds the plane to a rectangle of the given half-sizes around
    its anchor (``offset * normal`` shifted in-plane by ``center``).
    ``motion`` moves the plane, texture included, by ``k * motion`` at frame
    ``k``.
    """

    normal: tuple
    offset: float
    texture_seed: int = 0
    pattern: str = "noise"
    cell: float = 0.5
    extent: tuple = None
    center: tuple = (0.0, 0.0)
    motion: tuple = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise SceneError("plane normal must be non-zero")
        self.normal = tuple((n / norm).tolist())
        if self.pattern not in ("noise", "checker"):
            raise SceneError(f"unknown albedo pattern {self.pattern!r}")

    def basis(self):
        n = np.asarray(self.normal)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        t1 = np.cross(helper, n)
        t1 /= np.linalg.norm(t1)
        return t1, np.cross(n, t1)

    def anchor(self, frame):
        n = np.asarray(self.normal)
        t1, t2 = self.basis()
        p = self.offset * n + self.center[0] * t1 + self.center[1] * t2
        if self.motion is not None:
            p = p + frame * np.asarray(self.motion, dtype=np.float64)
        return p


@dataclass
class SyntheticScene:
    planes: list
    camera_poses: list
    intrinsics: Intrinsics
    channels: int = 3
    meta: dict = field(default_factory=dict)

    def relative_pose(self, target, source):
        """Rigid motion taking target-camera coordinates to source-camera coordinates."""
        return compose(invert(self.camera_poses[source]), self.camera_poses[target])

    def to_dict(self):
        return {
            "planes": [asdict(p) for p in self.planes],
            "camera_poses": [p.vector.tolist() for p in self.camera_poses],
            "intrinsics": self.intrinsics.to_dict(),
            "channels": self.channels,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        planes = []
        for p in d["planes"]:
            p = dict(p)
            for key in ("normal", "extent", "center", "motion"):
                if p.get(key) is not None:
                    p[key] = tuple(p[key])
            planes.append(Plane(**p))
        return cls(
            planes,
            [Pose6.from_vector(v) for v in d["camera_poses"]],
            Intrinsics.from_dict(d["intrinsics"]),
            int(d.get("channels", 3)),
            dict(d.get("meta", {})),
        )


@dataclass
class RenderedScene:
    images: list
    depths: list
    poses: list
    intrinsics: Intrinsics
    surface_ids: list


def _value_table(seed, channel):
    return np.random.default_rng([seed, channel]).random(_HASH_SIZE)


def _smooth(t):
    return t * t * t * (t * (6 * t - 15) + 10)


def _lattice(table, i, j, k):
    h = (i * 73856093) ^ (j * 19349663) ^ (k * 83492791)
    return table[h % _HASH_SIZE]


def _value_noise(table, p):
    """Smooth 3-D value noise in [0, 1] at points ``p`` (..., 3)."""
    base = np.floor(p)
    f = _smooth(p - base)
    i, j, k = (base[..., a].astype(np.int64) for a in range(3))
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    out = 0.0
    for di, wx in ((0, 1 - fx), (1, fx)):
        for dj, wy in ((0, 1 - fy), (1, fy)):
            for dk, wz in ((0, 1 - fz), (1, fz)):
                out = out + wx * wy * wz * _lattice(table, i + di, j + dj, k + dk)
    return out


def texture(plane, points, channels=3):
    """Albedo in ``[0.05, 0.95]`` at plane-attached 3-D points ``(..., 3)``.

    The noise pattern is solid (defined in 3-D), so planes sharing a texture
    seed meet without a seam.
    """
    if plane.pattern == "checker":
        t1, t2 = plane.basis()
        s, t = points @ t1, points @ t2
        parity = (np.floor(s / plane.cell) + np.floor(t / plane.cell)) % 2
        return np.repeat((0.2 + 0.6 * parity)[..., None], channels, axis=-1)
    total = sum(a for a, _ in _OCTAVES)

    def octaves(channel):
        table = _value_table(plane.texture_seed, channel)
        return sum(a * _value_noise(table, points / (plane.cell * f) + 17.0 * channel) for a, f in _OCTAVES) / total

    shared = octaves(0)
    img = np.stack([0.6 * shared + 0.4 * octaves(c + 1) for c in range(channels)], axis=-1)
    # Value noise concentrates around 0.5; stretch the contrast a little.
    return np.clip(0.5 + 1.4 * (img - 0.5), 0.05, 0.95)


def render_frame(scene, frame):
    """Ray-cast one frame; returns ``(image, depth, surface_id)``."""
    K = scene.intrinsics
    pose = scene.camera_poses[frame]
    R = pose.rotation_matrix
    pix = pixel_lattice(K.height, K.width)
    rays = np.stack([(pix[..., 0] - K.cx) / K.fx, (pix[..., 1] - K.cy) / K.fy, np.ones(K.shape)], axis=-1)
    dirs = rays @ R.T
    origin = pose.translation

    best = np.full(K.shape, np.inf)
    surface = np.full(K.shape, -1, dtype=np.int64)
    points = np.zeros(K.shape + (3,))
    for idx, plane in enumerate(scene.planes):
        n = np.asarray(plane.normal)
        anchor = plane.anchor(frame)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (anchor @ n - origin @ n) / denom
        hit = np.isfinite(lam) & (lam > 1e-9) & (np.abs(denom) > 1e-12)
        P = origin + lam[..., None] * dirs
        local = np.where(hit[..., None], P - anchor, 0.0)
        if plane.extent is not None:
            t1, t2 = plane.basis()
            hit &= (np.abs(local @ t1) <= plane.extent[0]) & (np.abs(local @ t2) <= plane.extent[1])
        closer = hit & (lam < best)
        best = np.where(closer, lam, best)
        surface = np.where(closer, idx, surface)
        # Texture is attached to the plane's rest position so moving planes carry it along.
        points = np.where(closer[..., None], local + plane.anchor(0), points)

    if np.any(surface < 0):
        raise SceneError(f"frame {frame}: {int(np.sum(surface < 0))} pixels hit no plane")
    if best.min() < DEPTH_MIN or best.max() > DEPTH_MAX:
        raise SceneError(f"frame {frame}: depth range [{best.min():.3g}, {best.max():.3g}] leaves the clamp range")

    image = np.zeros(K.shape + (scene.channels,))
    for idx, plane in enumerate(scene.planes):
        sel = surface == idx
        if np.any(sel):
            image[sel] = texture(plane, points[sel], scene.channels)
    return image, best, surface


def render_scene(scene):
    """Render every camera pose of ``scene``."""
    images, depths, ids = [], [], []
    for k in range(len(scene.camera_poses)):
        img, d, sid = render_frame(scene, k)
        images.append(img)
        depths.append(d)
        ids.append(sid)
    return RenderedScene(images, depths, list(scene.camera_poses), scene.intrinsics, ids)


def default_intrinsics(size=64):
    return Intrinsics(0.9 * size, 0.9 * size, (size - 1) / 2, (size - 1) / 2, size, size)


def camera_path(n_frames, step_translation, step_rotation=(0.0, 0.0, 0.0)):
    """Constant-velocity camera-to-world poses, frame 0 at the origin."""
    step = Pose6(np.asarray(step_rotation, dtype=np.float64), np.asarray(step_translation, dtype=np.float64))
    poses = [Pose6.identity()]
    for _ in range(n_frames - 1):
        poses.append(compose(poses[-1], step))
    return poses


def two_plane_scene(size=64, n_frames=3, seed=0, layout="corner", crease_depth=6.0, angle=0.8, cell=1.0,
                    step_translation=(0.15, 0.0, 0.05), step_rotation=(0.0, 0.01, 0.0),
                    occluder=False, moving_object=False):
    """Two textured planes meeting in a straight crease.

    ``layout="corner"`` looks into a concave corner of two vertical walls
    whose crease lies straight ahead at ``crease_depth``; each wall is turned
    by ``angle`` radians from fronto-parallel. ``layout="ground"`` is a
    fronto-parallel wall at ``crease_depth`` standing on a ground plane one
    unit below the camera. ``occluder`` adds a bounded fronto-parallel panel
    in front of the walls; ``moving_object`` adds a bounded panel that
    translates independently of the camera.
    """
    tex = seed * 10 + 1
    if layout == "corner":
        s, c = np.sin(angle), np.cos(angle)
        planes = [
            Plane((-s, 0.0, c), crease_depth * c, texture_seed=tex, cell=cell),
            Plane((s, 0.0, c), crease_depth * c, texture_seed=tex, cell=cell),
        ]
    elif layout == "ground":
        planes = [
            Plane((0.0, 0.0, 1.0), crease_depth, texture_seed=tex, cell=cell),
            Plane((0.0, 1.0, 0.0), 1.0, texture_seed=tex, cell=cell),
        ]
    else:
        raise SceneError(f"unknown layout {layout!r}")
    if occluder:
        planes.append(Plane((0.0, 0.0, 1.0), 0.5 * crease_depth, texture_seed=tex + 2, cell=cell * 0.5,
                            extent=(0.35, 0.45), center=(-0.35, -0.3)))
    if moving_object:
        planes.append(Plane((0.0, 0.0, 1.0), 0.6 * crease_depth, texture_seed=tex + 3, cell=cell * 0.5,
                            extent=(0.45, 0.35), center=(0.75, 0.75), motion=(-0.12, 0.0, 0.0)))
    K = default_intrinsics(size)
    poses = camera_path(n_frames, step_translation, step_rotation)
    meta = {"kind": "two_plane", "layout": layout, "seed": seed, "occluder": occluder,
            "moving_object": moving_object}
    return SyntheticScene(planes, poses, K, 3, meta)


def fronto_parallel_scene(size=32, depth=4.0, shift_pixels=2, n_frames=3, seed=0, cell=0.5):
    """Single fronto-parallel plane; consecutive frames differ by an integer pixel shift."""
    K = default_intrinsics(size)
    tx = shift_pixels * depth / K.fx
    planes = [Plane((0.0, 0.0, 1.0), depth, texture_seed=seed, cell=cell)]
    poses = camera_path(n_frames, (tx, 0.0, 0.0))
    return SyntheticScene(planes, poses, K, 3, {"kind": "fronto_parallel", "seed": seed})


def layered_scene(size=32, depths=(3.0, 6.0), shift_pixels=(4, 2), n_frames=3, seed=0, cell=0.5):
    """Fronto-parallel panel in front of a fronto-parallel wall with integer disparities.

    The camera translates along x so that the near layer moves by
    ``shift_pixels[0]`` and the far layer by ``shift_pixels[1]`` pixels per
    frame; both shifts must be consistent with the depth ratio. Warping with
    the true depth and pose reproduces co-visible pixels exactly.
    """
    K = default_intrinsics(size)
    near, far = depths
    tx = shift_pixels[1] * far / K.fx
    if not np.isclose(K.fx * tx / near, shift_pixels[0]):
        raise SceneError("pixel shifts are inconsistent with the layer depths")
    half = 0.18 * size * near / K.fx
    planes = [
        Plane((0.0, 0.0, 1.0), far, texture_seed=seed * 10 + 1, cell=cell),
        Plane((0.0, 0.0, 1.0), near, texture_seed=seed * 10 + 2, cell=cell * 0.5, extent=(half, half)),
    ]
    poses = camera_path(n_frames, (tx, 0.0, 0.0))
    poses = [compose(Pose6(np.zeros(3), np.array([-tx * (n_frames - 1) / 2, 0.0, 0.0])), p) for p in poses]
    return SyntheticScene(planes, poses, K, 3, {"kind": "layered", "seed": seed})


SCENE_BUILDERS = {
    "two_plane": two_plane_scene,
    "fronto_parallel": fronto_parallel_scene,
    "layered": layered_scene,
}


def build_scene(kind="two_plane", **kwargs):
    """Construct one of the named scene families."""
    try:
        builder = SCENE_BUILDERS[kind]
    except KeyError:
        raise SceneError(f"unknown scene kind {kind!r}; choose from {sorted(SCENE_BUILDERS)}") from None
    return builder(**kwargs)
