"""Depth and trajectory error metrics, trajectory chaining and alignment."""

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_field
from .exceptions import DegenerateInputError, DimensionError, RankDeficiencyError
from .geometry import DepthField, Pose6, compose, invert, rotation_log

MIN_EVAL_DEPTH = 1e-3
DEFAULT_CAP = 80.0
ACC_THRESHOLDS = (1.25, 1.25**2, 1.25**3)
KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DESK_LENGTHS = (10, 20, 30, 40, 50, 60, 70, 80)


# -- depth -----------------------------------------------------------------------


@dataclass(frozen=True)
class DepthEvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    acc1: float
    acc2: float
    acc3: float
    n_pixels: int
    median_scaled: bool = False
    scale: float = 1.0

    def to_dict(self):
        return asdict(self)


def _depth_array(d, name):
    if isinstance(d, DepthField):
        return d.depth
    return check_field(d, name)


def _valid_set(pred, gt, valid):
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    sel = gt > 0
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != gt.shape:
            raise DimensionError(f"valid {valid.shape} does not match depth {gt.shape}")
        sel &= valid
    if not sel.any():
        raise DegenerateInputError("no valid pixels to evaluate")
    return sel


def scale_align(pred, gt, valid=None):
    """Multiply ``pred`` by ``median(gt) / median(pred)`` over the valid pixels.

    Returns ``(scaled_pred, scale)``.
    """
    pred = _depth_array(pred, "pred")
    gt = _depth_array(gt, "gt")
    sel = _valid_set(pred, gt, valid)
    med_pred = np.median(pred[sel])
    if med_pred <= 0:
        raise DegenerateInputError("median of the prediction is not positive")
    scale = float(np.median(gt[sel]) / med_pred)
    return pred * scale, scale


def depth_metrics(pred, gt, valid=None, cap=DEFAULT_CAP, min_depth=MIN_EVAL_DEPTH, median_scaling=False):
    """Standard monocular depth errors over pixels with ``gt > 0`` (and ``valid``).

    Both maps are clamped to ``[min_depth, cap]`` before evaluation. With
    ``median_scaling`` the prediction is first aligned by :func:`scale_align`.
    """
    pred = _depth_array(pred, "pred")
    gt = _depth_array(gt, "gt")
    sel = _valid_set(pred, gt, valid)
    scale = 1.0
    if median_scaling:
        pred, scale = scale_align(pred, gt, sel)
    p = np.clip(pred[sel], min_depth, cap)
    g = np.clip(gt[sel], min_depth, cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    acc = [float(np.mean(ratio < t)) for t in ACC_THRESHOLDS]
    return DepthEvalReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        acc1=acc[0],
        acc2=acc[1],
        acc3=acc[2],
        n_pixels=int(sel.sum()),
        median_scaled=bool(median_scaling),
        scale=scale,
    )


# -- trajectories ------------------------------------------------------------------


class Trajectory:
    """Ordered absolute camera-to-world poses."""

    def __init__(self, poses, indices=None):
        self.poses = [p if isinstance(p, Pose6) else Pose6.from_matrix(p) for p in poses]
        self.indices = list(range(len(self.poses))) if indices is None else list(indices)
        if len(self.indices) != len(self.poses):
            raise DimensionError("indices and poses differ in length")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @classmethod
    def from_matrices(cls, mats):
        mats = np.asarray(mats, dtype=np.float64)
        if mats.ndim != 3 or mats.shape[1:] not in ((3, 4), (4, 4)):
            raise DimensionError(f"expected (N, 3, 4) or (N, 4, 4) matrices, got {mats.shape}")
        return cls([Pose6.from_matrix(m) for m in mats])

    def matrices(self):
        """``(N, 4, 4)`` homogeneous matrices."""
        return np.stack([p.as_matrix() for p in self.poses]) if self.poses else np.zeros((0, 4, 4))

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relatives(self):
        """Successive increments ``inv(P_k) P_{k+1}``."""
        return [compose(invert(a), b) for a, b in zip(self.poses[:-1], self.poses[1:])]


def chain_relative_poses(relatives, start=None):
    """Accumulate increments from ``start`` (identity by default): ``P_{k+1} = P_k T_k``."""
    poses = [start if start is not None else Pose6.identity()]
    for rel in relatives:
        poses.append(compose(poses[-1], rel))
    return Trajectory(poses)


@dataclass(frozen=True)
class Alignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float
    mode: str

    def apply(self, traj):
        out = []
        for p in traj.poses:
            R = self.rotation @ p.rotation_matrix
            t = self.scale * self.rotation @ p.translation + self.translation
            out.append(Pose6(rotation_log(R), t))
        return Trajectory(out, traj.indices)


def umeyama_align(est, gt, mode="sim3"):
    """Least-squares ``gt ≈ s R est + t`` on camera positions.

    ``mode`` is ``"sim3"`` (similarity) or ``"se3"`` (scale fixed to 1).
    Returns ``(aligned_trajectory, Alignment)``; ``Alignment.residual`` is
    the RMS position error after alignment.
    """
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    x = est.positions()
    y = gt.positions()
    if len(x) != len(y):
        raise DimensionError(f"trajectories differ in length ({len(x)} vs {len(y)})")
    if len(x) < 3:
        raise DegenerateInputError("alignment needs at least three poses")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    for pts, name in ((xc, "estimate"), (yc, "ground truth")):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise RankDeficiencyError(f"{name} positions are collinear; rotation is not unique")
    n = len(x)
    cov = yc.T @ xc / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if mode == "sim3":
        var_x = (xc**2).sum() / n
        s = float(np.trace(np.diag(d) @ S) / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    resid = y - (s * x @ R.T + t)
    align = Alignment(s, R, t, float(np.sqrt((resid**2).sum(axis=1).mean())), mode)
    return align.apply(est), align


# -- KITTI odometry errors ------------------------------------------------------------


@dataclass
class TrajEvalReport:
    t_err: float
    r_err: float
    segments: list = field(default_factory=list)
    lengths: tuple = DESK_LENGTHS
    empty: bool = False
    alignment: str = "none"

    def to_dict(self):
        d = asdict(self)
        d["lengths"] = list(self.lengths)
        return d


def path_distances(traj):
    pos = traj.positions()
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angle(R):
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def kitti_odometry_errors(est, gt, lengths=DESK_LENGTHS, step=1):
    """Average relative translation (%) and rotation (deg per 100 units) errors.

    For each start frame (every ``step`` frames) and each subsequence length,
    the first frame whose ground-truth path distance reaches that length
    closes the segment (so on an evenly sampled path the segment spans exactly
    the nominal length); the error is ``inv(delta_est) @ delta_gt``.
    """
    if len(est) != len(gt):
        raise DimensionError(f"trajectories differ in length ({len(est)} vs {len(gt)})")
    if len(gt) < 2:
        raise DegenerateInputError("trajectory needs at least two poses")
    lengths = tuple(lengths)
    dist = path_distances(gt)
    E = est.matrices()
    G = gt.matrices()
    segments = []
    for first in range(0, len(gt), step):
        for length in lengths:
            reach = np.nonzero(dist >= dist[first] + length - 1e-9 * max(1.0, length))[0]
            if len(reach) == 0:
                continue
            last = int(reach[0])
            dg = np.linalg.inv(G[first]) @ G[last]
            de = np.linalg.inv(E[first]) @ E[last]
            err = np.linalg.inv(de) @ dg
            segments.append({
                "first": first,
                "length": float(length),
                "t_err": float(np.linalg.norm(err[:3, 3]) / length),
                "r_err": _rotation_angle(err[:3, :3]) / length,
            })
    if not segments:
        warnings.warn("trajectory is shorter than the smallest subsequence length", RuntimeWarning)
        return TrajEvalReport(0.0, 0.0, [], lengths, empty=True)
    t_err = 100.0 * float(np.mean([s["t_err"] for s in segments]))
    r_err = 100.0 * np.degrees(float(np.mean([s["r_err"] for s in segments])))
    return TrajEvalReport(t_err, r_err, segments, lengths)
