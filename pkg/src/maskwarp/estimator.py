"""scikit-learn style front end: fit depth, pose and masks to one frame sequence."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .evaluation import depth_metrics
from .exceptions import ConfigError, DimensionError
from .geometry import Intrinsics
from .losses import LossWeights, get_variant
from .training import Snippet, TrainConfig, Trainer, centered_snippet


def _as_frames(X):
    frames = list(X)
    if len(frames) < 2:
        raise DimensionError("need at least two frames")
    frames = [check_image(f, f"frame {i}") for i, f in enumerate(frames)]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {f.shape}, expected {shape}")
    return frames


class SnippetDepthEstimator(BaseEstimator):
    """Jointly optimize per-frame depth, per-pair pose and explainability masks.

    The estimator is transductive: ``fit`` optimizes directly on the frames it
    is given and ``predict`` returns the depth of those same frames.

    Parameters
    ----------
    variant : str
        Loss configuration, e.g. ``"basic"``, ``"mask"``, ``"full-bmp"``.
    n_steps : int
        Number of alternating optimization steps.
    intrinsics : Intrinsics or None
        Camera model; defaults to a centred pinhole with focal ``0.9 * width``.
    snippets : list of (target, sources) or None
        Defaults to the middle frame reconstructed from all others.
    lr, pose_lr, rotation_lr_scale, init_depth : float
        Optimizer settings (see :class:`maskwarp.training.TrainConfig`).
    weights : LossWeights or None
    seed : int
    """

    def __init__(self, variant="full-bmp", n_steps=1500, intrinsics=None, snippets=None, lr=0.02, pose_lr=0.002,
                 rotation_lr_scale=0.05, init_depth=5.0, weights=None, seed=0):
        self.variant = variant
        self.n_steps = n_steps
        self.intrinsics = intrinsics
        self.snippets = snippets
        self.lr = lr
        self.pose_lr = pose_lr
        self.rotation_lr_scale = rotation_lr_scale
        self.init_depth = init_depth
        self.weights = weights
        self.seed = seed

    def _validate_params(self):
        get_variant(self.variant)
        if not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        for name in ("lr", "pose_lr", "rotation_lr_scale", "init_depth"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def fit(self, X, y=None, callback=None):
        """Optimize on frames ``X`` (sequence of ``(H, W, C)`` images); ``y`` is ignored."""
        self._validate_params()
        frames = _as_frames(X)
        h, w = frames[0].shape[:2]
        K = self.intrinsics
        if K is None:
            K = Intrinsics(0.9 * w, 0.9 * w, (w - 1) / 2, (h - 1) / 2, w, h)
        snippets = self.snippets
        if snippets is None:
            snippets = [centered_snippet(len(frames))]
        else:
            snippets = [s if isinstance(s, Snippet) else Snippet(s[0], tuple(s[1])) for s in snippets]
        config = TrainConfig(lr=self.lr, pose_lr=self.pose_lr, rotation_lr_scale=self.rotation_lr_scale,
                             init_depth=self.init_depth, seed=self.seed)
        trainer = Trainer(frames, K, snippets, self.variant, self.weights or LossWeights(), config,
                          n_steps=self.n_steps)
        self.history_ = trainer.run(self.n_steps, callback)
        self.trainer_ = trainer
        self.intrinsics_ = K
        self.snippets_ = snippets
        self.n_frames_ = len(frames)
        self._fit_frames = frames
        self.depth_ = {f: trainer.depth(f) for f in trainer.params.depth_raw}
        self.poses_ = {(s.target, src): trainer.pose(i, j)
                       for i, s in enumerate(snippets) for j, src in enumerate(s.sources)}
        self.masks_ = {(s.target, src): trainer.mask(i, j)
                       for i, s in enumerate(snippets) for j, src in enumerate(s.sources)}
        return self

    def _check_same_frames(self, X):
        if X is None:
            return
        frames = _as_frames(X)
        if len(frames) != self.n_frames_ or any(
            not np.array_equal(a, b) for a, b in zip(frames, self._fit_frames)
        ):
            raise ValueError("this estimator is transductive: predict only on the frames passed to fit")

    def predict(self, X=None):
        """Depth maps ``(n_targets, H, W)`` of the snippet target frames."""
        check_is_fitted(self, "depth_")
        self._check_same_frames(X)
        return np.stack([self.depth_[s.target] for s in self.snippets_])

    def score(self, X, y):
        """Negative median-scaled Abs Rel against ground-truth depths ``y``.

        ``y`` is either one depth map per frame of ``X`` or one per target.
        """
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == self.n_frames_ and len(y) != len(pred):
            y = y[[s.target for s in self.snippets_]]
        if y.shape != pred.shape:
            raise DimensionError(f"ground truth {y.shape} does not match predictions {pred.shape}")
        errs = [depth_metrics(p, g, median_scaling=True).abs_rel for p, g in zip(pred, y)]
        return -float(np.mean(errs))


__all__ = ["SnippetDepthEstimator", "NotFittedError"]
