"""Alternating discriminator/generator optimization over frame snippets."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_image
from .exceptions import ConfigError, NumericalError
from .geometry import Pose6, project_grad
from .io import write_png
from .losses import (
    LossWeights,
    SsimParams,
    gan_losses,
    get_variant,
    mask_regularization,
    masked_reconstruction_loss,
    scale_consistency_loss,
    smoothness_loss,
    total_generator_loss,
)
from .nn import (
    AdamState,
    Discriminator,
    GeneratorParams,
    adam_step,
    extract_patches,
    patches_adjoint,
    save_checkpoint,
)
from .sampling import bilinear_sample_grad


@dataclass(frozen=True)
class Snippet:
    """One target frame and the source frames it is reconstructed from."""

    target: int
    sources: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))
        if not self.sources:
            raise ConfigError("a snippet needs at least one source frame")
        if self.target in self.sources:
            raise ConfigError("a snippet's target cannot also be one of its sources")


def centered_snippet(n_frames):
    """Middle frame as target, all other frames as sources."""
    mid = n_frames // 2
    return Snippet(mid, tuple(i for i in range(n_frames) if i != mid))


@dataclass
class TrainConfig:
    lr: float = 0.02
    pose_lr: float = 0.002
    rotation_lr_scale: float = 0.05
    lr_final_ratio: float = 0.02
    disc_lr: float = 0.0002
    init_depth: float = 5.0
    init_mask_logit: float = 4.0
    depth_noise: float = 0.0
    pose_noise: float = 0.0
    smooth_normalize: bool = True
    generator_objective: str = "non_saturating"
    patch_size: int = 8
    disc_hidden: tuple = (64, 32)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["disc_hidden"] = list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "disc_hidden" in d:
            d["disc_hidden"] = tuple(d["disc_hidden"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _PairForward:
    snippet: int
    j: int
    source: int
    target: int
    warp: object
    bjac: object
    grid: object
    z: np.ndarray
    jac: object
    mask_raw: np.ndarray = None
    mask_slope: np.ndarray = None
    factor: np.ndarray = None
    real: np.ndarray = None
    fake: np.ndarray = None


@dataclass
class LossReport:
    step: int
    total: float
    terms: dict
    rec_plain: float
    disc_loss: float = None
    extra: dict = field(default_factory=dict)

    def as_row(self):
        row = {"step": self.step, "total": self.total, "rec_plain": self.rec_plain}
        row.update({f"L_{k}": v for k, v in self.terms.items()})
        if self.disc_loss is not None:
            row["disc_loss"] = self.disc_loss
        return row


class Trainer:
    """Direct optimization of depth, pose and mask parameters for a set of snippets.

    Every frame has one depth field shared by all snippets that use it, so a
    frame that is the target of one snippet and a source of another couples
    the two through the scale-consistency term.
    """

    def __init__(self, frames, K, snippets=None, variant="full-bmp", weights=None, config=None,
                 ssim_params=None, n_steps=None):
        self.frames = [check_image(f, f"frame {i}") for i, f in enumerate(frames)]
        for f in self.frames:
            if f.shape[:2] != K.shape:
                raise ConfigError(f"frame shape {f.shape[:2]} does not match intrinsics {K.shape}")
        self.K = K
        self.snippets = list(snippets) if snippets is not None else [centered_snippet(len(frames))]
        for sn in self.snippets:
            for f in (sn.target, *sn.sources):
                if not 0 <= f < len(frames):
                    raise ConfigError(f"snippet references missing frame {f}")
        self.variant = get_variant(variant)
        self.weights = weights or LossWeights()
        self.config = config or TrainConfig()
        self.ssim_params = ssim_params or SsimParams()
        self.n_steps = n_steps

        pairs = [(i, j) for i, sn in enumerate(self.snippets) for j in range(len(sn.sources))]
        used = sorted({f for sn in self.snippets for f in (sn.target, *sn.sources)})
        cfg = self.config
        self.params = GeneratorParams.initialize(
            used, pairs, K.shape, init_depth=cfg.init_depth, init_mask_logit=cfg.init_mask_logit,
            pose_noise=cfg.pose_noise, depth_noise=cfg.depth_noise, seed=cfg.seed,
        )
        channels = self.frames[0].shape[2]
        sizes = (cfg.patch_size * cfg.patch_size * channels, *cfg.disc_hidden, 1)
        self.disc = Discriminator(sizes, seed=cfg.seed + 1)
        self.field_adam = AdamState(lr=cfg.lr)
        self.pose_adam = AdamState(lr=cfg.pose_lr)
        self.disc_adam = AdamState(lr=cfg.disc_lr)
        self.step_count = 0

    # -- parameters --------------------------------------------------------

    def pose(self, snippet, j):
        return Pose6.from_vector(self.params.poses[(snippet, j)].values)

    def depth(self, frame):
        return self.params.depth(frame)[0]

    def mask(self, snippet, j):
        return self.params.mask((snippet, j))[0]

    # -- forward -------------------------------------------------------------

    def _forward(self):
        v = self.variant
        out = []
        for i, sn in enumerate(self.snippets):
            dt = self.depth(sn.target)
            for j, s in enumerate(sn.sources):
                grid, z, jac = project_grad(dt, self.pose(i, j), self.K)
                warp, bjac = bilinear_sample_grad(self.frames[s], grid)
                pf = _PairForward(i, j, s, sn.target, warp, bjac, grid, z, jac)
                valid = warp.validity.astype(np.float64)
                if v.use_mask:
                    raw, slope = self.params.mask((i, j))
                    pf.mask_raw, pf.mask_slope = raw, slope
                if v.use_gan:
                    if v.mask_processing == "none":
                        factor = np.ones(self.K.shape)
                    elif v.mask_processing == "float":
                        factor = pf.mask_raw * valid
                    else:
                        factor = ((pf.mask_raw * valid) > self.weights.theta).astype(np.float64)
                    pf.factor = factor
                    pf.real = self.frames[sn.target] * factor[..., None]
                    pf.fake = warp.image * factor[..., None]
                out.append(pf)
        return out

    def _disc_patches(self, fw):
        ps = self.config.patch_size
        real = np.concatenate([extract_patches(pf.real, ps) for pf in fw])
        fake = np.concatenate([extract_patches(pf.fake, ps) for pf in fw])
        return real, fake

    def discriminator_step(self, fw):
        real, fake = self._disc_patches(fw)
        p_real, c_real = self.disc.forward(real)
        p_fake, c_fake = self.disc.forward(fake)
        gl = gan_losses(p_real, p_fake, self.config.generator_objective)
        self.disc.zero_grad()
        self.disc.backward(c_real, gl.grad_disc_real)
        self.disc.backward(c_fake, gl.grad_disc_fake)
        adam_step(self.disc_adam, self.disc.parameters())
        return gl.disc_loss

    def generator_objective(self, fw=None):
        """Return ``(total, terms, grads, rec_plain)`` at the current parameters.

        ``grads`` maps each term name to ``{param_name: gradient}`` with
        respect to the raw (optimized) parameters.
        """
        if fw is None:
            fw = self._forward()
        v = self.variant
        w = self.weights
        n_pairs = len(fw)
        names = {f: f"depth/{f}" for f in self.params.depth_raw}
        terms = {k: 0.0 for k in ("rec", "smooth", "scale", "mask", "gan")}
        # per term: gradients on metric depth, pose vectors and mask values
        g_depth = {k: {} for k in terms}
        g_pose = {k: {} for k in terms}
        g_mask = {k: {} for k in terms}
        rec_plain = 0.0

        def add(store, key, value):
            store[key] = store[key] + value if key in store else value

        def push_synth(term, pf, g_img):
            g_u, g_v = pf.bjac.grid_vjp(g_img)
            gd, gp = pf.jac.vjp(g_u, g_v, np.zeros_like(g_u))
            add(g_depth[term], pf.target, gd)
            add(g_pose[term], (pf.snippet, pf.j), gp)

        gan_cache = []
        for pf in fw:
            valid = pf.warp.validity
            target = self.frames[pf.target]
            m = pf.mask_raw * valid if v.use_mask else np.ones(self.K.shape)
            val, g_synth, g_m = masked_reconstruction_loss(target, pf.warp, m, w, self.ssim_params)
            terms["rec"] += val / n_pairs
            rec_plain += float(g_m.sum()) / n_pairs
            push_synth("rec", pf, g_synth / n_pairs)
            if v.use_mask:
                add(g_mask["rec"], (pf.snippet, pf.j), g_m * valid / n_pairs)
                mv, mg = mask_regularization(pf.mask_raw)
                terms["mask"] += mv / n_pairs
                add(g_mask["mask"], (pf.snippet, pf.j), mg / n_pairs)
            if v.use_scale:
                sv, gdt, gds, gp = scale_consistency_loss(
                    self.depth(pf.target), self.depth(pf.source), self.pose(pf.snippet, pf.j), self.K,
                    w, self.ssim_params,
                )
                terms["scale"] += sv / n_pairs
                add(g_depth["scale"], pf.target, gdt / n_pairs)
                add(g_depth["scale"], pf.source, gds / n_pairs)
                add(g_pose["scale"], (pf.snippet, pf.j), gp / n_pairs)
            if v.use_gan:
                gan_cache.append(pf)

        if v.use_gan and gan_cache:
            ps = self.config.patch_size
            fake = np.concatenate([extract_patches(pf.fake, ps) for pf in gan_cache])
            p_fake, c_fake = self.disc.forward(fake)
            p_real, _ = self.disc.forward(np.concatenate([extract_patches(pf.real, ps) for pf in gan_cache]))
            gl = gan_losses(p_real, p_fake, self.config.generator_objective)
            terms["gan"] = gl.gen_loss
            # Only the input gradient is wanted here; keep discriminator grads untouched.
            saved = {k: p.grads.copy() for k, p in self.disc.parameters().items()}
            g_in = self.disc.backward(c_fake, gl.grad_gen_fake)
            for k, p in self.disc.parameters().items():
                p.grads[...] = saved[k]
            per = len(g_in) // len(gan_cache)
            for idx, pf in enumerate(gan_cache):
                g_fake = patches_adjoint(g_in[idx * per:(idx + 1) * per], pf.fake.shape, ps)
                push_synth("gan", pf, g_fake * pf.factor[..., None])
                if v.mask_processing == "float":
                    g_factor = (g_fake * pf.warp.image).sum(axis=-1)
                    add(g_mask["gan"], (pf.snippet, pf.j), g_factor * pf.warp.validity)

        for i, sn in enumerate(self.snippets):
            sv, gd = smoothness_loss(self.depth(sn.target), self.frames[sn.target],
                                     normalize=self.config.smooth_normalize)
            terms["smooth"] += sv / len(self.snippets)
            add(g_depth["smooth"], sn.target, gd / len(self.snippets))

        grads = {}
        for term in terms:
            g = {}
            for f, gd in g_depth[term].items():
                g[names[f]] = gd * self.params.depth(f)[1]
            for (i, j), gp in g_pose[term].items():
                g[f"pose/{i}/{j}"] = gp
            for (i, j), gm in g_mask[term].items():
                g[f"mask/{i}/{j}"] = gm * self.params.mask((i, j))[1]
            grads[term] = g
        active = {k: terms[k] for k in terms}
        total, _ = total_generator_loss(active, w, v)
        return total, terms, grads, rec_plain

    # -- optimization ------------------------------------------------------------

    def _lr_factor(self):
        if not self.n_steps:
            return 1.0
        r = self.config.lr_final_ratio
        frac = min(self.step_count / max(self.n_steps - 1, 1), 1.0)
        return r + (1 - r) * 0.5 * (1 + math.cos(math.pi * frac))

    def step(self):
        """One discriminator update (GAN variants only), then one generator update."""
        fw = self._forward()
        disc_loss = self.discriminator_step(fw) if self.variant.use_gan else None
        total, terms, grads, rec_plain = self.generator_objective(fw)
        for name, value in [("total", total), ("disc", disc_loss), *terms.items()]:
            if value is not None and not np.isfinite(value):
                raise NumericalError(f"loss term {name} became non-finite at step {self.step_count}")
        _, combined = total_generator_loss(terms, self.weights, self.variant, grads)
        named = self.params.named()
        self.params.zero_grad()
        for name, g in combined.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"gradient of {name} became non-finite at step {self.step_count}")
            named[name].grads += g
        factor = self._lr_factor()
        fields_ = {k: p for k, p in named.items() if not k.startswith("pose/")}
        poses = {k: p for k, p in named.items() if k.startswith("pose/")}
        adam_step(self.field_adam, fields_, lr=self.field_adam.lr * factor)
        # Rotation moves pixels roughly focal/depth times faster than translation
        # per unit, so it gets a smaller step to avoid the rotation/translation trap.
        scale = np.r_[np.full(3, self.config.rotation_lr_scale), np.ones(3)]
        adam_step(self.pose_adam, poses, lr=self.pose_adam.lr * factor * scale)
        report_terms = {k: terms[k] for k in terms if self._term_active(k)}
        report = LossReport(self.step_count, total, report_terms, rec_plain, disc_loss)
        self.step_count += 1
        return report

    def _term_active(self, k):
        v = self.variant
        return {"rec": True, "smooth": True, "scale": v.use_scale, "mask": v.use_mask, "gan": v.use_gan}[k]

    def run(self, n_steps=None, callback=None):
        n_steps = n_steps or self.n_steps
        if n_steps is None:
            raise ConfigError("number of steps not given")
        if self.n_steps is None:
            self.n_steps = n_steps
        history = []
        for _ in range(n_steps):
            rep = self.step()
            history.append(rep)
            if callback is not None:
                callback(rep)
        return history

    def checkpoint_arrays(self):
        arrays = self.params.state_dict()
        arrays.update(self.disc.state_dict())
        return arrays

    def optimizers(self):
        return {"field": self.field_adam, "pose": self.pose_adam, "disc": self.disc_adam}


def train_step(trainer):
    """One alternating update (discriminator, then generator); returns a :class:`LossReport`."""
    return trainer.step()


# -- run configuration and outputs -------------------------------------------------------


@dataclass
class RunConfig:
    """Everything needed to reproduce a training run.

    ``scene`` holds the keyword arguments of :func:`maskwarp.scene.build_scene`
    (``kind`` selects the family); it is ignored when frames are supplied
    from a scene directory.
    """

    variant: str = "full-bmp"
    steps: int = 1500
    seed: int = 0
    scene: dict = field(default_factory=lambda: {"kind": "two_plane", "size": 64, "n_frames": 3})
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    snippets: list = None
    output_dir: str = None
    checkpoint_every: int = 0

    def __post_init__(self):
        get_variant(self.variant)
        if int(self.steps) < 1:
            raise ConfigError("steps must be at least 1")
        size = self.scene.get("size")
        if size is not None and int(size) < 16:
            raise ConfigError(f"resolution must be at least 16x16, got {size}")

    def to_dict(self):
        return {
            "variant": self.variant,
            "steps": self.steps,
            "seed": self.seed,
            "scene": dict(self.scene),
            "weights": asdict(self.weights),
            "train": self.train.to_dict(),
            "snippets": None if self.snippets is None else [[s.target, list(s.sources)] for s in self.snippets],
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run configuration keys: {sorted(unknown)}")
        try:
            if "weights" in d:
                d["weights"] = LossWeights.from_dict(d["weights"])
            if "train" in d:
                d["train"] = TrainConfig.from_dict(d["train"])
            if d.get("snippets") is not None:
                d["snippets"] = [Snippet(t, tuple(src)) for t, src in d["snippets"]]
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid run configuration: {exc}") from exc

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_loss_csv(path, history):
    """Per-step losses; floats use exact round-trip formatting, so reruns compare byte for byte."""
    cols = ["step", "total", "rec_plain", "L_rec", "L_smooth", "L_scale", "L_mask", "L_gan", "disc_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rep in history:
            row = rep.as_row()
            w.writerow([rep.step] + [_fmt(row.get(c)) for c in cols[1:]])


def save_trainer_checkpoint(path, trainer, meta=None):
    meta = dict(meta or {})
    meta.update({"step": trainer.step_count, "variant": trainer.variant.name})
    save_checkpoint(path, trainer.checkpoint_arrays(), trainer.optimizers(), meta)


def write_panels(directory, trainer):
    """Per pair: mask, synthesized image and masked target as PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for pf in trainer._forward():
        tag = f"snippet{pf.snippet}_source{pf.j}"
        target = trainer.frames[pf.target]
        if trainer.variant.use_mask:
            mask = trainer.mask(pf.snippet, pf.j) * pf.warp.validity
        else:
            mask = pf.warp.validity.astype(float)
        if trainer.variant.mask_processing == "boolean":
            shown = (mask > trainer.weights.theta).astype(float)
        else:
            shown = mask
        for name, img in (("mask", mask), ("synth", pf.warp.image), ("masked_target", target * shown[..., None])):
            path = directory / f"{tag}_{name}.png"
            write_png(path, img)
            written.append(path)
    return written
