"""Photometric, geometric and adversarial losses with analytic gradients.

Every loss returns its scalar value together with the gradients needed by the
trainer. Reductions use fixed-order numpy sums so repeated evaluations are
bit-identical.
"""

import json
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from ._validation import check_field, check_image, check_mask, check_same_hw, check_same_shape
from .exceptions import ConfigError, DegenerateInputError, DimensionError, DomainError
from .geometry import DepthField, project_grad
from .sampling import WarpResult, bilinear_sample_grad

LOG_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 0.85
    alpha4: float = 0.2
    phi: float = 0.5
    beta: float = 0.3
    gamma: float = 0.0001
    theta: float = 0.9

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {f.name} must be finite and non-negative, got {value}")
        if self.alpha3 > 1 or self.alpha4 > 1:
            raise ConfigError("alpha3 and alpha4 must lie in [0, 1]")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Variant:
    """One ablation configuration of the generator objective."""

    name: str
    label: str
    use_scale: bool
    use_gan: bool
    use_mask: bool
    mask_processing: str  # "none", "float" or "boolean"


VARIANTS = {
    v.name: v
    for v in (
        Variant("basic", "L_basic", False, False, False, "none"),
        Variant("basic-scale", "L_basic + L_scale", True, False, False, "none"),
        Variant("basic-gan", "L_basic + L_GAN", False, True, False, "none"),
        Variant("basic-scale-gan", "L_basic + L_scale + L_GAN", True, True, False, "none"),
        Variant("mask", "L^m_basic + L_scale + L_GAN + L_mask", True, True, True, "none"),
        Variant("full-fmp", "L^m_basic + L_scale + L^Mf_GAN + L_mask", True, True, True, "float"),
        Variant("full-bmp", "L^m_basic + L_scale + L^Mb_GAN + L_mask", True, True, True, "boolean"),
    )
}


def get_variant(name):
    if isinstance(name, Variant):
        return name
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose one of {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class SsimParams:
    window: int = 3
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("SSIM window must be odd and >= 1")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("SSIM constants must be positive")


@dataclass(frozen=True, eq=False)
class MaskField:
    """Floating-point mask ``m`` and, once thresholded, its Boolean companion."""

    m: np.ndarray
    boolean: np.ndarray = None

    @property
    def shape(self):
        return self.m.shape


# -- SSIM -------------------------------------------------------------------


def _reflect_index(i, n):
    """Mirror an out-of-range index without repeating the edge sample."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@lru_cache(maxsize=64)
def _box_matrix(n, window):
    half = window // 2
    A = np.zeros((n, n))
    for i in range(n):
        for k in range(-half, half + 1):
            A[i, _reflect_index(i + k, n)] += 1.0 / window
    A.setflags(write=False)
    return A


def box_filter(x, window):
    """Uniform ``window x window`` mean with mirror padding, per channel."""
    Ar = _box_matrix(x.shape[0], window)
    Ac = _box_matrix(x.shape[1], window)
    h, w, c = x.shape
    rows = (Ar @ x.reshape(h, w * c)).reshape(h, w, c)
    return np.matmul(Ac, rows)


def box_filter_adjoint(g, window):
    Ar = _box_matrix(g.shape[0], window)
    Ac = _box_matrix(g.shape[1], window)
    h, w, c = g.shape
    rows = (Ar.T @ g.reshape(h, w * c)).reshape(h, w, c)
    return np.matmul(Ac.T, rows)


def _ssim_forward(a, b, params):
    w = params.window
    mu_a = box_filter(a, w)
    mu_b = box_filter(b, w)
    s_aa = box_filter(a * a, w)
    s_bb = box_filter(b * b, w)
    s_ab = box_filter(a * b, w)
    var_a = s_aa - mu_a**2
    var_b = s_bb - mu_b**2
    cov = s_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + params.c1
    n2 = 2 * cov + params.c2
    d1 = mu_a**2 + mu_b**2 + params.c1
    d2 = var_a + var_b + params.c2
    s = n1 * n2 / (d1 * d2)
    return s, (mu_a, mu_b, n1, n2, d1, d2)


def _ssim_backward(a, b, params, s, cache, upstream):
    """Gradient of ``sum(upstream * s)`` for per-channel SSIM ``s``."""
    mu_a, mu_b, n1, n2, d1, d2 = cache
    w = params.window
    g_n1 = upstream * n2 / (d1 * d2)
    g_n2 = upstream * n1 / (d1 * d2)
    g_d1 = -upstream * s / d1
    g_d2 = -upstream * s / d2
    g_mu_a = 2 * mu_b * g_n1 - 2 * mu_b * g_n2 + 2 * mu_a * g_d1 - 2 * mu_a * g_d2
    g_mu_b = 2 * mu_a * g_n1 - 2 * mu_a * g_n2 + 2 * mu_b * g_d1 - 2 * mu_b * g_d2
    g_s_ab = box_filter_adjoint(2 * g_n2, w)
    g_s_sq = box_filter_adjoint(g_d2, w)
    grad_a = box_filter_adjoint(g_mu_a, w) + 2 * a * g_s_sq + b * g_s_ab
    grad_b = box_filter_adjoint(g_mu_b, w) + 2 * b * g_s_sq + a * g_s_ab
    return grad_a, grad_b


def ssim_map(a, b, params=SsimParams()):
    """Per-pixel SSIM over ``window x window`` uniform windows, averaged over channels."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b, ("a", "b"))
    s, _ = _ssim_forward(a, b, params)
    return s.mean(axis=-1)


def ssim_map_grad(a, b, upstream, params=SsimParams()):
    """Return ``(ssim_map, grad_a, grad_b)`` for the scalar ``sum(upstream * ssim_map)``."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b, ("a", "b"))
    s, cache = _ssim_forward(a, b, params)
    c = a.shape[2]
    up = np.repeat(np.asarray(upstream, dtype=np.float64)[:, :, None] / c, c, axis=2)
    ga, gb = _ssim_backward(a, b, params, s, cache, up)
    return s.mean(axis=-1), ga, gb


# -- photometric reconstruction ---------------------------------------------


def _residual_map(target, synth, valid, alpha, params):
    """Per-pixel ``alpha (1 - SSIM)/2 + (1 - alpha) L1`` and its SSIM pieces.

    The target is zero-filled wherever the synthesized image is invalid so
    that SSIM windows straddling a hole see the same hole in both inputs.
    """
    target_z = target * valid[..., None]
    s, cache = _ssim_forward(target_z, synth, params)
    ssim = s.mean(axis=-1)
    l1 = np.abs(target - synth).mean(axis=-1)
    return alpha * (1 - ssim) / 2 + (1 - alpha) * l1, (target_z, s, cache)


def masked_reconstruction_loss(target, synth, mask, w=LossWeights(), ssim_params=SsimParams()):
    """Mask-weighted photometric loss averaged over the valid pixels.

    Returns ``(value, grad_synth, grad_mask)`` where ``grad_synth`` has the
    image's shape and ``grad_mask`` is ``(H, W)``.
    """
    target = check_image(target, "target")
    if not isinstance(synth, WarpResult):
        synth = WarpResult(check_image(synth, "synth"), np.ones(target.shape[:2], dtype=bool))
    image = check_image(synth.image, "synth")
    check_same_shape(target, image, ("target", "synth"))
    valid = np.asarray(synth.validity, dtype=bool)
    m = mask.m if isinstance(mask, MaskField) else mask
    m = check_mask(m, target.shape[:2])
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("no valid pixels in the synthesized image")

    a3 = w.alpha3
    resid, (target_z, s, cache) = _residual_map(target, image, valid, a3, ssim_params)
    weight = m * valid
    value = float((weight * resid).sum() / n)

    c = target.shape[2]
    g_pix = weight / n
    up = np.repeat((-a3 / 2 * g_pix / c)[..., None], c, axis=2)
    _, g_synth = _ssim_backward(target_z, image, ssim_params, s, cache, up)
    g_synth = g_synth + (1 - a3) / c * np.sign(image - target) * g_pix[..., None]
    g_mask = resid * valid / n
    return value, g_synth, g_mask


def reconstruction_loss(target, synth, w=LossWeights(), ssim_params=SsimParams()):
    """Photometric loss averaged over the valid pixels; returns ``(value, grad_synth)``."""
    target = check_image(target, "target")
    value, g_synth, _ = masked_reconstruction_loss(
        target, synth, np.ones(target.shape[:2]), w, ssim_params
    )
    return value, g_synth


# -- smoothness --------------------------------------------------------------


def _second_differences(x):
    """Interior second differences along u (columns) and v (rows)."""
    xuu = x[1:-1, :-2] - 2 * x[1:-1, 1:-1] + x[1:-1, 2:]
    xvv = x[:-2, 1:-1] - 2 * x[1:-1, 1:-1] + x[2:, 1:-1]
    return xuu, xvv


def _second_difference_adjoint(guu, gvv, shape):
    g = np.zeros(shape)
    g[1:-1, :-2] += guu
    g[1:-1, 1:-1] -= 2 * guu
    g[1:-1, 2:] += guu
    g[:-2, 1:-1] += gvv
    g[1:-1, 1:-1] -= 2 * gvv
    g[2:, 1:-1] += gvv
    return g


def smoothness_loss(depth, image, normalize=False):
    """Edge-aware second-order depth smoothness; returns ``(value, grad_depth)``.

    With ``normalize=True`` the depth is divided by its mean first, which
    makes the penalty invariant to the global (unobservable) depth scale.
    """
    d = depth.depth if isinstance(depth, DepthField) else check_field(depth, "depth")
    image = check_image(image, "image")
    check_same_hw(d, image, ("depth", "image"))
    if d.shape[0] < 3 or d.shape[1] < 3:
        raise DimensionError("smoothness needs at least a 3x3 grid")

    mu = d.mean() if normalize else 1.0
    dn = d / mu
    iuu, ivv = _second_differences(image)
    wu = np.exp(-np.abs(iuu).mean(axis=-1))
    wv = np.exp(-np.abs(ivv).mean(axis=-1))
    duu, dvv = _second_differences(dn)
    n = duu.size
    value = float((np.abs(duu) * wu + np.abs(dvv) * wv).sum() / n)

    g = _second_difference_adjoint(np.sign(duu) * wu / n, np.sign(dvv) * wv / n, d.shape)
    if normalize:
        g = g / mu - (g * dn).sum() / (mu * d.size)
    return value, g


# -- mask terms ---------------------------------------------------------------


def mask_regularization(mask):
    """Mean binary cross-entropy of the mask against an all-ones label."""
    m = mask.m if isinstance(mask, MaskField) else mask
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise DomainError("mask contains non-finite values")
    mc = np.clip(m, LOG_EPS, 1 - LOG_EPS)
    value = float(-np.log(mc).sum() / m.size)
    inside = (m > LOG_EPS) & (m < 1 - LOG_EPS)
    return value, np.where(inside, -1.0 / (mc * m.size), 0.0)


def boolean_mask(mask, theta=LossWeights.theta):
    """Threshold the floating-point mask: 1 where ``|m| > theta``, else 0."""
    m = mask.m if isinstance(mask, MaskField) else np.asarray(mask, dtype=np.float64)
    if not 0 < theta < 1:
        raise DomainError("theta must lie in (0, 1)")
    return MaskField(m, (np.abs(m) > theta).astype(np.float64))


def apply_mask(img, mask, mode="boolean"):
    """Multiply an image by the Boolean (``mode="boolean"``) or float mask."""
    img = check_image(img, "img")
    if not isinstance(mask, MaskField):
        mask = MaskField(np.asarray(mask, dtype=np.float64))
    if mode == "boolean":
        if mask.boolean is None:
            raise DomainError("mask has no Boolean part; call boolean_mask first")
        factor = mask.boolean
    elif mode == "float":
        factor = mask.m
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    factor = check_mask(factor, img.shape[:2])
    return img * factor[..., None]


# -- scale consistency --------------------------------------------------------


def scale_consistency_loss(depth_t, depth_s, pose, K, w=LossWeights(), ssim_params=SsimParams()):
    """Agreement between the target depth seen from the source and the source depth.

    Returns ``(value, grad_depth_t, grad_depth_s, grad_pose)``. Both depth
    fields are divided by their joint mean over the valid pixels before the
    SSIM and L1 terms, so only their relative scale is penalized.
    """
    dt = depth_t.depth if isinstance(depth_t, DepthField) else check_field(depth_t, "depth_t", positive=True)
    ds = depth_s.depth if isinstance(depth_s, DepthField) else check_field(depth_s, "depth_s", positive=True)
    check_same_shape(dt, ds, ("depth_t", "depth_s"))
    grid, z, jac = project_grad(dt, pose, K)
    sampled, bjac = bilinear_sample_grad(ds, grid)
    valid = sampled.validity
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("no target pixel projects inside the source view")

    a = np.where(valid, z, 0.0)[..., None]
    b = sampled.image
    mu = (a.sum() + b.sum()) / (2 * n)
    an, bn = a / mu, b / mu
    s, cache = _ssim_forward(an, bn, ssim_params)
    a4 = w.alpha4
    resid = a4 * (1 - s[..., 0]) / 2 + (1 - a4) * np.abs(an - bn)[..., 0]
    value = float((resid * valid).sum() / n)

    up = (-a4 / 2 * valid / n)[..., None]
    g_an, g_bn = _ssim_backward(an, bn, ssim_params, s, cache, up)
    sgn = np.sign(an - bn) * ((1 - a4) * valid / n)[..., None]
    g_an = g_an + sgn
    g_bn = g_bn - sgn
    c = ((g_an * a).sum() + (g_bn * b).sum()) / (mu * mu * 2 * n)
    g_a = (g_an / mu - c)[..., 0] * valid
    g_b = (g_bn / mu - c) * valid[..., None]

    g_u, g_v = bjac.grid_vjp(g_b)
    grad_ds = bjac.src_vjp(g_b)[..., 0]
    grad_dt, grad_pose = jac.vjp(g_u, g_v, g_a)
    return value, grad_dt, grad_ds, grad_pose


# -- adversarial ---------------------------------------------------------------


@dataclass(frozen=True)
class GanLosses:
    disc_loss: float
    gen_loss: float
    grad_disc_real: np.ndarray
    grad_disc_fake: np.ndarray
    grad_gen_fake: np.ndarray


def gan_losses(d_real, d_fake, generator="non_saturating"):
    """Discriminator and generator losses from per-sample discriminator outputs.

    ``disc_loss = -mean[log d_real] - mean[log(1 - d_fake)]``. The generator
    loss is ``-mean[log d_fake]`` (``"non_saturating"``) or
    ``mean[log(1 - d_fake)]`` (``"minimax"``). Gradients are taken with
    respect to the discriminator outputs; outputs are clamped to
    ``[LOG_EPS, 1 - LOG_EPS]`` and clamped entries receive zero gradient.
    """
    d_real = np.atleast_1d(np.asarray(d_real, dtype=np.float64))
    d_fake = np.atleast_1d(np.asarray(d_fake, dtype=np.float64))
    r = np.clip(d_real, LOG_EPS, 1 - LOG_EPS)
    f = np.clip(d_fake, LOG_EPS, 1 - LOG_EPS)
    in_r = (d_real > LOG_EPS) & (d_real < 1 - LOG_EPS)
    in_f = (d_fake > LOG_EPS) & (d_fake < 1 - LOG_EPS)
    nr, nf = r.size, f.size

    disc = float(-np.log(r).sum() / nr - np.log1p(-f).sum() / nf)
    g_real = np.where(in_r, -1.0 / (r * nr), 0.0)
    g_fake_d = np.where(in_f, 1.0 / ((1 - f) * nf), 0.0)
    if generator == "non_saturating":
        gen = float(-np.log(f).sum() / nf)
        g_fake_g = np.where(in_f, -1.0 / (f * nf), 0.0)
    elif generator == "minimax":
        gen = float(np.log1p(-f).sum() / nf)
        g_fake_g = np.where(in_f, -1.0 / ((1 - f) * nf), 0.0)
    else:
        raise ValueError(f"unknown generator objective {generator!r}")
    return GanLosses(disc, gen, g_real, g_fake_d, g_fake_g)


# -- total --------------------------------------------------------------------

TERMS = ("rec", "smooth", "scale", "mask", "gan")


def term_coefficients(weights, variant):
    """Weight of each loss term in the generator objective for ``variant``."""
    variant = get_variant(variant)
    return {
        "rec": weights.alpha * weights.alpha1,
        "smooth": weights.alpha * weights.alpha2,
        "scale": weights.phi if variant.use_scale else 0.0,
        "mask": weights.beta if variant.use_mask else 0.0,
        "gan": weights.gamma if variant.use_gan else 0.0,
    }


def total_generator_loss(terms, weights=LossWeights(), variant="full-bmp", grads=None):
    """Combine per-term values (and optionally per-term gradients).

    ``terms`` maps term names from :data:`TERMS` to scalars; missing terms
    count as zero. ``grads`` maps term names to ``{param_name: array}``.
    Returns ``(value, combined_grads)``; ``combined_grads`` is None when no
    gradients were given.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    coef = term_coefficients(weights, variant)
    value = float(sum(coef[k] * float(terms.get(k, 0.0)) for k in TERMS))
    if grads is None:
        return value, None
    combined = {}
    for k in TERMS:
        if k not in grads or coef[k] == 0.0:
            continue
        for name, g in grads[k].items():
            if name in combined:
                combined[name] = combined[name] + coef[k] * g
            else:
                combined[name] = coef[k] * np.asarray(g, dtype=np.float64)
    return value, combined
