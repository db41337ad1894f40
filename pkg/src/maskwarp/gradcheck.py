"""Central finite-difference verification of every analytic gradient.

Each check builds a small seeded instance, evaluates the analytic gradient,
and compares it with central differences on (a sample of) the inputs. The
relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
"""

import time
from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose6, project, project_grad
from .losses import (
    gan_losses,
    mask_regularization,
    masked_reconstruction_loss,
    reconstruction_loss,
    scale_consistency_loss,
    smoothness_loss,
    ssim_map,
    ssim_map_grad,
    total_generator_loss,
)
from .nn import Discriminator, extract_patches, patches_adjoint, softplus_inverse
from .sampling import WarpResult, bilinear_sample, bilinear_sample_grad

DEFAULT_TOL = 1e-4
_FLOOR = 1e-6


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def relative_error(analytic, numeric, floor=_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f, x, h=1e-6, index=None):
    """Central differences of scalar ``f`` at ``x`` for the flat entries in ``index`` (all if None)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    index = np.arange(flat.size) if index is None else np.asarray(index)
    out = np.empty(len(index))
    for k, i in enumerate(index):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def _sample(rng, n, k):
    return np.arange(n) if k is None or n <= k else np.sort(rng.choice(n, size=k, replace=False))


def check(name, f, x, analytic, rng, h=1e-6, max_entries=None, tol=DEFAULT_TOL):
    idx = _sample(rng, np.size(x), max_entries)
    num = numeric_gradient(f, x, h, idx)
    err = relative_error(np.asarray(analytic).reshape(-1)[idx], num)
    return GradcheckResult(name, err, len(idx), err < tol)


def _off_lattice(rng, shape, lo, hi):
    """Random coordinates whose fractional parts stay away from 0 and 1."""
    base = rng.integers(lo, hi, size=shape).astype(np.float64)
    return base + rng.uniform(0.1, 0.9, size=shape)


# -- individual suites -----------------------------------------------------------------


def _image_checks(rng, n, tol):
    a = rng.uniform(0.05, 0.95, (n, n, 3))
    b = rng.uniform(0.05, 0.95, (n, n, 3))
    up = rng.uniform(0, 1, (n, n))
    _, ga, gb = ssim_map_grad(a, b, up)
    yield check("ssim/a", lambda x: float((ssim_map(x, b) * up).sum()), a, ga, rng, tol=tol)
    yield check("ssim/b", lambda x: float((ssim_map(a, x) * up).sum()), b, gb, rng, tol=tol)

    _, g = reconstruction_loss(a, b)
    yield check("reconstruction/synth", lambda x: reconstruction_loss(a, x)[0], b, g, rng, tol=tol)

    valid = rng.uniform(size=(n, n)) > 0.2
    m = rng.uniform(0.05, 0.95, (n, n))
    synth = b * valid[..., None]

    def rec(x, mask=m):
        return masked_reconstruction_loss(a, WarpResult(x * valid[..., None], valid), mask)[0]

    _, gs, gm = masked_reconstruction_loss(a, WarpResult(synth, valid), m)
    yield check("masked_reconstruction/synth", rec, synth, gs * valid[..., None], rng, tol=tol)
    yield check("masked_reconstruction/mask", lambda x: rec(synth, x), m, gm, rng, tol=tol)

    d = rng.uniform(1.0, 5.0, (n, n))
    for normalize in (False, True):
        _, g = smoothness_loss(d, a, normalize)
        yield check(f"smoothness/normalize={normalize}", lambda x: smoothness_loss(x, a, normalize)[0],
                    d, g, rng, tol=tol)

    mr = rng.uniform(0.05, 0.95, (n, n))
    _, g = mask_regularization(mr)
    yield check("mask_regularization", lambda x: mask_regularization(x)[0], mr, g, rng, tol=tol)


def _geometry_checks(rng, n, tol):
    K = Intrinsics(1.2 * n, 1.2 * n, (n - 1) / 2, (n - 1) / 2, n, n)
    pose = Pose6(rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3))
    dt = rng.uniform(2.0, 4.0, (n, n))
    ds = rng.uniform(2.0, 4.0, (n, n))
    grid, _, jac = project_grad(dt, pose, K)
    for k, label in enumerate(("u", "v", "z")):
        def f_depth(x, k=k):
            g2, z2 = project(x, pose, K)
            return float((g2.coords[..., k] if k < 2 else z2).sum())

        def f_pose(x, k=k):
            g2, z2 = project(dt, Pose6.from_vector(x), K)
            return float((g2.coords[..., k] if k < 2 else z2).sum())

        yield check(f"projection/{label}/depth", f_depth, dt, jac.d_depth[..., k], rng, h=1e-5, tol=tol)
        yield check(f"projection/{label}/pose", f_pose, pose.vector, jac.d_pose[..., k, :].sum(axis=(0, 1)),
                    rng, tol=tol)

    _, gdt, gds, gp = scale_consistency_loss(dt, ds, pose, K)
    yield check("scale/depth_target", lambda x: scale_consistency_loss(x, ds, pose, K)[0], dt, gdt, rng,
                h=1e-5, tol=tol)
    yield check("scale/depth_source", lambda x: scale_consistency_loss(dt, x, pose, K)[0], ds, gds, rng,
                h=1e-5, tol=tol)
    yield check("scale/pose", lambda x: scale_consistency_loss(dt, ds, Pose6.from_vector(x), K)[0],
                pose.vector, gp, rng, tol=tol)

    src = rng.uniform(0.05, 0.95, (n, n, 3))
    coords = np.stack([_off_lattice(rng, (n, n), 0, n - 1), _off_lattice(rng, (n, n), 0, n - 1)], axis=-1)
    up = rng.normal(size=(n, n, 3))
    _, bj = bilinear_sample_grad(src, coords)
    g_u, g_v = bj.grid_vjp(up)
    g_coords = np.stack([g_u, g_v], axis=-1)
    yield check("bilinear/coords", lambda x: float((bilinear_sample(src, x).image * up).sum()), coords,
                g_coords, rng, tol=tol)
    yield check("bilinear/source", lambda x: float((bilinear_sample(x, coords).image * up).sum()), src,
                bj.src_vjp(up), rng, tol=tol)


def _adversarial_checks(rng, n, tol):
    d_real = rng.uniform(0.05, 0.95, 12)
    d_fake = rng.uniform(0.05, 0.95, 12)
    for objective in ("non_saturating", "minimax"):
        gl = gan_losses(d_real, d_fake, objective)
        yield check(f"gan/{objective}/disc_real", lambda x: gan_losses(x, d_fake, objective).disc_loss,
                    d_real, gl.grad_disc_real, rng, tol=tol)
        yield check(f"gan/{objective}/disc_fake", lambda x: gan_losses(d_real, x, objective).disc_loss,
                    d_fake, gl.grad_disc_fake, rng, tol=tol)
        yield check(f"gan/{objective}/generator", lambda x: gan_losses(d_real, x, objective).gen_loss,
                    d_fake, gl.grad_gen_fake, rng, tol=tol)

    disc = Discriminator((8 * 8 * 3, 64, 32, 1), seed=int(rng.integers(1 << 31)), init_std=0.2)
    image = rng.uniform(0.05, 0.95, (n, n, 3))
    x = extract_patches(image)
    up = rng.normal(size=len(x))

    def out(inp=None):
        return float((disc.forward(x if inp is None else inp)[0] * up).sum())

    _, cache = disc.forward(x)
    disc.zero_grad()
    g_in = disc.backward(cache, up)
    for name, p in disc.parameters().items():
        def f(v, p=p):
            saved = p.values.copy()
            p.values[...] = v
            try:
                return out()
            finally:
                p.values[...] = saved

        yield check(f"discriminator/{name}", f, p.values.copy(), p.grads, rng, max_entries=200, tol=tol)
    yield check("discriminator/input", lambda v: out(v), x, g_in, rng, max_entries=200, tol=tol)
    g_img = patches_adjoint(g_in, image.shape)
    yield check("discriminator/image", lambda v: out(extract_patches(v)), image, g_img, rng, max_entries=200,
                tol=tol)


def _total_checks(rng, n, tol):
    # Imported here: the trainer depends on most of the package.
    from .scene import two_plane_scene, render_scene
    from .training import TrainConfig, Trainer

    scene = two_plane_scene(size=n, n_frames=3, seed=int(rng.integers(1000)))
    rendered = render_scene(scene)
    for variant in ("full-bmp", "full-fmp"):
        tr = Trainer(rendered.images, rendered.intrinsics, variant=variant,
                     config=TrainConfig(seed=int(rng.integers(1000)), disc_hidden=(16, 8)))
        for f, p in tr.params.depth_raw.items():
            p.values[...] = softplus_inverse(1.0 / rendered.depths[f] * rng.uniform(0.8, 1.2, p.values.shape))
        for (i, j), p in tr.params.poses.items():
            p.values[...] = scene.relative_pose(tr.snippets[i].target, tr.snippets[i].sources[j]).vector
            p.values += rng.normal(0, 0.01, 6)
        for p in tr.params.mask_logits.values():
            # keep sigmoid(logit) away from the boolean threshold
            p.values[...] = rng.choice([-2.0, 4.0], p.values.shape) + rng.uniform(-0.5, 0.5, p.values.shape)
        _, terms, grads, _ = tr.generator_objective()
        _, combined = total_generator_loss(terms, tr.weights, tr.variant, grads)
        named = tr.params.named()

        def total(v, p):
            saved = p.values.copy()
            p.values[...] = v
            try:
                return tr.generator_objective()[0]
            finally:
                p.values[...] = saved

        for name, p in named.items():
            if name not in combined:
                continue
            yield check(f"total/{variant}/{name}", lambda v, p=p: total(v, p), p.values.copy(), combined[name],
                        rng, max_entries=24, tol=tol)


SUITES = {
    "image": _image_checks,
    "geometry": _geometry_checks,
    "adversarial": _adversarial_checks,
    "total": _total_checks,
}


def run_gradcheck(seed=0, size=16, tol=DEFAULT_TOL, suites=None):
    """Run the finite-difference suites; returns ``(results, seconds)``."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = []
    for name in suites or SUITES:
        results.extend(SUITES[name](rng, size, tol))
    return results, time.perf_counter() - start

