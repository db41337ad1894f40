"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
pytest terminal summary (section "acceptance criteria"). Run just this
file with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import record_acceptance
from maskwarp.evaluation import (
    Trajectory,
    chain_relative_poses,
    depth_metrics,
    kitti_odometry_errors,
    umeyama_align,
)
from maskwarp.geometry import Pose6, compose, invert, pixel_lattice, project, rotation_exp
from maskwarp.gradcheck import run_gradcheck
from maskwarp.io import IDENTITY_POSE_ROW, format_pose_row, write_kitti_poses
from maskwarp.losses import (
    VARIANTS,
    LossWeights,
    apply_mask,
    boolean_mask,
    gan_losses,
    masked_reconstruction_loss,
    reconstruction_loss,
    ssim_map,
    term_coefficients,
)
from maskwarp.nn import AdamState, Discriminator, adam_step, extract_patches, softplus_inverse
from maskwarp.sampling import WarpResult, bilinear_sample, warp_image
from maskwarp.scene import layered_scene, render_scene, two_plane_scene
from maskwarp.training import Snippet, TrainConfig, Trainer
from oracles import depth_metrics_brute, masked_rec_brute, parse_kitti_line, ssim_brute

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def _set_truth(trainer, scene, rendered):
    """Load ground-truth depth and relative poses into a trainer's parameters."""
    for f, raw in trainer.params.depth_raw.items():
        raw.values[...] = softplus_inverse(1.0 / rendered.depths[f])
    for i, sn in enumerate(trainer.snippets):
        for j, s in enumerate(sn.sources):
            trainer.params.poses[(i, j)].values[...] = scene.relative_pose(sn.target, s).vector


def _median_abs_rel(pred, gt):
    return depth_metrics(pred, gt, median_scaling=True).abs_rel


def _angle_deg(a, b):
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# -- 1 -----------------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    with threadpool_limits(limits=1):
        results, seconds = run_gradcheck(seed=0, size=16, tol=1e-4)
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and seconds < 60
    names = {r.name.split("/")[0] for r in results}
    ok = ok and {"ssim", "reconstruction", "masked_reconstruction", "smoothness", "mask_regularization",
                 "scale", "gan", "discriminator", "total"} <= names
    record_acceptance(1, ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e}, {seconds:.1f} s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------


def test_criterion_2_metric_oracles():
    worst = {"depth_metrics": 0.0, "ssim_map": 0.0, "reconstruction_loss": 0.0, "masked_reconstruction_loss": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(5, 10, 2)
        gt = rng.uniform(0.5, 90, (h, w))
        gt[rng.uniform(size=gt.shape) < 0.15] = 0.0
        gt[0, 0] = 5.0
        pred = gt * rng.uniform(0.4, 2.2, gt.shape) + rng.uniform(0, 0.5, gt.shape)
        r = depth_metrics(pred, gt)
        ref = depth_metrics_brute(pred, gt)
        worst["depth_metrics"] = max(worst["depth_metrics"], max(abs(getattr(r, k) - v) for k, v in ref.items()))

        a, b = rng.uniform(size=(2, h, w, 3))
        worst["ssim_map"] = max(worst["ssim_map"], np.max(np.abs(ssim_map(a, b) - ssim_brute(a, b))))

        ones = np.ones((h, w), dtype=bool)
        rec = reconstruction_loss(a, b)[0]
        worst["reconstruction_loss"] = max(worst["reconstruction_loss"],
                                           abs(rec - masked_rec_brute(a, b, ones, np.ones((h, w)))))

        valid = rng.uniform(size=(h, w)) > 0.3
        valid[0, 0] = True
        m = rng.uniform(size=(h, w))
        synth = b * valid[..., None]
        val = masked_reconstruction_loss(a, WarpResult(synth, valid), m)[0]
        worst["masked_reconstruction_loss"] = max(worst["masked_reconstruction_loss"],
                                                  abs(val - masked_rec_brute(a, synth, valid, m)))
    ok = all(v <= 1e-12 for v in worst.values())
    record_acceptance(2, ok, "max abs deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# -- 3 -----------------------------------------------------------------------------------


def test_criterion_3_geometry_oracles():
    from maskwarp.scene import fronto_parallel_scene

    # plane shift: disparity fx * tx / d on the interior
    scene = fronto_parallel_scene(size=32, depth=4.0, shift_pixels=3)
    r = render_scene(scene)
    pose = scene.relative_pose(1, 0)
    K = r.intrinsics
    grid, _ = project(r.depths[1], pose, K)
    disparity = K.fx * pose.translation[0] / 4.0
    lattice = pixel_lattice(32, 32)
    interior = (slice(4, -4), slice(4, -4))
    shift_err = np.max(np.abs(grid.coords[..., 0][interior] - lattice[..., 0][interior] - disparity))
    warped = warp_image(r.images[0], r.depths[1], pose, K)
    sampled = bilinear_sample(r.images[0], lattice + np.array([disparity, 0.0]))
    warp_err = np.max(np.abs(warped.image[interior] - sampled.image[interior]))

    # group axioms on seeded random poses
    rng = np.random.default_rng(0)
    group_err = 0.0
    for _ in range(200):
        a, b, c = (Pose6(rng.uniform(-1, 1, 3), rng.normal(0, 2, 3)) for _ in range(3))
        group_err = max(group_err,
                        np.max(np.abs(compose(a, invert(a)).as_matrix() - np.eye(4))),
                        np.max(np.abs(compose(compose(a, b), c).as_matrix() - compose(a, compose(b, c)).as_matrix())),
                        np.max(np.abs(compose(a, Pose6.identity()).as_matrix() - a.as_matrix())))

    # Umeyama on planted similarity transforms
    um_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gt = [Pose6.identity()]
        for _ in range(11):
            gt.append(compose(gt[-1], Pose6(rng.normal(0, 0.1, 3), rng.normal(0, 1, 3))))
        gt = Trajectory(gt)
        s, R, t = rng.uniform(0.2, 5), rotation_exp(rng.uniform(-1.5, 1.5, 3)), rng.normal(0, 3, 3)
        est = Trajectory([Pose6.from_matrix(np.block([[R.T @ p.rotation_matrix, (R.T @ (p.translation - t) / s)[:, None]],
                                                      [np.zeros((1, 3)), np.ones((1, 1))]])) for p in gt.poses])
        aligned, al = umeyama_align(est, gt, "sim3")
        um_err = max(um_err, abs(al.scale - s) / s, np.max(np.abs(al.rotation - R)),
                     np.max(np.abs(aligned.positions() - gt.positions())))
    ok = shift_err < 1e-6 and warp_err < 1e-6 and group_err < 1e-10 and um_err < 1e-9
    record_acceptance(3, ok, f"disparity err {shift_err:.1e}, warp err {warp_err:.1e}, "
                             f"group residual {group_err:.1e}, umeyama err {um_err:.1e}")
    assert ok


# -- 4 -----------------------------------------------------------------------------------


def test_criterion_4_zero_at_truth():
    scene = two_plane_scene(size=64, n_frames=3)
    r = render_scene(scene)
    weights = LossWeights()
    worst_rec = worst_scale = worst_gap = 0.0
    lines = []
    for name in ("basic", "basic-scale", "basic-gan", "basic-scale-gan", "mask", "full-fmp", "full-bmp"):
        if name not in VARIANTS:
            continue
        tr = Trainer(r.images, r.intrinsics, variant=name, config=TrainConfig(smooth_normalize=True))
        _set_truth(tr, scene, r)
        total, terms, _, _ = tr.generator_objective()
        coef = term_coefficients(weights, name)
        floor = coef["smooth"] * terms["smooth"] + coef["mask"] * terms["mask"]
        gap = total - floor
        bound = weights.gamma * abs(terms["gan"]) + 1e-3 if coef["gan"] else 1e-3
        worst_rec = max(worst_rec, terms["rec"])
        worst_scale = max(worst_scale, terms["scale"])
        worst_gap = max(worst_gap, gap - bound)
        lines.append(f"{name} gap {gap:.1e}")
    ok = worst_rec < 1e-3 and worst_scale < 1e-3 and worst_gap <= 0
    record_acceptance(4, ok, f"L_rec {worst_rec:.1e}, L_scale {worst_scale:.1e}; " + ", ".join(lines))
    assert ok


# -- 5 -----------------------------------------------------------------------------------


def test_criterion_5_desk_scale_convergence():
    scene = two_plane_scene(size=64, n_frames=3)
    r = render_scene(scene)
    steps = 1500
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        tr = Trainer(r.images, r.intrinsics, variant="full-bmp", config=TrainConfig(), n_steps=steps)
        history = tr.run()
        _, _, _, rec_final = tr.generator_objective()
    seconds = time.perf_counter() - start
    drop = history[0].rec_plain / rec_final
    abs_rel = _median_abs_rel(tr.depth(1), r.depths[1])
    angles = [_angle_deg(tr.pose(0, j).translation, scene.relative_pose(1, s).translation)
              for j, s in enumerate(tr.snippets[0].sources)]
    ok = drop >= 10 and abs_rel < 0.10 and max(angles) < 5 and seconds < 300
    record_acceptance(5, ok, f"L_rec drop {drop:.0f}x, Abs Rel {abs_rel:.3f}, "
                             f"direction err {max(angles):.2f} deg, {seconds:.0f} s for {steps} steps")
    assert ok


# -- 6 -----------------------------------------------------------------------------------


def _train_discriminator(real, fake, steps=500, seed=1):
    d = Discriminator((8 * 8 * 3, 64, 32, 1), seed=seed)
    state = AdamState()
    R, F = extract_patches(real), extract_patches(fake)
    for _ in range(steps):
        pr, cr = d.forward(R)
        pf, cf = d.forward(F)
        gl = gan_losses(pr, pf)
        d.zero_grad()
        d.backward(cr, gl.grad_disc_real)
        d.backward(cf, gl.grad_disc_fake)
        adam_step(state, d.parameters())
    return float(np.mean(np.abs(d.forward(R)[0] - d.forward(F)[0])))


def test_criterion_6_boolean_mask_support():
    # (a) support equality inside the trainer on the occluder scene, at initialization and after training
    scene = two_plane_scene(size=32, n_frames=3, occluder=True)
    r = render_scene(scene)
    tr = Trainer(r.images, r.intrinsics, variant="full-bmp", config=TrainConfig(disc_hidden=(16, 8)), n_steps=30)

    def supports_match():
        same, zeroed = True, 0
        for pf in tr._forward():
            zr = np.all(pf.real == 0, axis=-1)
            zf = np.all(pf.fake == 0, axis=-1)
            same &= bool(np.array_equal(zr, zf))
            zeroed += int(zr.sum())
        return same, zeroed

    # at initialization (identity pose) nothing is masked out yet; after a few
    # steps the warp leaves the image on one side and the mask zeroes it
    supports_equal, _ = supports_match()
    tr.run(30)
    equal_after, zeroed = supports_match()
    supports_equal &= equal_after and zeroed > 0

    # (b) a discriminator cannot separate pairs that agree outside the zeroed region
    lay = layered_scene(size=32)
    lr_ = render_scene(lay)
    pose = lay.relative_pose(1, 0)
    grid, z = project(lr_.depths[1], pose, lr_.intrinsics)
    synth = bilinear_sample(lr_.images[0], grid)
    src_depth = bilinear_sample(lr_.depths[0], grid)
    covisible = synth.validity & (np.abs(src_depth.image[..., 0] - z) < 1e-9)
    mb = boolean_mask(covisible * 0.99 + 0.005, LossWeights().theta)
    real, fake = apply_mask(lr_.images[1], mb), apply_mask(synth.image, mb)
    supports_equal &= np.array_equal(np.all(real == 0, -1), np.all(fake == 0, -1))
    diff = _train_discriminator(real, fake)
    unmasked = _train_discriminator(lr_.images[1], synth.image)
    ok = supports_equal and diff < 0.05
    record_acceptance(6, ok, f"zero-supports equal: {supports_equal} ({zeroed} zeroed trainer pixels); mean |D(real)-D(fake)| {diff:.2e} "
                             f"(unmasked pair: {unmasked:.2f})")
    assert ok


# -- 7 -----------------------------------------------------------------------------------


def _two_snippet_run(scene, r, variant, steps):
    snippets = [Snippet(1, (0, 2)), Snippet(3, (2, 4))]
    tr = Trainer(r.images, r.intrinsics, snippets=snippets, variant=variant, config=TrainConfig(), n_steps=steps)
    tr.run()
    scales = [np.median(r.depths[f]) / np.median(tr.depth(f)) for f in (1, 3)]
    # frame increments 0->1->2->3->4 from the target-to-source poses of each snippet
    increments = [tr.pose(0, 0), invert(tr.pose(0, 1)), tr.pose(1, 0), invert(tr.pose(1, 1))]
    est = chain_relative_poses(increments)
    gt = Trajectory(scene.camera_poses)
    aligned, _ = umeyama_align(est, gt, "sim3")
    rep = kitti_odometry_errors(aligned, gt, lengths=(0.1, 0.2, 0.3, 0.4, 0.5))
    return scales[0] / scales[1], rep.t_err


def test_criterion_7_scale_consistency():
    scene = two_plane_scene(size=64, n_frames=5)
    r = render_scene(scene)
    ratio_with, t_with = _two_snippet_run(scene, r, "basic-scale-gan", 1500)
    ratio_without, t_without = _two_snippet_run(scene, r, "basic-gan", 1500)
    ok = abs(ratio_with - 1) <= 0.02 and t_with <= t_without
    record_acceptance(7, ok, f"scale ratio with L_scale {ratio_with:.4f} (without {ratio_without:.4f}); "
                             f"t_err with {t_with:.2f}% vs without {t_without:.2f}%")
    assert ok


# -- 8 -----------------------------------------------------------------------------------


def test_criterion_8_ablation_ordering():
    slack = 1.05
    rows = []
    ok = True
    for seed in range(3):
        scene = two_plane_scene(size=64, n_frames=3, seed=seed, occluder=True, moving_object=True)
        r = render_scene(scene)
        err = {}
        for variant in ("basic", "mask", "full-bmp"):
            tr = Trainer(r.images, r.intrinsics, variant=variant, config=TrainConfig(seed=seed), n_steps=1500)
            tr.run()
            err[variant] = _median_abs_rel(tr.depth(1), r.depths[1])
        ok &= err["full-bmp"] <= slack * err["mask"] and err["mask"] <= slack * err["basic"]
        rows.append(f"seed {seed}: bmp {err['full-bmp']:.3f} mask {err['mask']:.3f} basic {err['basic']:.3f}")
    record_acceptance(8, ok, "; ".join(rows))
    assert ok


# -- 9 -----------------------------------------------------------------------------------


def test_criterion_9_kitti_format(tmp_path):
    rng = np.random.default_rng(9)
    mats = [np.eye(4)] + [Pose6(rng.normal(0, 1, 3), rng.normal(0, 50, 3)).as_matrix() for _ in range(50)]
    path = tmp_path / "poses.txt"
    write_kitti_poses(path, mats)
    lines = path.read_text().splitlines()
    exact = len(lines) == len(mats) and all(
        np.array_equal(parse_kitti_line(line), T[:3]) for line, T in zip(lines, mats)
    )
    identity = lines[0] == IDENTITY_POSE_ROW == format_pose_row(np.eye(4)) == "1 0 0 0 0 1 0 0 0 0 1 0"
    ok = exact and identity
    record_acceptance(9, ok, f"{len(mats)} rows bit-exact: {exact}; identity row literal: {identity}")
    assert ok
