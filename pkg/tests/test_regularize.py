import logging

import numpy as np
import pytest

from src.sparsederf import autodiff as ad
from src.sparsederf.blur import KernelConfig, RigidBlurKernel
from src.sparsederf.features import FeatureExtractor
from src.sparsederf.geometry import Intrinsics, look_at
from src.sparsederf.regularize import (
    MGSConfig,
    apply_mgs,
    integrated_unobserved_patches,
    mgs_curve,
    mgs_value,
    patch_batch,
    perceptual_loss,
    perceptual_loss_patches,
    random_rect,
    reconstruction_loss,
    smoothness_weights,
    surface_smoothness_loss,
    total_loss,
)
from src.sparsederf.render import RaySamples, volume_render
from src.sparsederf.scene.presets import MGS_PARAMS

INTR = Intrinsics(focal=20.0, width=24, height=24, near=1.0, far=6.0, ndc=True)
POSE = look_at([0.0, 0.0, 0.0], [0.0, 0.0, -4.0], [0.0, 1.0, 0.0])


# ---- modulated gradient scaling ----

@pytest.mark.parametrize("scene", sorted(MGS_PARAMS))
def test_modulated_scale_is_zero_at_origin_for_every_preset(scene):
    rho, eta = MGS_PARAMS[scene]
    assert mgs_value(0.0, MGSConfig(rho, eta)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("rho,eta", [(1.0, 1.0), (1.0, 1.2), (10.0, 1.75), (1.0, 1.5)])
def test_modulated_scale_saturates_at_sine_peak(rho, eta):
    assert mgs_value(1.0 / eta, MGSConfig(rho, eta)) == pytest.approx(1.0)


def test_modulated_scale_hand_values():
    assert mgs_value(0.5, MGSConfig(1.0, 1.5)) == 1.0
    assert mgs_value(1.0, MGSConfig(10.0, 1.75)) == 1.0
    raw = 1.0 * (np.sin(0.5 * np.pi * (0.5 + 3.0)) + 1.0)
    assert mgs_value(0.5, MGSConfig(1.0, 0.5)) == pytest.approx(raw, abs=1e-12)


def test_naive_and_off_modes():
    delta = np.array([0.0, 0.3, 1.0])
    np.testing.assert_allclose(mgs_value(delta, MGSConfig(mode="naive")), [0.0, 0.09, 1.0])
    np.testing.assert_array_equal(mgs_value(delta, MGSConfig(mode="off")), np.ones(3))


def test_out_of_range_distances_are_clamped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        values = mgs_value(np.array([-0.1, 1.2]), MGSConfig(mode="naive"))
    np.testing.assert_array_equal(values, [0.0, 1.0])
    assert "Clamping 2" in caplog.text


def test_mgs_config_validation():
    with pytest.raises(ValueError):
        MGSConfig(rho=0.5)
    with pytest.raises(ValueError):
        MGSConfig(eta=2.0)
    with pytest.raises(ValueError):
        MGSConfig(mode="linear")
    MGSConfig(rho=0.5, eta=3.0, mode="naive")


@pytest.mark.parametrize("eta", [1.25, 1.5, 1.75, 1.95])
def test_modulated_curve_rises_then_falls(eta):
    delta = np.linspace(0.0, 1.0, 10_000)
    raw = np.sin(eta * np.pi * (delta + 3.0 / (2.0 * eta)))
    steps = np.sign(np.diff(raw))
    changes = np.count_nonzero(np.diff(steps[steps != 0]))
    assert changes == 1
    assert delta[np.argmax(raw)] == pytest.approx(1.0 / eta, abs=1e-3)
    curve = mgs_curve(delta, 1.0, eta)
    assert np.all((curve >= 0.0) & (curve <= 1.0))
    assert np.max(np.abs(np.diff(curve))) < 1e-3


def _two_sample_ray(tape):
    sigma = tape.parameter("sigma", np.array([[0.8, 1.6]]))
    rgb = tape.parameter("rgb", np.array([[[0.9, 0.1, 0.4], [0.2, 0.7, 0.5]]]))
    t = np.array([[0.3, 0.7]])
    return RaySamples(t, np.array([[0.4, 0.3]]), rgb, sigma, distance=t)


def test_mgs_leaves_forward_render_bit_identical():
    cfg = MGSConfig(10.0, 1.75)
    plain_tape, hooked_tape = ad.Tape(), ad.Tape()
    plain = volume_render(_two_sample_ray(plain_tape))
    hooked = volume_render(apply_mgs(_two_sample_ray(hooked_tape), cfg))
    assert np.array_equal(plain.color.value, hooked.color.value)
    assert np.array_equal(plain.depth.value, hooked.depth.value)


def test_mgs_scales_per_sample_gradients():
    cfg = MGSConfig(1.0, 0.5)
    plain_tape, hooked_tape = ad.Tape(), ad.Tape()
    plain = plain_tape.backward(ad.total(volume_render(_two_sample_ray(plain_tape)).color))
    hooked = hooked_tape.backward(ad.total(volume_render(apply_mgs(_two_sample_ray(hooked_tape), cfg)).color))
    scale = mgs_value(np.array([0.3, 0.7]), cfg)
    assert 0.0 < scale[0] < scale[1] < 1.0
    np.testing.assert_allclose(hooked["sigma"], plain["sigma"] * scale, atol=1e-12)
    np.testing.assert_allclose(hooked["rgb"], plain["rgb"] * scale[:, None], atol=1e-12)


def test_mgs_off_leaves_samples_untouched():
    tape = ad.Tape()
    samples = _two_sample_ray(tape)
    size = len(tape)
    assert apply_mgs(samples, MGSConfig(mode="off")) is samples
    assert len(tape) == size


# ---- surface smoothness ----

def test_constant_depth_has_no_smoothness_loss(rng):
    assert surface_smoothness_loss(np.full((4, 4), 2.5), rng.uniform(size=(4, 4, 3))) == 0.0


def test_smoothness_hand_evaluation():
    depth = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert surface_smoothness_loss(depth, np.zeros((2, 2, 3))) == pytest.approx(2.0)
    color = np.zeros((2, 2, 3))
    color[:, 1, 0] = np.sqrt(np.log(2.0))
    assert surface_smoothness_loss(depth, color) == pytest.approx(1.0, abs=1e-12)


def test_smoothness_sums_over_patches():
    depth = np.array([[[1.0, 2.0], [1.0, 2.0]], [[0.0, 0.0], [1.0, 1.0]]])
    assert surface_smoothness_loss(depth, np.zeros((2, 2, 2, 3))) == pytest.approx(4.0)


def test_smoothness_weights_stay_positive(rng):
    wv, wh = smoothness_weights(rng.uniform(size=(3, 5, 5, 3)))
    assert wv.shape == (3, 4, 5) and wh.shape == (3, 5, 4)
    assert np.all(wv > 0) and np.all(wh > 0)


def test_smoothness_gradient_skips_color_weights():
    tape = ad.Tape()
    depth = tape.parameter("depth", np.array([[1.0, 2.0], [1.0, 2.0]]))
    color = tape.parameter("color", np.zeros((2, 2, 3)))
    grads = tape.backward(surface_smoothness_loss(depth, color))
    assert np.all(grads["color"] == 0.0)
    np.testing.assert_allclose(grads["depth"], [[-2.0, 2.0], [-2.0, 2.0]])


# ---- unobserved patches ----

def test_unobserved_patches_with_identity_kernel(rng):
    kernel = RigidBlurKernel(KernelConfig(n=5, embed_dim=4, depth=2, width=8, head_init=0.0), 1, rng)
    train = patch_batch(POSE, 0, INTR, 2, 3, 4)
    patches = integrated_unobserved_patches(kernel.params, train, kernel, [], INTR, rng, 4)
    assert len(patches) == 5
    for patch in patches:
        assert patch.source == "hidden"
        np.testing.assert_array_equal(patch.rays.origin, train.rays.origin)
        np.testing.assert_array_equal(patch.rays.direction, train.rays.direction)


def test_unobserved_patch_count_with_unseen_poses(rng):
    kernel = RigidBlurKernel(KernelConfig(n=5, embed_dim=4, depth=2, width=8), 1, rng)
    train = patch_batch(POSE, 0, INTR, 0, 0, 4)
    unseen = [look_at([0.1 * i, 0.0, 0.0], [0.0, 0.0, -4.0], [0.0, 1.0, 0.0]) for i in range(4)]
    patches = integrated_unobserved_patches(kernel.params, train, kernel, unseen, INTR, rng, 4)
    assert len(patches) == 9
    assert [p.source for p in patches].count("unseen") == 4
    for patch in patches:
        assert patch.rays.origin.shape == (4, 4, 3)


def test_hidden_patches_follow_kernel_parameters(rng):
    kernel = RigidBlurKernel(KernelConfig(n=3, embed_dim=4, depth=2, width=8, head_init=0.01), 1, rng)
    train = patch_batch(POSE, 0, INTR, 0, 0, 4)
    before = integrated_unobserved_patches(kernel.params, train, kernel, [], INTR, rng, 4)
    nudged = dict(kernel.params)
    nudged["rbk.screw.0.b"] = nudged["rbk.screw.0.b"] + 0.01
    after = integrated_unobserved_patches(nudged, train, kernel, [], INTR, rng, 4)
    assert np.array_equal(before[0].rays.origin, after[0].rays.origin)
    assert not np.allclose(before[1].rays.origin, after[1].rays.origin)


def test_unobserved_patches_without_kernel(rng):
    train = patch_batch(POSE, 0, INTR, 0, 0, 4)
    patches = integrated_unobserved_patches({}, train, None, [], INTR, rng, 4)
    assert len(patches) == 1
    assert patches[0].rays is train.rays


def test_random_rect_stays_inside_image(rng):
    for _ in range(200):
        x0, y0 = random_rect(rng, INTR, 8)
        assert 0 <= x0 <= 16 and 0 <= y0 <= 16


# ---- perceptual distillation ----

def test_perceptual_loss_of_identical_patches_is_zero(rng):
    extractor = FeatureExtractor(16)
    patch = rng.uniform(size=(16, 16, 3))
    assert perceptual_loss_patches(patch, patch, extractor) == 0.0


def test_perceptual_loss_is_non_negative(rng):
    extractor = FeatureExtractor(16)
    for _ in range(10):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        assert perceptual_loss_patches(a, b, extractor) >= 0.0


def test_constant_shift_is_invisible_to_edge_filters(rng):
    extractor = FeatureExtractor(16)
    patch = rng.uniform(size=(16, 16, 3))
    shifted = patch + 0.2
    np.testing.assert_allclose(extractor.edge_responses(shifted), extractor.edge_responses(patch), atol=1e-12)
    assert perceptual_loss_patches(shifted, patch, extractor) == pytest.approx(0.0, abs=1e-20)


def test_perceptual_gradient_reaches_rendered_patch_only(rng):
    extractor = FeatureExtractor(16)
    target = rng.uniform(size=(16, 16, 3))
    tape = ad.Tape()
    rendered = tape.parameter("rendered", rng.uniform(size=(16, 16, 3)))
    loss = perceptual_loss(rendered, extractor(target), extractor)
    grads = tape.backward(loss)
    assert float(loss.value) > 0.0
    assert np.any(grads["rendered"] != 0.0)


# ---- loss assembly ----

def test_total_loss_weights():
    assert total_loss(0.5, 2.0, 1.0) == pytest.approx(0.53)
    assert total_loss(0.5, 2.0, 1.0, lambda_ss=0.0, lambda_pd=0.0) == 0.5
    assert total_loss(0.0, 0.0, 0.0) == 0.0


def test_reconstruction_loss_sums_passes():
    target = np.zeros((2, 3))
    coarse = np.full((2, 3), 0.1)
    fine = np.full((2, 3), 0.2)
    assert reconstruction_loss([coarse, fine], target) == pytest.approx(0.01 + 0.04)
    assert reconstruction_loss([target], target) == 0.0
