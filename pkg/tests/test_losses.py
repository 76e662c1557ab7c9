"""Loss terms: SSIM against the reference implementation, closed-form term
values, and assembly of the weighted objective."""

import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity as sk_ssim

from polarsplat.bundle import Observation
from polarsplat.envlight import EnvironmentMap
from polarsplat.losses import (
    LossWeights,
    dssim,
    loss_depth_normal,
    loss_mask,
    loss_polarization,
    loss_rgb,
    loss_smoothness,
    ssim,
    total_loss,
)
from polarsplat.optics import DTYPE
from polarsplat.shading import render_stokes, simulate_lp_capture
from polarsplat.synthetic import (
    look_at_camera,
    make_sphere_cloud,
    random_env_latents,
)
from polarsplat.training import default_lut


def _sk(a, b, data_range=1.0):
    """Reference SSIM: Gaussian-weighted Wang et al. configuration."""
    kwargs = dict(
        data_range=data_range,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
    )
    if a.ndim == 3:
        kwargs["channel_axis"] = -1
    return sk_ssim(a, b, **kwargs)


@pytest.fixture(scope="module")
def sphere_result():
    cloud = make_sphere_cloud(300, 1.0)
    env = EnvironmentMap.from_latents(random_env_latents(16, seed=5), 16)
    camera = look_at_camera((0.2, -3.4, 0.9), (0.0, 0.0, 0.0), 32, 32, 40.0)
    return render_stokes(cloud, camera, env, default_lut())


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def test_ssim_matches_reference_grayscale():
    rng = np.random.default_rng(0)
    a = rng.random((40, 37))
    b = np.clip(a + 0.08 * rng.standard_normal(a.shape), 0.0, 1.0)
    ours = float(ssim(torch.from_numpy(a), torch.from_numpy(b)))
    ref = _sk(a, b)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_ssim_matches_reference_color():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32, 3))
    b = np.clip(a + 0.15 * rng.standard_normal(a.shape), 0.0, 1.0)
    ours = float(ssim(torch.from_numpy(a), torch.from_numpy(b)))
    ref = _sk(a, b)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_ssim_matches_reference_structured():
    """Smooth ramps plus a sharp box, the kind of content renders produce."""
    y, x = np.meshgrid(np.linspace(0, 1, 48), np.linspace(0, 1, 48), indexing="ij")
    a = 0.5 * x + 0.3 * y
    a[10:20, 25:40] = 0.95
    b = a.copy()
    b[15:30, 5:20] = 0.1
    ours = float(ssim(torch.from_numpy(a), torch.from_numpy(b)))
    ref = _sk(a, b)
    assert ours == pytest.approx(ref, abs=1e-9)


def test_ssim_identical_is_one():
    img = torch.rand(24, 24, 3, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    assert float(ssim(img, img)) == pytest.approx(1.0, abs=1e-12)
    assert float(dssim(img, img)) == pytest.approx(0.0, abs=1e-12)


def test_ssim_validates_inputs():
    with pytest.raises(ValueError):
        ssim(torch.zeros(16, 16, dtype=DTYPE), torch.zeros(16, 17, dtype=DTYPE))
    with pytest.raises(ValueError):
        ssim(torch.zeros(8, 8, dtype=DTYPE), torch.zeros(8, 8, dtype=DTYPE))  # < window


def test_ssim_differentiable():
    a = torch.rand(24, 24, generator=torch.Generator().manual_seed(3), dtype=DTYPE).requires_grad_(True)
    b = torch.rand(24, 24, generator=torch.Generator().manual_seed(4), dtype=DTYPE)
    val = ssim(a, b)
    val.backward()
    assert a.grad is not None
    assert torch.isfinite(a.grad).all()


# ---------------------------------------------------------------------------
# Individual terms
# ---------------------------------------------------------------------------


def test_loss_rgb_constant_offset_closed_form():
    a = torch.full((24, 24, 3), 0.3, dtype=DTYPE)
    b = torch.full((24, 24, 3), 0.4, dtype=DTYPE)
    c1 = 1e-4  # (0.01 * data_range)^2; variance terms vanish on constants
    s = (2 * 0.3 * 0.4 + c1) / (0.3**2 + 0.4**2 + c1)
    expected = 0.8 * 0.1 + 0.2 * (1.0 - s) / 2.0
    assert float(loss_rgb(a, b)) == pytest.approx(expected, abs=1e-12)
    assert float(loss_rgb(a, a)) == pytest.approx(0.0, abs=1e-12)


def test_loss_polarization_l1_on_linear_components():
    pred = torch.zeros(6, 6, 4, 3, dtype=DTYPE)
    obs = torch.zeros(6, 6, 4, 3, dtype=DTYPE)
    pred[..., 0, :] = 5.0  # s0 differences must not contribute
    pred[..., 1, :] = 0.2
    pred[..., 2, :] = -0.1
    pred[..., 3, :] = 9.0  # neither must s3
    assert float(loss_polarization(pred, obs)) == pytest.approx(0.3, abs=1e-12)


def test_loss_mask_values():
    op = torch.zeros(4, 4, dtype=DTYPE)
    mask = torch.zeros(4, 4, dtype=torch.bool)
    assert float(loss_mask(op, mask)) == 0.0
    assert float(loss_mask(op + 1.0, mask)) == 1.0
    mask[:2] = True
    assert float(loss_mask(op, mask)) == pytest.approx(0.5, abs=1e-12)


def test_loss_smoothness_constant_normals_zero():
    normal = torch.zeros(8, 8, 3, dtype=DTYPE)
    normal[..., 2] = 1.0
    edge = torch.rand(8, 8, generator=torch.Generator().manual_seed(5), dtype=DTYPE)
    mask = torch.ones(8, 8, dtype=torch.bool)
    assert float(loss_smoothness(normal, edge, mask)) == 0.0


def test_loss_smoothness_constant_guidance_reduces_to_gradient():
    """With flat guidance the attenuation is exp(0)=1 on every pair."""
    h = w = 6
    normal = torch.zeros(h, w, 3, dtype=DTYPE)
    normal[..., 0] = torch.linspace(0.0, 1.0, w, dtype=DTYPE).unsqueeze(0)
    edge = torch.full((h, w), 0.7, dtype=DTYPE)
    mask = torch.ones(h, w, dtype=torch.bool)
    step = 1.0 / (w - 1)
    expected = step / 3.0  # |dn| averaged over 3 channels, y-pairs contribute 0
    assert float(loss_smoothness(normal, edge, mask)) == pytest.approx(expected, abs=1e-12)


def test_loss_smoothness_edges_relax_penalty():
    h = w = 8
    normal = torch.zeros(h, w, 3, dtype=DTYPE)
    normal[:, w // 2 :, 0] = 1.0  # normal discontinuity down the middle
    mask = torch.ones(h, w, dtype=torch.bool)
    flat = torch.zeros(h, w, dtype=DTYPE)
    edgy = torch.zeros(h, w, dtype=DTYPE)
    edgy[:, w // 2 :] = 5.0  # guidance discontinuity at the same place
    loss_flat = float(loss_smoothness(normal, flat, mask))
    loss_edgy = float(loss_smoothness(normal, edgy, mask))
    assert loss_edgy < loss_flat
    assert loss_flat > 0.0


def test_loss_smoothness_respects_mask():
    normal = torch.zeros(4, 4, 3, dtype=DTYPE)
    normal[:, 2:, 0] = 1.0
    edge = torch.zeros(4, 4, dtype=DTYPE)
    mask = torch.zeros(4, 4, dtype=torch.bool)
    mask[:, :2] = True  # discontinuity pairs excluded
    assert float(loss_smoothness(normal, edge, mask)) == 0.0


def test_loss_depth_normal_flat_plate_near_zero():
    from polarsplat.surfels import SurfelCloud, rasterize

    cloud = SurfelCloud(
        positions=torch.tensor([[0.0, 0.0, 0.0]], dtype=DTYPE),
        tangent_u=torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE),
        tangent_v=torch.tensor([[0.0, 1.0, 0.0]], dtype=DTYPE),
        scales=torch.full((1, 2), 4.0, dtype=DTYPE),
        opacity=torch.tensor([0.99], dtype=DTYPE),
        albedo=torch.full((1, 3), 0.5, dtype=DTYPE),
        roughness=torch.tensor([0.3], dtype=DTYPE),
        eta=torch.tensor([1.5], dtype=DTYPE),
    )
    camera = look_at_camera((0.3, -0.2, 3.5), (0.0, 0.0, 0.0), 24, 24, 30.0)
    env = EnvironmentMap.from_latents(random_env_latents(8, seed=6), 8)
    res = render_stokes(cloud, camera, env, default_lut())
    assert bool(res.mask.any())
    val = float(loss_depth_normal(res))
    assert 0.0 <= val < 1e-6


def test_loss_depth_normal_sphere_small(sphere_result):
    val = float(loss_depth_normal(sphere_result))
    assert 0.0 <= val < 0.1  # curvature + discretisation, but normals agree


# ---------------------------------------------------------------------------
# Assembled objective
# ---------------------------------------------------------------------------


def test_total_loss_full_supervision_wiring(sphere_result):
    res = sphere_result
    gen = torch.Generator().manual_seed(7)
    obs_stokes = res.total.stokes + 0.05 * torch.randn(res.total.stokes.shape, generator=gen, dtype=DTYPE)
    obs = Observation(camera=res.gbuffer.camera, mask=res.gbuffer.opacity >= 0.5, stokes=obs_stokes)
    weights = LossWeights(polarization=3.0, mask=0.5, depth=0.25, smooth=0.125)
    total, parts = total_loss(res, obs, weights)
    assert set(parts) == {"rgb", "pol", "mask", "depth", "smooth"}
    expected = (
        parts["rgb"]
        + 3.0 * parts["pol"]
        + 0.5 * parts["mask"]
        + 0.25 * parts["depth"]
        + 0.125 * parts["smooth"]
    )
    assert float((total - expected).abs()) < 1e-12
    # independent recomputation of the parts
    assert float(parts["rgb"]) == pytest.approx(
        float(loss_rgb(res.total.stokes[..., 0, :], obs_stokes[..., 0, :])), abs=1e-12
    )
    assert float(parts["pol"]) == pytest.approx(
        float(loss_polarization(res.total.stokes, obs_stokes)), abs=1e-12
    )


def test_total_loss_perfect_prediction_zero_photometric(sphere_result):
    res = sphere_result
    obs = Observation(camera=res.gbuffer.camera, mask=res.gbuffer.opacity >= 0.5, stokes=res.total.stokes.clone())
    _, parts = total_loss(res, obs)
    assert float(parts["rgb"]) == pytest.approx(0.0, abs=1e-12)
    assert float(parts["pol"]) == pytest.approx(0.0, abs=1e-12)


def test_total_loss_partial_supervision(sphere_result):
    res = sphere_result
    lp = torch.tensor([math.radians(0.0), math.radians(90.0)], dtype=DTYPE)
    capture = simulate_lp_capture(res.total.stokes, lp[1])
    obs = Observation(
        camera=res.gbuffer.camera,
        mask=res.gbuffer.opacity >= 0.5,
        intensity=capture + 0.01,
        lp_index=1,
    )
    total, parts = total_loss(res, obs, lp_angles=lp)
    assert set(parts) == {"capture", "mask", "depth", "smooth"}
    assert float(parts["capture"]) == pytest.approx(0.01, abs=1e-9)
    weights = LossWeights()
    expected = (
        parts["capture"]
        + weights.mask * parts["mask"]
        + weights.depth * parts["depth"]
        + weights.smooth * parts["smooth"]
    )
    assert float((total - expected).abs()) < 1e-12


def test_total_loss_partial_uses_indexed_angle(sphere_result):
    res = sphere_result
    lp = torch.tensor([0.3, 1.2], dtype=DTYPE)
    cap0 = simulate_lp_capture(res.total.stokes, lp[0])
    obs = Observation(camera=res.gbuffer.camera, mask=res.gbuffer.opacity >= 0.5, intensity=cap0, lp_index=0)
    _, parts = total_loss(res, obs, lp_angles=lp)
    assert float(parts["capture"]) == pytest.approx(0.0, abs=1e-12)
    obs_wrong = Observation(camera=res.gbuffer.camera, mask=res.gbuffer.opacity >= 0.5, intensity=cap0, lp_index=1)
    _, parts_wrong = total_loss(res, obs_wrong, lp_angles=lp)
    assert float(parts_wrong["capture"]) > 1e-4


def test_total_loss_differentiable_through_capture(sphere_result):
    res = sphere_result
    lp = torch.tensor([0.1, 1.0], dtype=DTYPE, requires_grad=True)
    cap = simulate_lp_capture(res.total.stokes, torch.tensor(0.4, dtype=DTYPE))
    obs = Observation(camera=res.gbuffer.camera, mask=res.gbuffer.opacity >= 0.5, intensity=cap, lp_index=0)
    total, _ = total_loss(res, obs, lp_angles=lp)
    total.backward()
    assert lp.grad is not None
    assert float(lp.grad[0].abs()) > 0.0
    assert float(lp.grad[1].abs()) == 0.0  # unused angle gets no gradient
