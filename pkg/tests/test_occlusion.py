"""Anchor placement, ray tracing against splats, blend weights, local cubemaps."""

import math

import pytest
import torch

from polarsplat.envlight import ROUGHNESS_MIN, EnvironmentMap, cube_grid
from polarsplat.occlusion import (
    ANCHOR_LATTICE,
    AnchorGrid,
    build_anchor_grid,
    place_anchors,
    trace_nearest,
)
from polarsplat.optics import DTYPE
from polarsplat.surfels import SurfelCloud
from polarsplat.synthetic import constant_env_latents, make_bowl_cloud, make_sphere_cloud


def _plate(z, albedo=0.6, opacity=0.99, scale=3.0, normal_up=True):
    n = 1.0 if normal_up else -1.0
    return SurfelCloud(
        positions=torch.tensor([[0.0, 0.0, z]], dtype=DTYPE),
        tangent_u=torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE),
        tangent_v=torch.tensor([[0.0, n, 0.0]], dtype=DTYPE),
        scales=torch.full((1, 2), scale, dtype=DTYPE),
        opacity=torch.tensor([opacity], dtype=DTYPE),
        albedo=torch.full((1, 3), albedo, dtype=DTYPE),
        roughness=torch.tensor([0.3], dtype=DTYPE),
        eta=torch.tensor([1.5], dtype=DTYPE),
    )


def _stack(*clouds):
    return SurfelCloud(
        positions=torch.cat([c.positions for c in clouds]),
        tangent_u=torch.cat([c.tangent_u for c in clouds]),
        tangent_v=torch.cat([c.tangent_v for c in clouds]),
        scales=torch.cat([c.scales for c in clouds]),
        opacity=torch.cat([c.opacity for c in clouds]),
        albedo=torch.cat([c.albedo for c in clouds]),
        roughness=torch.cat([c.roughness for c in clouds]),
        eta=torch.cat([c.eta for c in clouds]),
    )


# ---------------------------------------------------------------------------
# Anchor placement
# ---------------------------------------------------------------------------


def test_anchor_count_is_52():
    lo = torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE)
    hi = torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE)
    anchors = place_anchors(lo, hi)
    assert anchors.shape == (52, 3)
    # boundary points of a 4^3 lattice (56) minus the 4 bottom-face interiors
    assert ANCHOR_LATTICE**3 - (ANCHOR_LATTICE - 2) ** 3 == 56


def test_anchor_corners_and_scale():
    lo = torch.tensor([0.0, 0.0, 0.0], dtype=DTYPE)
    hi = torch.tensor([2.0, 2.0, 2.0], dtype=DTYPE)
    anchors = place_anchors(lo, hi, scale=1.1)
    # scaled half-extent 1.1 about center (1,1,1)
    for corner in ([0, 0, 0], [2, 2, 2], [0, 2, 0], [2, 0, 2]):
        c = torch.tensor(corner, dtype=DTYPE)
        scaled = torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE) + (c - 1.0) * 1.1
        d = (anchors - scaled).norm(dim=-1).min()
        assert float(d) < 1e-12
    # every anchor sits on the scaled box surface
    off = (anchors - 1.0).abs().max(dim=-1).values
    assert float((off - 1.1).abs().max()) < 1e-12


def test_bottom_interior_anchors_dropped():
    lo = torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE)
    hi = torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE)
    anchors = place_anchors(lo, hi, scale=1.0)
    bottom = anchors[anchors[:, 2] == -1.0]
    assert bottom.shape[0] == 12  # 4x4 face minus 2x2 interior
    interior = (bottom[:, 0].abs() < 1.0) & (bottom[:, 1].abs() < 1.0)
    assert not bool(interior.any())


# ---------------------------------------------------------------------------
# Ray tracing against splats
# ---------------------------------------------------------------------------


def test_trace_nearest_orders_hits():
    cloud = _stack(_plate(1.0, albedo=0.9), _plate(0.0, albedo=0.1))
    origin = torch.tensor([0.0, 0.0, 2.0], dtype=DTYPE)
    dirs = torch.tensor([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
    hit, idx, t = trace_nearest(cloud, origin, dirs)
    assert bool(hit[0]) and not bool(hit[1])
    assert int(idx[0]) == 0  # nearer plate (z=1), not the one behind it
    assert float(t[0]) == pytest.approx(1.0, abs=1e-12)


def test_trace_nearest_alpha_threshold():
    origin = torch.tensor([0.0, 0.0, 2.0], dtype=DTYPE)
    down = torch.tensor([[0.0, 0.0, -1.0]], dtype=DTYPE)
    hit_low, _, _ = trace_nearest(_plate(0.0, opacity=0.4), origin, down)
    hit_high, _, _ = trace_nearest(_plate(0.0, opacity=0.6), origin, down)
    assert not bool(hit_low[0])  # 0.4 * w <= 0.4 < 0.5
    assert bool(hit_high[0])


def test_trace_nearest_gaussian_falloff():
    """Far from the splat center the weight drops below the hit threshold."""
    cloud = _plate(0.0, opacity=0.99, scale=1.0)
    origin = torch.tensor([0.0, 0.0, 2.0], dtype=DTYPE)
    # straight down at increasing lateral offset (in units of the scale)
    offsets = [0.0, 0.5, 1.0, 2.0]
    dirs = torch.stack(
        [torch.tensor([x, 0.0, -2.0], dtype=DTYPE) for x in offsets]
    )
    hit, _, _ = trace_nearest(cloud, origin, dirs)
    # w = exp(-u^2/2): 1.0, 0.88, 0.61, 0.135 -> times 0.99 vs threshold 0.5
    assert hit.tolist() == [True, True, True, False]


# ---------------------------------------------------------------------------
# Blend weights
# ---------------------------------------------------------------------------


def test_blend_weights_literal_distance_weighting():
    grid = AnchorGrid(anchors=torch.tensor([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]], dtype=DTYPE))
    p = torch.tensor([[1.0, 0.0, 0.0]], dtype=DTYPE)  # distances 1 and 3
    w = grid.blend_weights(p, "literal")
    assert torch.allclose(w, torch.tensor([[0.25, 0.75]], dtype=DTYPE), atol=1e-12)
    w_inv = grid.blend_weights(p, "inverse")
    assert torch.allclose(w_inv, torch.tensor([[0.75, 0.25]], dtype=DTYPE), atol=1e-12)


def test_blend_weights_normalized_and_validated():
    gen = torch.Generator().manual_seed(0)
    anchors = torch.randn(52, 3, generator=gen, dtype=DTYPE)
    grid = AnchorGrid(anchors=anchors)
    pts = torch.randn(17, 3, generator=gen, dtype=DTYPE)
    for mode in ("literal", "inverse"):
        w = grid.blend_weights(pts, mode)
        assert w.shape == (17, 52)
        assert float((w.sum(dim=1) - 1.0).abs().max()) < 1e-12
        assert float(w.min()) >= 0.0
    with pytest.raises(ValueError):
        grid.blend_weights(pts, "nearest")


# ---------------------------------------------------------------------------
# Mirror visibility
# ---------------------------------------------------------------------------


def _grid_with_bbox():
    lo = torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE)
    hi = torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE)
    return AnchorGrid(anchors=place_anchors(lo, hi), bbox_min=lo, bbox_max=hi)


def test_mirror_visibility_blocked_by_plate_above():
    grid = _grid_with_bbox()
    blocker = _plate(1.0)
    p = torch.tensor([[0.0, 0.0, 0.0]], dtype=DTYPE)
    n = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
    up = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
    down = torch.tensor([[0.0, 0.0, -1.0]], dtype=DTYPE)
    assert not bool(grid.mirror_visibility(blocker, p, n, up)[0])
    assert bool(grid.mirror_visibility(blocker, p, n, down)[0])


def test_mirror_visibility_offset_skips_own_surface():
    """A point lying on a splat must not be occluded by that same splat."""
    grid = _grid_with_bbox()
    cloud = _plate(0.0)
    p = torch.tensor([[0.2, 0.1, 0.0]], dtype=DTYPE)  # on the splat plane
    n = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
    up = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE)
    assert bool(grid.mirror_visibility(cloud, p, n, up)[0])


def test_mirror_visibility_convex_sphere_clear():
    cloud = make_sphere_cloud(400, 1.0)
    lo, hi = cloud.bbox()
    grid = AnchorGrid(anchors=place_anchors(lo, hi), bbox_min=lo, bbox_max=hi)
    outward = cloud.positions / cloud.positions.norm(dim=-1, keepdim=True)
    vis = grid.mirror_visibility(cloud, cloud.positions, outward, outward)
    assert float(vis.double().mean()) > 0.95


def test_mirror_visibility_bowl_bottom_blocked():
    cloud = make_bowl_cloud(600, 1.0, rim_deg=60.0)
    lo, hi = cloud.bbox()
    grid = AnchorGrid(anchors=place_anchors(lo, hi), bbox_min=lo, bbox_max=hi)
    bottom = cloud.positions[:, 2] < -0.95
    assert int(bottom.sum()) > 3
    p = cloud.positions[bottom]
    n = -p / p.norm(dim=-1, keepdim=True)  # interior normals
    shallow = torch.tensor([1.0, 0.0, 0.1], dtype=DTYPE)
    shallow = (shallow / shallow.norm()).expand_as(p)
    up = torch.tensor([[0.0, 0.0, 1.0]], dtype=DTYPE).expand_as(p)
    vis_shallow = grid.mirror_visibility(cloud, p, n, shallow)
    vis_up = grid.mirror_visibility(cloud, p, n, up)
    # shallow rays strike the far interior wall; vertical rays escape the rim
    assert float(vis_shallow.double().mean()) < 0.2
    assert bool(vis_up.all())


def test_visibility_runs_without_tracking_gradients():
    cloud = make_sphere_cloud(100, 1.0)
    cloud.positions.requires_grad_(True)
    lo, hi = cloud.bbox()
    grid = AnchorGrid(anchors=place_anchors(lo.detach(), hi.detach()), bbox_min=lo.detach(), bbox_max=hi.detach())
    p = cloud.positions.detach()[:10]
    n = p / p.norm(dim=-1, keepdim=True)
    vis = grid.mirror_visibility(cloud, p, n, n)
    assert vis.dtype == torch.bool and not vis.requires_grad


# ---------------------------------------------------------------------------
# Anchor cubemaps
# ---------------------------------------------------------------------------


def test_build_anchor_grid_counts_and_detachment():
    cloud = make_sphere_cloud(150, 1.0)
    cloud.albedo.requires_grad_(True)
    env = EnvironmentMap.from_latents(constant_env_latents(16, 0.8), 16)
    grid = build_anchor_grid(cloud, env, resolution=8)
    assert grid.count == 52
    assert len(grid.maps) == 52
    for amap in grid.maps[:4]:
        assert amap.base.shape == (6 * 8 * 8, 3)
        assert not amap.base.requires_grad


def test_anchor_map_hit_and_miss_values():
    """Texels that see the object store its diffuse exit radiance; the rest
    copy the global environment."""
    plate = _plate(0.0, albedo=0.6)
    env = EnvironmentMap.from_latents(constant_env_latents(32, 0.8), 32)
    bbox = (torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE), torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE))
    grid = build_anchor_grid(plate, env, resolution=16, bbox=bbox)
    # anchor straight above the plate center
    above = (grid.anchors - torch.tensor([0.0, 0.0, 1.1], dtype=DTYPE)).norm(dim=-1).argmin()
    amap = grid.maps[int(above)]
    dirs = cube_grid(16).directions
    looking_down = dirs[:, 2] < -0.99
    looking_up = dirs[:, 2] > 0.99
    # hit: albedo/pi * irradiance(n) with irradiance ~ pi*c at res 32
    hit_vals = amap.base[looking_down]
    assert float((hit_vals - 0.6 * 0.8).abs().max()) < 0.6 * 0.8 * 0.02
    # miss: the environment itself
    miss_vals = amap.base[looking_up]
    assert float((miss_vals - 0.8).abs().max()) < 1e-9


def test_anchor_map_hit_uses_nearest_surfel():
    cloud = _stack(_plate(0.5, albedo=0.9), _plate(0.0, albedo=0.1))
    env = EnvironmentMap.from_latents(constant_env_latents(32, 1.0), 32)
    bbox = (torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE), torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE))
    grid = build_anchor_grid(cloud, env, resolution=16, bbox=bbox)
    above = (grid.anchors - torch.tensor([0.0, 0.0, 1.1], dtype=DTYPE)).norm(dim=-1).argmin()
    amap = grid.maps[int(above)]
    dirs = cube_grid(16).directions
    looking_down = dirs[:, 2] < -0.99
    vals = amap.base[looking_down]
    # sees the upper plate (albedo 0.9), not the hidden lower one
    assert float(vals.mean()) > 0.8
    assert float((vals - 0.9).abs().max()) < 0.9 * 0.02


def test_hit_normal_faces_incoming_ray():
    """The traced bounce flips the stored surfel normal toward the ray, so an
    anchor below a plate sees the same exit radiance as one above."""
    plate = _plate(0.0, albedo=0.5)
    env = EnvironmentMap.from_latents(constant_env_latents(32, 1.0), 32)
    bbox = (torch.tensor([-1.0, -1.0, -1.0], dtype=DTYPE), torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE))
    grid = build_anchor_grid(plate, env, resolution=16, bbox=bbox)
    dirs = cube_grid(16).directions
    above = (grid.anchors - torch.tensor([0.0, 0.0, 1.1], dtype=DTYPE)).norm(dim=-1).argmin()
    below = (grid.anchors - torch.tensor([0.0, 0.0, -1.1], dtype=DTYPE)).norm(dim=-1).argmin()
    down_val = grid.maps[int(above)].base[dirs[:, 2] < -0.99]
    up_val = grid.maps[int(below)].base[dirs[:, 2] > 0.99]
    assert torch.allclose(down_val.mean(dim=0), up_val.mean(dim=0), atol=1e-9)


def test_needs_refresh_cadence():
    grid = AnchorGrid(anchors=torch.zeros(1, 3, dtype=DTYPE), built_at=100)
    assert not grid.needs_refresh(149, 50)
    assert grid.needs_refresh(150, 50)
    assert grid.needs_refresh(200, 50)
