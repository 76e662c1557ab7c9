"""Synthetic desk-scale scenes for testing and closed-loop experiments.

Primitives keep the same recipe: surfel centres sampled on an analytic
surface, tangent frames derived from the surface normal, splat scales sized
so neighbouring discs overlap into a closed opaque sheet.  Cameras sit on a
ring around the object; environments are random, hemisphere-split or
constant latent cube maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .bundle import Observation, SceneBundle
from .envlight import env_activation_inverse
from .errors import ConfigError
from .optics import DTYPE
from .shading import render_stokes, simulate_lp_capture
from .surfels import Camera, SurfelCloud
from .training import default_lut


def fibonacci_sphere(count: int) -> Tensor:
    """Near-uniform unit sphere points (count, 3)."""
    i = torch.arange(count, dtype=DTYPE)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = torch.sqrt((1.0 - z * z).clamp(min=0.0))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = golden * i
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)


def tangent_frame(normals: Tensor) -> tuple[Tensor, Tensor]:
    """Orthonormal (t_u, t_v) with ``t_u x t_v = n`` for unit normals."""
    ref = torch.where(
        (normals[:, 2:3].abs() < 0.9).expand_as(normals),
        torch.tensor([0.0, 0.0, 1.0], dtype=normals.dtype).expand_as(normals),
        torch.tensor([1.0, 0.0, 0.0], dtype=normals.dtype).expand_as(normals),
    )
    tu = torch.cross(ref, normals, dim=-1)
    tu = tu / torch.linalg.vector_norm(tu, dim=-1, keepdim=True)
    tv = torch.cross(normals, tu, dim=-1)
    return tu, tv


def _material_tensors(count: int, positions: Tensor, radius: float, albedo_style: str, albedo, roughness: float, eta: float, opacity: float):
    if albedo_style == "gradient":
        alb = 0.3 + 0.4 * (positions / radius + 1.0) / 2.0
    elif albedo_style == "uniform":
        alb = torch.as_tensor(albedo, dtype=DTYPE).expand(count, 3).contiguous()
    else:
        raise ConfigError(f"unknown albedo_style {albedo_style!r}")
    return (
        alb.clamp(0.02, 0.98),
        torch.full((count,), float(roughness), dtype=DTYPE),
        torch.full((count,), float(eta), dtype=DTYPE),
        torch.full((count,), float(opacity), dtype=DTYPE),
    )


def make_sphere_cloud(
    count: int = 500,
    radius: float = 1.0,
    roughness: float = 0.3,
    eta: float = 1.5,
    opacity: float = 0.95,
    albedo_style: str = "gradient",
    albedo=(0.6, 0.6, 0.6),
    overlap: float = 0.75,
) -> SurfelCloud:
    normals = fibonacci_sphere(count)
    positions = radius * normals
    tu, tv = tangent_frame(normals)
    scale = overlap * math.sqrt(4.0 * math.pi * radius * radius / count)
    scales = torch.full((count, 2), scale, dtype=DTYPE)
    alb, rough, eta_t, opac = _material_tensors(count, positions, radius, albedo_style, albedo, roughness, eta, opacity)
    return SurfelCloud(positions, tu, tv, scales, opac, alb, rough, eta_t)


def make_bowl_cloud(
    count: int = 600,
    radius: float = 1.0,
    rim_deg: float = 60.0,
    roughness: float = 0.3,
    eta: float = 1.5,
    opacity: float = 0.95,
    albedo_style: str = "uniform",
    albedo=(0.35, 0.3, 0.28),
    overlap: float = 0.75,
) -> SurfelCloud:
    """Open spherical cap (interior of the lower sphere), rim at +z side.

    Normals point inward (toward the bowl axis), so cameras above see the
    concave interior whose lower points are strongly self-occluded.
    """
    z_rim = math.cos(math.radians(rim_deg))  # cap spans polar angle [rim_deg, 180] from +z
    i = torch.arange(count, dtype=DTYPE)
    z = -1.0 + (z_rim + 1.0) * (i + 0.5) / count  # uniform in area over the cap
    r = torch.sqrt((1.0 - z * z).clamp(min=0.0))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = golden * i
    outward = torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)
    positions = radius * outward
    normals = -outward  # interior surface
    tu, tv = tangent_frame(normals)
    cap_area = 2.0 * math.pi * radius * radius * (1.0 + z_rim)
    scale = overlap * math.sqrt(cap_area / count)
    scales = torch.full((count, 2), scale, dtype=DTYPE)
    alb, rough, eta_t, opac = _material_tensors(count, positions, radius, albedo_style, albedo, roughness, eta, opacity)
    return SurfelCloud(positions, tu, tv, scales, opac, alb, rough, eta_t)


def make_corner_cloud(
    count: int = 400,
    size: float = 1.0,
    roughness: float = 0.4,
    eta: float = 1.5,
    opacity: float = 0.95,
    albedo_style: str = "uniform",
    albedo=(0.5, 0.45, 0.4),
    overlap: float = 0.9,
) -> SurfelCloud:
    """Two square plates meeting at a right angle (floor z=0, wall x=0)."""
    half = count // 2
    side = int(math.sqrt(half))
    side = max(side, 2)
    lin = (torch.arange(side, dtype=DTYPE) + 0.5) / side * size
    a, b = torch.meshgrid(lin, lin, indexing="ij")
    floor = torch.stack([a.reshape(-1), b.reshape(-1) - size / 2, torch.zeros(side * side, dtype=DTYPE)], dim=-1)
    wall = torch.stack([torch.zeros(side * side, dtype=DTYPE), b.reshape(-1) - size / 2, a.reshape(-1)], dim=-1)
    positions = torch.cat([floor, wall], dim=0)
    n = positions.shape[0]
    normals = torch.cat(
        [
            torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand(side * side, 3),
            torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE).expand(side * side, 3),
        ],
        dim=0,
    ).contiguous()
    tu, tv = tangent_frame(normals)
    scale = overlap * size / side
    scales = torch.full((n, 2), scale, dtype=DTYPE)
    alb, rough, eta_t, opac = _material_tensors(n, positions, size, albedo_style, albedo, roughness, eta, opacity)
    return SurfelCloud(positions, tu, tv, scales, opac, alb, rough, eta_t)


def look_at_camera(position, target, width: int, height: int, fov_deg: float = 40.0, up=(0.0, 0.0, 1.0)) -> Camera:
    position = torch.as_tensor(position, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    up = torch.as_tensor(up, dtype=DTYPE)
    forward = target - position
    forward = forward / torch.linalg.vector_norm(forward)
    x = torch.cross(forward, up, dim=-1)
    if float(torch.linalg.vector_norm(x)) < 1e-8:
        x = torch.cross(forward, torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE), dim=-1)
    x = x / torch.linalg.vector_norm(x)
    y = torch.cross(forward, x, dim=-1)
    rot = torch.stack([x, y, forward], dim=0)
    w2c = torch.eye(4, dtype=DTYPE)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ position
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(world_to_camera=w2c, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def ring_cameras(
    count: int,
    radius: float = 4.0,
    elevations_deg=(20.0, -10.0),
    image_size: int = 48,
    fov_deg: float = 40.0,
    center=(0.0, 0.0, 0.0),
) -> list:
    center_t = torch.as_tensor(center, dtype=DTYPE)
    cams = []
    elevations = list(elevations_deg)
    for k in range(count):
        az = 2.0 * math.pi * k / count
        el = math.radians(elevations[k % len(elevations)])
        pos = center_t + radius * torch.tensor(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)], dtype=DTYPE
        )
        cams.append(look_at_camera(pos, center_t, image_size, image_size, fov_deg))
    return cams


def random_env_latents(resolution: int, seed: int = 0, mean: float = 0.3, std: float = 0.4) -> Tensor:
    gen = torch.Generator().manual_seed(seed)
    return mean + std * torch.randn(6 * resolution * resolution, 3, generator=gen, dtype=DTYPE)


def hemisphere_env_latents(resolution: int, bright: float = 1.5, dark: float = 0.05) -> Tensor:
    """Bright upper hemisphere (+z), dark lower: strong occlusion contrast."""
    from .envlight import cube_grid

    dirs = cube_grid(resolution).directions
    radiance = torch.where(
        dirs[:, 2:3] > 0,
        torch.full((1, 1), float(bright), dtype=DTYPE),
        torch.full((1, 1), float(dark), dtype=DTYPE),
    ).expand(-1, 3)
    return env_activation_inverse(radiance.contiguous())


def constant_env_latents(resolution: int, value: float = 0.8) -> Tensor:
    radiance = torch.full((6 * resolution * resolution, 3), float(value), dtype=DTYPE)
    return env_activation_inverse(radiance)


@dataclass
class SceneSpec:
    """Synthesis options; mirrors the [scene] section of config files."""

    primitive: str = "sphere"
    surfels: int = 500
    radius: float = 1.0
    rim_deg: float = 60.0
    roughness: float = 0.3
    eta: float = 1.5
    opacity: float = 0.95
    albedo_style: str = "gradient"
    albedo: tuple = (0.6, 0.6, 0.6)
    overlap: float = 0.75
    views: int = 8
    image_size: int = 48
    fov_deg: float = 40.0
    camera_radius: float = 4.0
    elevations_deg: tuple = (20.0, -10.0)
    env_resolution: int = 32
    env_style: str = "random"
    env_mean: float = 0.3
    env_std: float = 0.4
    env_bright: float = 1.5
    env_dark: float = 0.05
    env_constant: float = 0.8
    mode: str = "full"
    lp_angles_deg: tuple = (0.0, 90.0)
    seed: int = 0
    name: str = "scene"


def make_cloud(spec: SceneSpec) -> SurfelCloud:
    common = dict(
        roughness=spec.roughness,
        eta=spec.eta,
        opacity=spec.opacity,
        albedo_style=spec.albedo_style,
        albedo=spec.albedo,
        overlap=spec.overlap,
    )
    if spec.primitive == "sphere":
        return make_sphere_cloud(spec.surfels, spec.radius, **common)
    if spec.primitive == "bowl":
        return make_bowl_cloud(spec.surfels, spec.radius, spec.rim_deg, **common)
    if spec.primitive == "corner":
        return make_corner_cloud(spec.surfels, spec.radius, **common)
    raise ConfigError(f"unknown primitive {spec.primitive!r}")


def make_env_latents(spec: SceneSpec) -> Tensor:
    if spec.env_style == "random":
        return random_env_latents(spec.env_resolution, spec.seed, spec.env_mean, spec.env_std)
    if spec.env_style == "hemisphere":
        return hemisphere_env_latents(spec.env_resolution, spec.env_bright, spec.env_dark)
    if spec.env_style == "constant":
        return constant_env_latents(spec.env_resolution, spec.env_constant)
    raise ConfigError(f"unknown env_style {spec.env_style!r}")


def synthesize_bundle(spec: SceneSpec, lut=None) -> SceneBundle:
    """Build the scene and render its ground-truth observations.

    Observations are rendered with the plain distant-environment model (no
    anchor grid), in linear radiometric units.  In "partial" mode each view
    yields one capture per polariser angle instead of a Stokes image.
    """
    from .envlight import EnvironmentMap

    lut = lut or default_lut()
    cloud = make_cloud(spec)
    env_latents = make_env_latents(spec)
    env = EnvironmentMap.from_latents(env_latents, spec.env_resolution)
    cameras = ring_cameras(
        spec.views, spec.camera_radius, spec.elevations_deg, spec.image_size, spec.fov_deg
    )
    observations = []
    with torch.no_grad():
        for i, cam in enumerate(cameras):
            result = render_stokes(cloud, cam, env, lut)
            mask = result.gbuffer.shading_mask()
            if spec.mode == "partial":
                for j, angle in enumerate(spec.lp_angles_deg):
                    cap = simulate_lp_capture(result.total, math.radians(angle))
                    observations.append(
                        Observation(
                            camera=cam,
                            mask=mask,
                            intensity=cap,
                            lp_index=j,
                            name=f"view{i:03d}.lp{j}",
                        )
                    )
            else:
                observations.append(
                    Observation(camera=cam, mask=mask, stokes=result.total.stokes, name=f"view{i:03d}")
                )
    return SceneBundle(
        cloud=cloud,
        env_latents=env_latents,
        env_resolution=spec.env_resolution,
        cameras=cameras,
        observations=observations,
        mode=spec.mode,
        lp_angles_deg=list(spec.lp_angles_deg) if spec.mode == "partial" else None,
        name=spec.name,
    )
