"""Surfel clouds, cameras and the alpha-blending attribute rasterizer.

A surfel is a 2D Gaussian disc embedded in 3D: centre ``p``, orthonormal
tangent frame ``(t_u, t_v)`` with normal ``n = t_u x t_v``, per-axis standard
deviations ``(s_u, s_v)`` and scalar opacity, plus material attributes
(albedo, roughness, index of refraction).

A ray ``o + t d`` meets the splat plane where

    u * (s_u t_u) + v * (s_v t_v) - t * d = o - p

which is solved in closed form per (ray, surfel) pair with Cramer's rule;
``(u, v)`` come out pre-scaled so the Gaussian weight is simply
``exp(-(u^2 + v^2) / 2)``.  For camera rays ``d`` has unit z in camera
coordinates, making ``t`` the camera-space depth.

Rasterisation composites surfels front to back:

    C = sum_i attr_i * alpha_i * T_i,   T_i = prod_{j<i} (1 - alpha_j)

with ``alpha_i = opacity_i * weight_i``, a weight cutoff of 1/255, early
termination once the transmittance drops below 1e-4, and depth ties broken
by input order.  Blended attribute maps stay premultiplied by the
accumulated opacity; consumers demodulate where needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .optics import DTYPE

WEIGHT_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_FLOOR = 1e-4
_PARALLEL_EPS = 1e-12


@dataclass
class Camera:
    """Pinhole camera with computer-vision axes: x right, y down, z forward."""

    world_to_camera: Tensor  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = torch.as_tensor(self.world_to_camera, dtype=DTYPE)
        if self.world_to_camera.shape != (4, 4):
            raise ValueError("Camera: world_to_camera must be 4x4")
        r = self.rotation
        if not torch.allclose(r @ r.T, torch.eye(3, dtype=DTYPE), atol=1e-9):
            raise ValueError("Camera: rotation part is not orthonormal")
        if abs(float(torch.det(r)) - 1.0) > 1e-9:
            raise ValueError("Camera: rotation part must have determinant +1")
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("Camera: focal lengths and image size must be positive")

    @property
    def rotation(self) -> Tensor:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> Tensor:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> Tensor:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def axis(self, row: int) -> Tensor:
        """World direction of a camera axis (0 = x right, 1 = y down, 2 = forward)."""
        return self.rotation[row]

    def pixel_dirs_cam(self) -> Tensor:
        """Ray directions through all pixel centres, camera coords, unit z. (H*W, 3)."""
        ys = torch.arange(self.height, dtype=DTYPE) + 0.5
        xs = torch.arange(self.width, dtype=DTYPE) + 0.5
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        d = torch.stack([(xx - self.cx) / self.fx, (yy - self.cy) / self.fy, torch.ones_like(xx)], dim=-1)
        return d.reshape(-1, 3)

    def pixel_dirs_world(self) -> Tensor:
        # R^T d per row, written as explicit sums for bit-reproducibility
        d = self.pixel_dirs_cam()
        r = self.rotation
        return d[:, 0:1] * r[0] + d[:, 1:2] * r[1] + d[:, 2:3] * r[2]

    def ray_dir_cam(self, x: float, y: float) -> Tensor:
        return torch.tensor([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0], dtype=DTYPE)


@dataclass
class SurfelCloud:
    """A set of Gaussian surfels with per-surfel material attributes."""

    positions: Tensor  # (N, 3)
    tangent_u: Tensor  # (N, 3) unit
    tangent_v: Tensor  # (N, 3) unit, orthogonal to tangent_u
    scales: Tensor  # (N, 2) positive std deviations
    opacity: Tensor  # (N,) in [0, 1]
    albedo: Tensor  # (N, 3) in [0, 1]
    roughness: Tensor  # (N,) in [0.08, 1]
    eta: Tensor  # (N,) in [1.3, 2.3]

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3),
            "tangent_u": (n, 3),
            "tangent_v": (n, 3),
            "scales": (n, 2),
            "opacity": (n,),
            "albedo": (n, 3),
            "roughness": (n,),
            "eta": (n,),
        }
        for name, shape in shapes.items():
            t = getattr(self, name)
            if tuple(t.shape) != shape:
                raise ValueError(f"SurfelCloud: {name} must have shape {shape}, got {tuple(t.shape)}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def normals(self) -> Tensor:
        """Surfel normals ``t_u x t_v`` (unit for an orthonormal frame)."""
        return _cross(self.tangent_u, self.tangent_v)

    def validate(self, atol: float = 1e-9):
        """Check the type constraints; raises ValueError on violation."""
        if not bool(torch.isfinite(self.positions).all()):
            raise ValueError("SurfelCloud: non-finite positions")
        nu = torch.linalg.vector_norm(self.tangent_u, dim=-1)
        nv = torch.linalg.vector_norm(self.tangent_v, dim=-1)
        if not bool(((nu - 1).abs() < atol).all()) or not bool(((nv - 1).abs() < atol).all()):
            raise ValueError("SurfelCloud: tangents must be unit length")
        dot = (self.tangent_u * self.tangent_v).sum(-1)
        if not bool((dot.abs() < atol).all()):
            raise ValueError("SurfelCloud: tangents must be orthogonal")
        if not bool((self.scales > 0).all()):
            raise ValueError("SurfelCloud: scales must be positive")
        for name, lo, hi in (
            ("opacity", 0.0, 1.0),
            ("albedo", 0.0, 1.0),
            ("roughness", 0.08, 1.0),
            ("eta", 1.3, 2.3),
        ):
            t = getattr(self, name)
            if not bool(((t >= lo - atol) & (t <= hi + atol)).all()):
                raise ValueError(f"SurfelCloud: {name} out of range [{lo}, {hi}]")

    def bbox(self) -> tuple[Tensor, Tensor]:
        return self.positions.min(dim=0).values, self.positions.max(dim=0).values


def gaussian_weight(u: Tensor, v: Tensor) -> Tensor:
    """Splat-local Gaussian falloff ``exp(-(u^2 + v^2) / 2)``."""
    return torch.exp(-0.5 * (u * u + v * v))


def _cross(a: Tensor, b: Tensor) -> Tensor:
    # componentwise form keeps results bit-reproducible across backends
    # (library cross/matmul kernels may fuse multiply-adds)
    return torch.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        dim=-1,
    )


def _dot_mn(rays: Tensor, per_surfel: Tensor) -> Tensor:
    # (M, 3) x (N, 3) -> (M, N) as an explicit sum of three products; a BLAS
    # matmul here is faster but not bit-reproducible against scalar oracles
    return (
        rays[:, 0:1] * per_surfel[None, :, 0]
        + rays[:, 1:2] * per_surfel[None, :, 1]
        + rays[:, 2:3] * per_surfel[None, :, 2]
    )


def solve_splat_rays(cloud: SurfelCloud, origin: Tensor, dirs: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Intersect rays from a common origin with every splat plane.

    Args:
        cloud: the surfels.
        origin: (3,) common ray origin, world coordinates.
        dirs: (M, 3) ray directions (need not be unit length).

    Returns:
        ``(u, v, t, ok)`` each (M, N): scaled in-plane coordinates, the ray
        parameter, and a validity mask that is False for rays parallel to a
        splat plane or hits behind the origin (t <= 0).
    """
    a = cloud.scales[:, 0:1] * cloud.tangent_u  # (N, 3)
    b = cloud.scales[:, 1:2] * cloud.tangent_v
    m = origin.unsqueeze(0) - cloud.positions  # (N, 3)
    cross_ab = _cross(a, b)
    cross_mb = _cross(m, b)
    cross_am = _cross(a, m)
    denom = -_dot_mn(dirs, cross_ab)  # (M, N)
    ok = denom.abs() > _PARALLEL_EPS
    safe = torch.where(ok, denom, torch.ones_like(denom))
    u = -_dot_mn(dirs, cross_mb) / safe
    v = -_dot_mn(dirs, cross_am) / safe
    t = (m * cross_ab).sum(-1).unsqueeze(0) / safe
    ok = ok & (t > 0)
    return u, v, t, ok


def solve_splat_rays_batched(
    cloud: SurfelCloud, origins: Tensor, dirs: Tensor, chunk: int = 2048
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Like :func:`solve_splat_rays` but with one origin per ray. (M, N) outputs."""
    a = cloud.scales[:, 0:1] * cloud.tangent_u
    b = cloud.scales[:, 1:2] * cloud.tangent_v
    cross_ab = _cross(a, b)
    outs = []
    for s in range(0, origins.shape[0], chunk):
        o = origins[s : s + chunk]
        d = dirs[s : s + chunk]
        m = o.unsqueeze(1) - cloud.positions.unsqueeze(0)  # (m, N, 3)
        denom = -_dot_mn(d, cross_ab)
        ok = denom.abs() > _PARALLEL_EPS
        safe = torch.where(ok, denom, torch.ones_like(denom))
        cross_mb = _cross(m, b.unsqueeze(0).expand_as(m))
        cross_am = _cross(a.unsqueeze(0).expand_as(m), m)
        u = -(d.unsqueeze(1) * cross_mb).sum(-1) / safe
        v = -(d.unsqueeze(1) * cross_am).sum(-1) / safe
        t = (m * cross_ab.unsqueeze(0)).sum(-1) / safe
        ok = ok & (t > 0)
        outs.append((u, v, t, ok))
    return tuple(torch.cat(parts, dim=0) for parts in zip(*outs))


def splat_point(cloud: SurfelCloud, index: int, u: Tensor, v: Tensor) -> Tensor:
    """World point of splat-local coordinates on one surfel."""
    return (
        cloud.positions[index]
        + u * cloud.scales[index, 0] * cloud.tangent_u[index]
        + v * cloud.scales[index, 1] * cloud.tangent_v[index]
    )


@dataclass
class Fragments:
    """Per (pixel, surfel) intersection data feeding the compositor.

    ``z``/``alpha`` are (P, N) with invalid entries at ``z = +inf`` /
    ``alpha = 0``; ``attributes`` is the (N, C) per-surfel channel matrix
    (albedo, camera-facing normal, roughness, eta) and ``dirs_world`` the
    per-pixel ray directions used to place per-fragment world points.
    """

    z: Tensor
    alpha: Tensor
    valid: Tensor
    attributes: Tensor
    dirs_world: Tensor
    origin: Tensor
    attribute_labels: tuple = (
        "albedo.R",
        "albedo.G",
        "albedo.B",
        "normal.x",
        "normal.y",
        "normal.z",
        "roughness",
        "eta",
    )


@dataclass
class GBuffer:
    """Alpha-blended attribute maps; all premultiplied by accumulated opacity."""

    albedo: Tensor  # (H, W, 3)
    normal: Tensor  # (H, W, 3), renormalised after blending
    roughness: Tensor  # (H, W)
    ior: Tensor  # (H, W)
    depth: Tensor  # (H, W)
    opacity: Tensor  # (H, W)
    world_position: Tensor  # (H, W, 3)
    camera: Camera = field(repr=False, default=None)

    def shading_mask(self, threshold: float = 0.5) -> Tensor:
        return self.opacity >= threshold


def splat_fragments(cloud: SurfelCloud, camera: Camera) -> Fragments:
    """Intersect every pixel ray with every surfel and gather blend inputs."""
    origin = camera.center
    dirs_world = camera.pixel_dirs_world()  # unit z in camera space
    u, v, z, ok = solve_splat_rays(cloud, origin, dirs_world)
    w = gaussian_weight(torch.where(ok, u, torch.zeros_like(u)), torch.where(ok, v, torch.zeros_like(v)))
    valid = ok & (w >= WEIGHT_CUTOFF)
    alpha = torch.where(valid, cloud.opacity.unsqueeze(0) * w, torch.zeros_like(w))
    z = torch.where(valid, z, torch.full_like(z, math.inf))

    normals = cloud.normals
    facing = ((origin.unsqueeze(0) - cloud.positions) * normals).sum(-1)
    flip = torch.where(facing >= 0, torch.ones_like(facing), -torch.ones_like(facing))
    attrs = torch.cat(
        [
            cloud.albedo,
            normals * flip.unsqueeze(-1),
            cloud.roughness.unsqueeze(-1),
            cloud.eta.unsqueeze(-1),
        ],
        dim=-1,
    )
    return Fragments(z=z, alpha=alpha, valid=valid, attributes=attrs, dirs_world=dirs_world, origin=origin)


def composite_fragments(frags: Fragments, width: int, height: int) -> GBuffer:
    """Front-to-back alpha blending of sorted fragments into a G-buffer."""
    p = frags.z.shape[0]
    n_attr = frags.attributes.shape[1]
    out = torch.zeros(p, n_attr + 4, dtype=frags.z.dtype)  # + depth + world xyz
    acc = torch.zeros(p, dtype=frags.z.dtype)
    k_max = int(frags.valid.sum(dim=1).max()) if frags.valid.any() else 0
    if k_max > 0:
        z_sorted, order = torch.sort(frags.z, dim=1, stable=True)
        order = order[:, :k_max]
        z_sorted = z_sorted[:, :k_max]
        alpha_sorted = torch.gather(frags.alpha, 1, order)
        trans = torch.ones(p, dtype=frags.z.dtype)
        zero = torch.zeros(p, dtype=frags.z.dtype)
        for k in range(k_max):
            alpha_k = alpha_sorted[:, k]
            active = trans >= TRANSMITTANCE_FLOOR
            w = torch.where(active, trans * alpha_k, zero)
            attr_k = frags.attributes[order[:, k]]  # (P, C)
            z_k = torch.where(torch.isfinite(z_sorted[:, k]), z_sorted[:, k], zero)
            point_k = frags.origin.unsqueeze(0) + z_k.unsqueeze(-1) * frags.dirs_world
            out = out + torch.cat([attr_k, z_k.unsqueeze(-1), point_k], dim=-1) * w.unsqueeze(-1)
            acc = acc + w
            trans = trans * (1.0 - alpha_k)

    def img(x: Tensor) -> Tensor:
        return x.reshape(height, width, *x.shape[1:])

    normal = out[:, 3:6]
    norm = torch.sqrt(
        normal[:, 0] * normal[:, 0] + normal[:, 1] * normal[:, 1] + normal[:, 2] * normal[:, 2]
    )
    good = (acc > 0) & (norm > 1e-12)
    safe = torch.where(good, norm, torch.ones_like(norm))
    normal = torch.where(good.unsqueeze(-1), normal / safe.unsqueeze(-1), torch.zeros_like(normal))

    return GBuffer(
        albedo=img(out[:, 0:3]),
        normal=img(normal),
        roughness=img(out[:, 6]),
        ior=img(out[:, 7]),
        depth=img(out[:, 8]),
        opacity=img(acc),
        world_position=img(out[:, 9:12]),
    )


def rasterize(cloud: SurfelCloud, camera: Camera) -> GBuffer:
    """Render the surfel cloud into an attribute G-buffer for one camera."""
    frags = splat_fragments(cloud, camera)
    gb = composite_fragments(frags, camera.width, camera.height)
    gb.camera = camera
    return gb


def depth_to_normal(gbuffer: GBuffer, opacity_threshold: float = 0.5) -> Tensor:
    """Normals from the blended depth map via central finite differences.

    The depth map is demodulated by opacity, unprojected to world points, and
    the normal at a pixel is the normalised cross product of the central
    x/y neighbour differences, oriented toward the camera.  Pixels whose
    opacity is below the threshold, or with any required neighbour missing,
    get a zero normal (so isolated single-pixel islands produce none).
    """
    cam = gbuffer.camera
    h, w = gbuffer.depth.shape
    valid = gbuffer.opacity >= opacity_threshold
    acc = torch.where(valid, gbuffer.opacity, torch.ones_like(gbuffer.opacity))
    z = torch.where(valid, gbuffer.depth / acc, torch.zeros_like(gbuffer.depth))
    points = cam.center.reshape(1, 1, 3) + z.unsqueeze(-1) * cam.pixel_dirs_world().reshape(h, w, 3)

    normal = torch.zeros(h, w, 3, dtype=gbuffer.depth.dtype)
    if h < 3 or w < 3:
        return normal
    ok = valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:] & valid[:-2, 1:-1] & valid[2:, 1:-1]
    dpdx = points[1:-1, 2:] - points[1:-1, :-2]
    dpdy = points[2:, 1:-1] - points[:-2, 1:-1]
    n = torch.cross(dpdx, dpdy, dim=-1)
    norm = torch.linalg.vector_norm(n, dim=-1, keepdim=True)
    n = torch.where((norm > 1e-12) & ok.unsqueeze(-1), n / norm.clamp(min=1e-300), torch.zeros_like(n))
    to_cam = cam.center.reshape(1, 1, 3) - points[1:-1, 1:-1]
    sign = torch.where((n * to_cam).sum(-1, keepdim=True) < 0, -torch.ones_like(norm), torch.ones_like(norm))
    inner = n * sign
    normal[1:-1, 1:-1] = inner
    return normal
