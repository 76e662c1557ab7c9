"""Environment lighting: cube maps, roughness mip chain, irradiance, LUT.

The environment is an optimisable latent cube map.  Latents map to radiance
through :func:`env_activation`; the activated base level is prefiltered into
a small mip chain whose levels correspond to increasing GGX roughness, so a
single bilinear lookup plus a level interpolation approximates the glossy
prefiltered environment term of the split-sum approximation.  The second
split-sum factor is tabulated by :class:`SplitSumLUT`.

Cube faces are indexed +x,-x,+y,-y,+z,-z.  A texel at face-local coordinates
``(u, v)`` in [-1, 1]^2 maps to the direction formed by placing the face sign
on the major axis and ``(u, v)`` on the two remaining axes in ascending x,y,z
order.  Texels are stored row-major (v is the row), faces concatenated, so a
map of resolution D is a flat ``(6*D*D, 3)`` tensor.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .errors import ConfigError
from .optics import DTYPE

ROUGHNESS_MIN = 0.08
ROUGHNESS_MAX = 1.0
MAX_MIP_LEVELS = 5


def env_activation(x: Tensor) -> Tensor:
    """Map unconstrained latents to non-negative radiance.

    Sigmoid for x <= 0 and ``x + 0.5`` for x > 0: bounded below by zero,
    unbounded above, continuous at 0 where both branches give 0.5.
    """
    x = torch.as_tensor(x, dtype=DTYPE) if not isinstance(x, Tensor) else x
    return torch.where(x > 0, x + 0.5, torch.sigmoid(x))


def env_activation_inverse(y: Tensor) -> Tensor:
    """Inverse of :func:`env_activation` for y > 0."""
    y = torch.as_tensor(y, dtype=DTYPE) if not isinstance(y, Tensor) else y
    if bool((y <= 0).any()):
        raise ValueError("env_activation_inverse: radiance must be positive")
    lo = torch.log(y.clamp(max=0.5) / (1.0 - y.clamp(max=0.5)).clamp(min=1e-300))
    return torch.where(y > 0.5, y - 0.5, lo)


class CubeGrid:
    """Texel geometry of a cube map at a fixed resolution.

    Exposes texel centre directions, exact texel solid angles, and the
    direction -> face/uv mapping used for bilinear sampling with per-face
    clamp-to-edge addressing.
    """

    def __init__(self, resolution: int):
        if resolution < 2:
            raise ValueError("CubeGrid: resolution must be >= 2")
        self.resolution = int(resolution)
        d = self.resolution
        # face-local texel centre coordinates in [-1, 1]
        centers = (torch.arange(d, dtype=DTYPE) + 0.5) / d * 2.0 - 1.0
        vv, uu = torch.meshgrid(centers, centers, indexing="ij")
        u = uu.reshape(-1)
        v = vv.reshape(-1)
        dirs = []
        for face in range(6):
            dirs.append(self._face_uv_to_dir(face, u, v))
        self.directions = torch.cat(dirs, dim=0)  # (6*d*d, 3) unit vectors

        edges = torch.arange(d + 1, dtype=DTYPE) / d * 2.0 - 1.0
        area = self._projected_area(edges.view(-1, 1), edges.view(1, -1))
        # inclusion-exclusion over the texel corners; identical for all faces
        sa = area[1:, 1:] - area[:-1, 1:] - area[1:, :-1] + area[:-1, :-1]
        self.solid_angles = sa.reshape(-1).repeat(6)  # (6*d*d,)

    @staticmethod
    def _projected_area(u: Tensor, v: Tensor) -> Tensor:
        return torch.atan2(u * v, torch.sqrt(u * u + v * v + 1.0))

    @staticmethod
    def _face_uv_to_dir(face: int, u: Tensor, v: Tensor) -> Tensor:
        axis, sign = divmod(face, 2)
        sign = 1.0 if sign == 0 else -1.0
        other = [i for i in range(3) if i != axis]
        d = torch.empty(u.shape + (3,), dtype=DTYPE)
        d[..., axis] = sign
        d[..., other[0]] = u
        d[..., other[1]] = v
        return d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)

    @staticmethod
    def dir_to_face_uv(dirs: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Map unit directions to (face index, u, v); differentiable in u, v."""
        a = dirs.abs()
        axis = a.argmax(dim=-1)
        major = torch.gather(dirs, -1, axis.unsqueeze(-1)).squeeze(-1)
        face = axis * 2 + (major < 0).long()
        inv = 1.0 / major.abs()
        out_uv = []
        for other_slot in range(2):
            # other axes in ascending order: for axis 0 -> (1,2), 1 -> (0,2), 2 -> (0,1)
            other = torch.where(
                axis == 0,
                torch.tensor(1 + other_slot, device=dirs.device),
                torch.where(
                    axis == 1,
                    torch.tensor(0 if other_slot == 0 else 2, device=dirs.device),
                    torch.tensor(other_slot, device=dirs.device),
                ),
            )
            out_uv.append(torch.gather(dirs, -1, other.unsqueeze(-1)).squeeze(-1) * inv)
        return face, out_uv[0], out_uv[1]

    def bilinear_taps(self, dirs: Tensor) -> tuple[Tensor, Tensor]:
        """Flattened texel indices (M, 4) and weights (M, 4) for sampling."""
        d = self.resolution
        face, u, v = self.dir_to_face_uv(dirs)
        x = (u + 1.0) * 0.5 * d - 0.5
        y = (v + 1.0) * 0.5 * d - 0.5
        x0 = torch.floor(x)
        y0 = torch.floor(y)
        fx = x - x0
        fy = y - y0
        xi0 = x0.long().clamp(0, d - 1)
        xi1 = (x0.long() + 1).clamp(0, d - 1)
        yi0 = y0.long().clamp(0, d - 1)
        yi1 = (y0.long() + 1).clamp(0, d - 1)
        base = face * d * d
        idx = torch.stack(
            [base + yi0 * d + xi0, base + yi0 * d + xi1, base + yi1 * d + xi0, base + yi1 * d + xi1],
            dim=-1,
        )
        w = torch.stack(
            [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy],
            dim=-1,
        )
        return idx, w


_GRID_CACHE: dict[int, CubeGrid] = {}


def cube_grid(resolution: int) -> CubeGrid:
    grid = _GRID_CACHE.get(resolution)
    if grid is None:
        grid = CubeGrid(resolution)
        _GRID_CACHE[resolution] = grid
    return grid


def mip_roughness_schedule(resolution: int) -> tuple[list[int], list[float]]:
    """Resolutions and roughness values of the mip chain for a base map.

    Level 0 keeps the base resolution at the minimum roughness 0.08; deeper
    levels halve the resolution while roughness grows geometrically to 1.0,
    capped at 5 levels and a 2x2 smallest face.
    """
    if resolution < 8 or resolution & (resolution - 1) != 0:
        raise ConfigError(f"environment resolution must be a power of two >= 8, got {resolution}")
    n_levels = min(MAX_MIP_LEVELS, int(math.log2(resolution)))
    resolutions = [resolution >> k for k in range(n_levels)]
    ratio = ROUGHNESS_MAX / ROUGHNESS_MIN
    roughness = [ROUGHNESS_MIN * ratio ** (k / (n_levels - 1)) for k in range(n_levels)]
    roughness[-1] = ROUGHNESS_MAX
    return resolutions, roughness


def _ggx_ndf(cos_nh: Tensor, alpha: float) -> Tensor:
    a2 = alpha * alpha
    denom = cos_nh * cos_nh * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


_PREFILTER_CACHE: dict[tuple[int, int, float], Tensor] = {}


def prefilter_weights(base_resolution: int, level_resolution: int, roughness: float) -> Tensor:
    """Dense GGX prefilter matrix mapping base texels to one mip level.

    Row ``i`` holds the normalised kernel ``D_ggx(n_i . h) max(n_i . w, 0) dw``
    over base texels ``w`` for the output direction ``n_i``.  Rows sum to one,
    so constant environments are preserved exactly.  Cached per
    (base resolution, level resolution, roughness).
    """
    key = (base_resolution, level_resolution, float(roughness))
    cached = _PREFILTER_CACHE.get(key)
    if cached is not None:
        return cached
    base = cube_grid(base_resolution)
    out = cube_grid(level_resolution)
    alpha = float(roughness) ** 2
    in_dirs = base.directions
    in_dw = base.solid_angles
    rows = []
    chunk = max(1, int(2_000_000 // in_dirs.shape[0]))
    for start in range(0, out.directions.shape[0], chunk):
        n = out.directions[start : start + chunk]  # (m, 3)
        cos_nw = n @ in_dirs.T  # (m, K)
        h = n.unsqueeze(1) + in_dirs.unsqueeze(0)
        h = h / torch.linalg.vector_norm(h, dim=-1, keepdim=True).clamp(min=1e-12)
        cos_nh = (h * n.unsqueeze(1)).sum(-1).clamp(0.0, 1.0)
        w = _ggx_ndf(cos_nh, alpha) * cos_nw.clamp(min=0.0) * in_dw
        rows.append(w / w.sum(dim=1, keepdim=True))
    weights = torch.cat(rows, dim=0)
    _PREFILTER_CACHE[key] = weights
    return weights


class EnvironmentMap:
    """Activated cube environment with a roughness-indexed mip chain.

    ``levels[0]`` is the base radiance (roughness 0.08); deeper levels are
    GGX-prefiltered copies at geometrically increasing roughness.  The chain
    is built with cached dense convolution matrices, so construction from
    latents is differentiable and cheap enough to run every iteration.
    """

    def __init__(self, levels: list[Tensor], level_roughness: list[float], resolution: int, latents: Tensor | None = None):
        self.levels = levels
        self.level_roughness = level_roughness
        self.resolution = resolution
        self.latents = latents

    @classmethod
    def from_latents(cls, latents: Tensor, resolution: int) -> "EnvironmentMap":
        if latents.shape != (6 * resolution * resolution, 3):
            raise ConfigError(
                f"environment latents must have shape ({6 * resolution * resolution}, 3) for resolution {resolution}"
            )
        base = env_activation(latents)
        env = cls._build(base, resolution)
        env.latents = latents
        return env

    @classmethod
    def from_radiance(cls, radiance: Tensor, resolution: int) -> "EnvironmentMap":
        if radiance.shape != (6 * resolution * resolution, 3):
            raise ConfigError("radiance shape does not match resolution")
        return cls._build(radiance, resolution)

    @classmethod
    def constant(cls, value, resolution: int) -> "EnvironmentMap":
        value = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
        if value.numel() == 1:
            value = value.repeat(3)
        radiance = value.expand(6 * resolution * resolution, 3).contiguous()
        return cls._build(radiance, resolution)

    @classmethod
    def _build(cls, base: Tensor, resolution: int) -> "EnvironmentMap":
        resolutions, roughness = mip_roughness_schedule(resolution)
        levels = [base]
        for res, r in zip(resolutions[1:], roughness[1:]):
            levels.append(prefilter_weights(resolution, res, r) @ base)
        return cls(levels, roughness, resolution)

    @property
    def base(self) -> Tensor:
        return self.levels[0]

    def sample_level(self, level: int, dirs: Tensor) -> Tensor:
        grid = cube_grid(self.resolution >> level)
        idx, w = grid.bilinear_taps(dirs)
        return (self.levels[level][idx] * w.unsqueeze(-1)).sum(dim=-2)

    def sample(self, dirs: Tensor, roughness) -> Tensor:
        """Bilinear + level-interpolated radiance lookup.

        Args:
            dirs: unit directions, shape (M, 3).
            roughness: scalar or (M,) tensor; clamped to [0.08, 1].

        Returns:
            Radiance, shape (M, 3).
        """
        rough = torch.as_tensor(roughness, dtype=DTYPE)
        if rough.ndim == 0:
            rough = rough.expand(dirs.shape[0])
        rough = rough.clamp(ROUGHNESS_MIN, ROUGHNESS_MAX)
        out = torch.zeros(dirs.shape[0], 3, dtype=DTYPE)
        bounds = self.level_roughness
        for k in range(len(bounds)):
            if k == 0:
                sel = rough <= bounds[0]
            else:
                sel = (rough > bounds[k - 1]) & (rough <= bounds[k])
            if not bool(sel.any()):
                continue
            d = dirs[sel]
            if k == 0:
                out[sel] = self.sample_level(0, d)
            else:
                lo = self.sample_level(k - 1, d)
                hi = self.sample_level(k, d)
                t = ((rough[sel] - bounds[k - 1]) / (bounds[k] - bounds[k - 1])).unsqueeze(-1)
                vals = lo + (hi - lo) * t
                out = out.index_put((sel.nonzero(as_tuple=True)[0],), vals)
        return out


class _DiffuseIrradiance(torch.autograd.Function):
    """Cosine-hemisphere integral of a cube map, chunked to bound memory."""

    CHUNK = 4096

    @staticmethod
    def forward(ctx, normals: Tensor, radiance: Tensor, dirs: Tensor, dw: Tensor) -> Tensor:
        out = torch.empty(normals.shape[0], radiance.shape[1], dtype=normals.dtype)
        for s in range(0, normals.shape[0], _DiffuseIrradiance.CHUNK):
            n = normals[s : s + _DiffuseIrradiance.CHUNK]
            w = (n @ dirs.T).clamp(min=0.0) * dw
            out[s : s + _DiffuseIrradiance.CHUNK] = w @ radiance
        ctx.save_for_backward(normals, radiance, dirs, dw)
        return out

    @staticmethod
    def backward(ctx, grad_out: Tensor):
        normals, radiance, dirs, dw = ctx.saved_tensors
        grad_n = torch.zeros_like(normals) if ctx.needs_input_grad[0] else None
        grad_rad = torch.zeros_like(radiance) if ctx.needs_input_grad[1] else None
        for s in range(0, normals.shape[0], _DiffuseIrradiance.CHUNK):
            n = normals[s : s + _DiffuseIrradiance.CHUNK]
            g = grad_out[s : s + _DiffuseIrradiance.CHUNK]
            cos = n @ dirs.T
            w = cos.clamp(min=0.0) * dw
            if grad_rad is not None:
                grad_rad += w.T @ g
            if grad_n is not None:
                mask_dw = (cos > 0).to(n.dtype) * dw
                grad_n[s : s + _DiffuseIrradiance.CHUNK] = ((g @ radiance.T) * mask_dw) @ dirs
        return grad_n, grad_rad, None, None


def diffuse_irradiance(env: EnvironmentMap, normals: Tensor) -> Tensor:
    """Irradiance ``sum E(w) max(n.w, 0) dw`` over the base level texels.

    For a constant environment ``c`` this converges to ``pi * c`` as the
    resolution grows.  Shape (M, 3) for normals (M, 3).

    Differentiable with respect to both the normals and the environment.
    """
    grid = cube_grid(env.resolution)
    return _DiffuseIrradiance.apply(normals, env.base, grid.directions, grid.solid_angles)


def _radical_inverse_vdc(bits: Tensor) -> Tensor:
    b = bits.to(torch.int64) & 0xFFFFFFFF
    b = ((b << 16) | (b >> 16)) & 0xFFFFFFFF
    b = (((b & 0x55555555) << 1) | ((b & 0xAAAAAAAA) >> 1)) & 0xFFFFFFFF
    b = (((b & 0x33333333) << 2) | ((b & 0xCCCCCCCC) >> 2)) & 0xFFFFFFFF
    b = (((b & 0x0F0F0F0F) << 4) | ((b & 0xF0F0F0F0) >> 4)) & 0xFFFFFFFF
    b = (((b & 0x00FF00FF) << 8) | ((b & 0xFF00FF00) >> 8)) & 0xFFFFFFFF
    return b.to(DTYPE) * 2.3283064365386963e-10  # / 2^32


def hammersley(count: int) -> Tensor:
    """Deterministic low-discrepancy points in [0,1)^2, shape (count, 2)."""
    i = torch.arange(count, dtype=torch.int64)
    return torch.stack([i.to(DTYPE) / count, _radical_inverse_vdc(i)], dim=-1)


def _importance_sample_ggx(xi: Tensor, alpha: float) -> Tensor:
    phi = 2.0 * math.pi * xi[:, 0]
    cos_t = torch.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    sin_t = torch.sqrt((1.0 - cos_t * cos_t).clamp(min=0.0))
    return torch.stack([sin_t * torch.cos(phi), sin_t * torch.sin(phi), cos_t], dim=-1)


class SplitSumLUT:
    """Precomputed split-sum BRDF factors (tau0, tau1) over (cos theta, roughness).

    The specular environment term becomes ``F0 * tau0 + tau1`` once the
    prefiltered radiance is factored out.  Built by GGX importance sampling
    with height-correlated Smith shadowing and a Hammersley sequence, so the
    table is fully deterministic.
    """

    def __init__(self, tau0: Tensor, tau1: Tensor, cos_range=(0.0, 1.0), rough_range=(ROUGHNESS_MIN, ROUGHNESS_MAX), sample_count: int = 0):
        self.tau0 = tau0
        self.tau1 = tau1
        self.cos_range = tuple(float(x) for x in cos_range)
        self.rough_range = tuple(float(x) for x in rough_range)
        self.sample_count = int(sample_count)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.tau0.shape)

    @classmethod
    def build(cls, n_cos: int = 32, n_rough: int = 32, sample_count: int = 16384) -> "SplitSumLUT":
        if sample_count < 1024:
            raise ConfigError("SplitSumLUT.build: sample_count must be >= 1024")
        cos_centers = (torch.arange(n_cos, dtype=DTYPE) + 0.5) / n_cos
        rough_centers = ROUGHNESS_MIN + (torch.arange(n_rough, dtype=DTYPE) + 0.5) / n_rough * (ROUGHNESS_MAX - ROUGHNESS_MIN)
        xi = hammersley(sample_count)
        tau0 = torch.empty(n_cos, n_rough, dtype=DTYPE)
        tau1 = torch.empty(n_cos, n_rough, dtype=DTYPE)
        sin_v = torch.sqrt((1.0 - cos_centers**2).clamp(min=0.0))
        view = torch.stack([sin_v, torch.zeros_like(cos_centers), cos_centers], dim=-1)  # (Nc, 3)
        for j, r in enumerate(rough_centers.tolist()):
            alpha = r * r
            h = _importance_sample_ggx(xi, alpha)  # (S, 3)
            vdoth = view @ h.T  # (Nc, S)
            ndotl = 2.0 * vdoth * h[:, 2] - view[:, 2:3]  # L.z
            ndoth = h[:, 2].clamp(min=1e-12)
            ndotv = cos_centers.unsqueeze(1)
            valid = (ndotl > 0) & (vdoth > 0)
            a2 = alpha * alpha
            lam_v = torch.sqrt(ndotl * ndotl * (1.0 - a2) + a2)
            lam_l = torch.sqrt(ndotv * ndotv * (1.0 - a2) + a2).expand_as(lam_v)
            vis = 0.5 / (ndotv * lam_v + ndotl * lam_l).clamp(min=1e-12)
            gvis = 4.0 * ndotl * vis * vdoth / ndoth
            gvis = torch.where(valid, gvis, torch.zeros_like(gvis))
            fc = torch.where(valid, (1.0 - vdoth).clamp(min=0.0) ** 5, torch.zeros_like(gvis))
            tau0[:, j] = ((1.0 - fc) * gvis).sum(dim=1) / sample_count
            tau1[:, j] = (fc * gvis).sum(dim=1) / sample_count
        return cls(tau0, tau1, sample_count=sample_count)

    def lookup(self, cos_theta: Tensor, roughness: Tensor) -> tuple[Tensor, Tensor]:
        """Bilinear lookup; clamped to the table range. Returns (tau0, tau1)."""
        n_cos, n_rough = self.shape
        cos_theta = torch.as_tensor(cos_theta, dtype=DTYPE)
        roughness = torch.as_tensor(roughness, dtype=DTYPE)
        x = cos_theta.clamp(self.cos_range[0], self.cos_range[1]) * n_cos - 0.5
        rlo, rhi = self.rough_range
        y = (roughness.clamp(rlo, rhi) - rlo) / (rhi - rlo) * n_rough - 0.5
        x0 = torch.floor(x)
        y0 = torch.floor(y)
        fx = (x - x0).clamp(0.0, 1.0)
        fy = (y - y0).clamp(0.0, 1.0)
        xi0 = x0.long().clamp(0, n_cos - 1)
        xi1 = (x0.long() + 1).clamp(0, n_cos - 1)
        yi0 = y0.long().clamp(0, n_rough - 1)
        yi1 = (y0.long() + 1).clamp(0, n_rough - 1)

        def bilerp(t: Tensor) -> Tensor:
            return (
                t[xi0, yi0] * (1 - fx) * (1 - fy)
                + t[xi1, yi0] * fx * (1 - fy)
                + t[xi0, yi1] * (1 - fx) * fy
                + t[xi1, yi1] * fx * fy
            )

        return bilerp(self.tau0), bilerp(self.tau1)


def fresnel_f0(eta) -> Tensor:
    """Normal-incidence reflectance ``((1 - eta) / (1 + eta))^2``."""
    eta = torch.as_tensor(eta, dtype=DTYPE)
    return ((1.0 - eta) / (1.0 + eta)) ** 2


def schlick_fresnel(f0: Tensor, cos_theta: Tensor) -> Tensor:
    """Schlick's approximation ``F0 + (1 - F0)(1 - cos)^5``."""
    return f0 + (1.0 - f0) * (1.0 - cos_theta).clamp(min=0.0) ** 5
