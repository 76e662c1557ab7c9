"""Deferred polarimetric shading of surfel G-buffers.

Shading runs on the blended attribute maps rather than per surfel: pixels
whose accumulated opacity passes a threshold are demodulated (divided by
opacity) so every shaded attribute is a convex combination of surfel values,
then lit as a dielectric under the environment:

* specular: split-sum lookup ``(F0 tau0 + tau1) * prefiltered_env(reflect)``;
* diffuse: ``(1 - F_schlick) * albedo / pi * irradiance(n)``.

Both lobes are lifted to Stokes vectors in the camera frame.  With the
normal's in-plane angle ``phi_n`` measured from the camera y axis toward x,
an intensity ``L`` becomes ``[L, +b c2 L, -b s2 L, 0]`` where ``c2/s2`` are
cos/sin of ``2 phi_n`` and ``b`` is the specular or diffuse polarisation
ratio at the incidence angle ``theta_n = acos(n . w_o)``.  The specular
ratio is non-negative (peaking at 1 at Brewster incidence) while the diffuse
ratio is non-positive, so the two lobes polarise orthogonally.

An optional anchor grid replaces the distant-environment diffuse term with a
blend of localised per-anchor evaluations, and swaps the specular term to
its localised counterpart on pixels whose mirror direction is blocked by the
object itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .envlight import EnvironmentMap, SplitSumLUT, diffuse_irradiance, fresnel_f0, schlick_fresnel
from .optics import DTYPE, apply_mueller, beta_diff, beta_spec, fresnel_coefficients, mueller_linear_polarizer
from .surfels import Camera, GBuffer, SurfelCloud, rasterize

_EPS = 1e-12


@dataclass
class StokesImage:
    """Stokes-vector image, ``stokes`` shaped (H, W, 4, 3) (RGB channels)."""

    stokes: Tensor
    component: str = "total"

    @property
    def s0(self) -> Tensor:
        return self.stokes[..., 0, :]

    @property
    def s1(self) -> Tensor:
        return self.stokes[..., 1, :]

    @property
    def s2(self) -> Tensor:
        return self.stokes[..., 2, :]


@dataclass
class ShadingGeometry:
    """Per-pixel geometric shading inputs derived from a G-buffer."""

    mask: Tensor  # (H, W) bool: opaque enough and front-facing
    points: Tensor  # (H, W, 3) demodulated world positions
    normals: Tensor  # (H, W, 3)
    view_dirs: Tensor  # (H, W, 3) unit, surface point -> camera
    cos_theta: Tensor  # (H, W) n . w_o
    phi: Tensor  # (H, W) in-plane normal angle from camera y toward x
    cos_two_phi: Tensor  # (H, W)
    sin_two_phi: Tensor  # (H, W)


def shading_geometry(gbuffer: GBuffer, opacity_threshold: float = 0.5) -> ShadingGeometry:
    """Demodulate the G-buffer and derive shading angles.

    The returned mask excludes low-opacity pixels and back-facing pixels
    (``n . w_o <= 0``).  ``phi`` is zero where the normal is parallel to the
    view axis (the polarisation terms vanish there anyway).
    """
    cam = gbuffer.camera
    acc = gbuffer.opacity
    covered = acc >= opacity_threshold
    safe_acc = torch.where(covered, acc, torch.ones_like(acc))
    points = torch.where(covered.unsqueeze(-1), gbuffer.world_position / safe_acc.unsqueeze(-1), torch.zeros_like(gbuffer.world_position))
    normals = gbuffer.normal
    view = cam.center.reshape(1, 1, 3) - points
    vnorm = torch.linalg.vector_norm(view, dim=-1, keepdim=True).clamp(min=_EPS)
    view = view / vnorm
    cos_theta = (normals * view).sum(-1)
    mask = covered & (cos_theta > _EPS) & (torch.linalg.vector_norm(normals, dim=-1) > 0.5)

    # normal in camera coordinates; only the image-plane components matter
    n_cam = torch.einsum("ij,hwj->hwi", cam.rotation, normals)
    nx = n_cam[..., 0]
    ny = n_cam[..., 1]
    h2 = nx * nx + ny * ny
    planar = h2 > 1e-24
    safe_h2 = torch.where(planar, h2, torch.ones_like(h2))
    cos2 = torch.where(planar, (ny * ny - nx * nx) / safe_h2, torch.ones_like(h2))
    sin2 = torch.where(planar, 2.0 * nx * ny / safe_h2, torch.zeros_like(h2))
    phi = torch.where(planar, torch.atan2(torch.where(planar, nx, torch.zeros_like(nx)), torch.where(planar, ny, torch.ones_like(ny))), torch.zeros_like(h2))
    return ShadingGeometry(
        mask=mask,
        points=points,
        normals=normals,
        view_dirs=view,
        cos_theta=cos_theta,
        phi=phi,
        cos_two_phi=cos2,
        sin_two_phi=sin2,
    )


def polarized_stokes(radiance: Tensor, beta: Tensor, cos_two_phi: Tensor, sin_two_phi: Tensor) -> Tensor:
    """Lift radiance (M, 3) to Stokes (M, 4, 3) with linear polarisation ratio beta."""
    s1 = beta.unsqueeze(-1) * cos_two_phi.unsqueeze(-1) * radiance
    s2 = -beta.unsqueeze(-1) * sin_two_phi.unsqueeze(-1) * radiance
    return torch.stack([radiance, s1, s2, torch.zeros_like(radiance)], dim=-2)


@dataclass
class RenderResult:
    """Output of :func:`render_stokes`: Stokes components plus the G-buffer."""

    total: StokesImage
    diffuse: StokesImage
    specular: StokesImage
    gbuffer: GBuffer
    geometry: ShadingGeometry

    @property
    def mask(self) -> Tensor:
        return self.geometry.mask


def render_stokes(
    cloud: SurfelCloud,
    camera: Camera,
    env: EnvironmentMap,
    lut: SplitSumLUT,
    anchor_grid=None,
    weighting: str = "literal",
    opacity_threshold: float = 0.5,
) -> RenderResult:
    """Rasterise and shade one view into polarimetric Stokes images.

    Args:
        cloud: surfel scene.
        camera: view to render.
        env: activated environment with its mip chain.
        lut: split-sum BRDF table.
        anchor_grid: optional :class:`polarsplat.occlusion.AnchorGrid`; when
            given, diffuse shading is localised everywhere and specular
            shading is localised on pixels whose mirror ray is self-occluded.
        weighting: anchor blend mode, "literal" (weights grow with distance,
            as specified) or "inverse" (inverse distance).
        opacity_threshold: minimum blended opacity for a pixel to be shaded.

    Returns:
        A :class:`RenderResult`; unshaded pixels carry zero Stokes vectors,
        and ``total = diffuse + specular`` holds exactly.
    """
    gb = rasterize(cloud, camera)
    geom = shading_geometry(gb, opacity_threshold)
    h, w = gb.opacity.shape
    flat_mask = geom.mask.reshape(-1)
    idx = flat_mask.nonzero(as_tuple=True)[0]
    stokes_shape = (h * w, 4, 3)
    diff_img = torch.zeros(stokes_shape, dtype=DTYPE)
    spec_img = torch.zeros(stokes_shape, dtype=DTYPE)

    if idx.numel() > 0:
        acc = gb.opacity.reshape(-1)[idx]
        albedo = gb.albedo.reshape(-1, 3)[idx] / acc.unsqueeze(-1)
        rough = (gb.roughness.reshape(-1)[idx] / acc).clamp(0.08, 1.0)
        eta = (gb.ior.reshape(-1)[idx] / acc).clamp(1.3, 2.3)
        n = geom.normals.reshape(-1, 3)[idx]
        p = geom.points.reshape(-1, 3)[idx]
        wo = geom.view_dirs.reshape(-1, 3)[idx]
        cos_t = geom.cos_theta.reshape(-1)[idx].clamp(max=1.0)
        c2 = geom.cos_two_phi.reshape(-1)[idx]
        s2 = geom.sin_two_phi.reshape(-1)[idx]

        fr = fresnel_coefficients(eta, cos_t)
        b_s = beta_spec(fr)
        b_d = beta_diff(fr)
        f0 = fresnel_f0(eta)
        tau0, tau1 = lut.lookup(cos_t, rough)
        scale_spec = (f0 * tau0 + tau1).unsqueeze(-1)
        fresnel_d = schlick_fresnel(f0, cos_t).unsqueeze(-1)
        kd = (1.0 - fresnel_d) * albedo / math.pi

        reflect = 2.0 * cos_t.unsqueeze(-1) * n - wo
        reflect = reflect / torch.linalg.vector_norm(reflect, dim=-1, keepdim=True).clamp(min=_EPS)

        spec_radiance = scale_spec * env.sample(reflect, rough)
        diff_radiance = kd * diffuse_irradiance(env, n)

        if anchor_grid is not None:
            wgt = anchor_grid.blend_weights(p, weighting)  # (M, A)
            local_diff = torch.zeros_like(diff_radiance)
            local_spec = torch.zeros_like(spec_radiance)
            for a, amap in enumerate(anchor_grid.maps):
                wa = wgt[:, a].unsqueeze(-1)
                local_diff = local_diff + wa * (kd * diffuse_irradiance(amap, n))
                local_spec = local_spec + wa * (scale_spec * amap.sample(reflect, rough))
            diff_radiance = local_diff
            visible = anchor_grid.mirror_visibility(cloud, p, n, reflect)
            spec_radiance = torch.where(visible.unsqueeze(-1), spec_radiance, local_spec)

        diff_img = diff_img.index_put((idx,), polarized_stokes(diff_radiance, b_d, c2, s2))
        spec_img = spec_img.index_put((idx,), polarized_stokes(spec_radiance, b_s, c2, s2))

    diff_img = diff_img.reshape(h, w, 4, 3)
    spec_img = spec_img.reshape(h, w, 4, 3)
    return RenderResult(
        total=StokesImage(diff_img + spec_img, "total"),
        diffuse=StokesImage(diff_img, "diffuse"),
        specular=StokesImage(spec_img, "specular"),
        gbuffer=gb,
        geometry=geom,
    )


def simulate_lp_capture(stokes: Tensor | StokesImage, theta) -> Tensor:
    """Intensity seen through an ideal linear polariser at angle ``theta``.

    Accepts a Stokes tensor (..., 4, C) or a :class:`StokesImage`; returns
    the s0 component of the filtered light, ``0.5 (s0 + c2t s1 + s2t s2)``.
    """
    s = stokes.stokes if isinstance(stokes, StokesImage) else stokes
    return apply_mueller(mueller_linear_polarizer(theta), s)[..., 0, :]
