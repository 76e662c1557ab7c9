"""Polarisation primitives: Stokes vectors, Mueller matrices, Fresnel terms.

Conventions used throughout the package:

* Stokes vectors are stored along a size-4 axis ``(s0, s1, s2, s3)``.  Light
  here is produced by reflection/refraction of unpolarised illumination, so
  ``s3`` (circular polarisation) is carried but always zero.
* The linear-polarisation reference frame is the camera image plane:
  ``s1 > 0`` means polarisation along the camera y axis, and in-plane angles
  grow from y toward x.  :func:`mueller_rotation` rotates that reference
  frame.
* Refraction is always air (eta1 = 1) into a dielectric with relative index
  ``eta`` in ``[1.3, 2.3]``, so total internal reflection cannot occur.

All functions accept broadcastable torch tensors (or python floats) and are
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

DTYPE = torch.float64
STOKES_DIM = 4
_EPS = 1e-12


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(DTYPE) if x.dtype != DTYPE else x
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass
class FresnelSet:
    """Fresnel reflectance/transmittance amplitudes squared for one interface.

    ``t_perp``/``t_par`` are the squared transmission amplitudes and
    ``r_perp``/``r_par`` the squared reflection amplitudes for the field
    components perpendicular/parallel to the plane of incidence.  They obey
    the power balance ``(eta2 * cos_theta2) / (eta1 * cos_theta1) * t + r = 1``
    per component.
    """

    t_perp: Tensor
    t_par: Tensor
    r_perp: Tensor
    r_par: Tensor
    cos_theta1: Tensor
    cos_theta2: Tensor
    eta1: Tensor
    eta2: Tensor


def fresnel_coefficients(eta, cos_theta1) -> FresnelSet:
    """Evaluate Fresnel coefficients for air -> dielectric incidence.

    Args:
        eta: relative index of refraction of the dielectric (> 1).
        cos_theta1: cosine of the incidence angle, in (0, 1].

    Returns:
        A :class:`FresnelSet` with all four squared amplitudes.

    Raises:
        ValueError: if any ``cos_theta1`` is not positive (back-facing
            incidence) or any ``eta`` is not > 1.
    """
    eta = _as_tensor(eta)
    cos1 = _as_tensor(cos_theta1)
    eta, cos1 = torch.broadcast_tensors(eta, cos1)
    if bool((cos1 <= 0).any()):
        raise ValueError("fresnel_coefficients: cos_theta1 must be positive")
    if bool((cos1 > 1.0 + 1e-9).any()):
        raise ValueError("fresnel_coefficients: cos_theta1 must be <= 1")
    if bool((eta <= 1.0).any()):
        raise ValueError("fresnel_coefficients: eta must be > 1")
    cos1 = cos1.clamp(max=1.0)

    eta1 = torch.ones_like(eta)
    sin1_sq = 1.0 - cos1 * cos1
    # Snell: sin_theta2 = sin_theta1 / eta; eta > 1 so the sqrt argument is
    # strictly positive and no total internal reflection can occur.
    cos2 = torch.sqrt(1.0 - sin1_sq / (eta * eta))

    t_perp = (2.0 * eta1 * cos1 / (eta1 * cos1 + eta * cos2)) ** 2
    t_par = (2.0 * eta1 * cos1 / (eta1 * cos2 + eta * cos1)) ** 2
    r_perp = ((eta1 * cos1 - eta * cos2) / (eta1 * cos1 + eta * cos2)) ** 2
    r_par = ((eta1 * cos2 - eta * cos1) / (eta1 * cos2 + eta * cos1)) ** 2
    return FresnelSet(
        t_perp=t_perp,
        t_par=t_par,
        r_perp=r_perp,
        r_par=r_par,
        cos_theta1=cos1,
        cos_theta2=cos2,
        eta1=eta1,
        eta2=eta,
    )


def beta_spec(fresnel: FresnelSet) -> Tensor:
    """Specular polarisation ratio ``(r_perp - r_par) / (r_perp + r_par)``.

    Lies in [0, 1]: reflection favours the perpendicular component.  Equals 1
    at the Brewster angle (``tan(theta) = eta``) where ``r_par`` vanishes.  A
    vanishing denominator maps to 0 by convention.
    """
    num = fresnel.r_perp - fresnel.r_par
    den = fresnel.r_perp + fresnel.r_par
    return torch.where(den > _EPS, num / torch.where(den > _EPS, den, torch.ones_like(den)), torch.zeros_like(den))


def beta_diff(fresnel: FresnelSet) -> Tensor:
    """Diffuse polarisation ratio ``(t_perp - t_par) / (t_perp + t_par)``.

    Non-positive and small in magnitude: transmission favours the parallel
    component, so light exiting the surface after subsurface scattering is
    weakly polarised orthogonally to the specular lobe.
    """
    num = fresnel.t_perp - fresnel.t_par
    den = fresnel.t_perp + fresnel.t_par
    return torch.where(den > _EPS, num / torch.where(den > _EPS, den, torch.ones_like(den)), torch.zeros_like(den))


def mueller_linear_polarizer(theta) -> Tensor:
    """Mueller matrix of an ideal linear polariser at angle ``theta``.

    ``theta`` is measured in the same frame as the Stokes vector (from the
    camera y axis).  Returns a ``(..., 4, 4)`` tensor; a scalar angle yields a
    plain 4x4 matrix.  The matrix is idempotent and halves unpolarised
    intensity (Malus's law).
    """
    theta = _as_tensor(theta)
    c = torch.cos(2.0 * theta)
    s = torch.sin(2.0 * theta)
    one = torch.ones_like(c)
    zero = torch.zeros_like(c)
    rows = [
        torch.stack([one, c, s, zero], dim=-1),
        torch.stack([c, c * c, c * s, zero], dim=-1),
        torch.stack([s, c * s, s * s, zero], dim=-1),
        torch.stack([zero, zero, zero, zero], dim=-1),
    ]
    return 0.5 * torch.stack(rows, dim=-2)


def mueller_rotation(phi) -> Tensor:
    """Mueller matrix rotating the linear-polarisation reference frame by ``phi``.

    With ``c = cos(2 phi)`` and ``s = sin(2 phi)`` the new components are
    ``s1' = c s1 + s s2`` and ``s2' = -s s1 + c s2``; intensity and circular
    polarisation are untouched.  ``rotation(phi) @ rotation(-phi)`` is the
    identity.
    """
    phi = _as_tensor(phi)
    c = torch.cos(2.0 * phi)
    s = torch.sin(2.0 * phi)
    one = torch.ones_like(c)
    zero = torch.zeros_like(c)
    rows = [
        torch.stack([one, zero, zero, zero], dim=-1),
        torch.stack([zero, c, s, zero], dim=-1),
        torch.stack([zero, -s, c, zero], dim=-1),
        torch.stack([zero, zero, zero, one], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def apply_mueller(mueller: Tensor, stokes: Tensor) -> Tensor:
    """Apply a Mueller matrix to Stokes data laid out as ``(..., 4, C)``.

    ``mueller`` may be a single ``(4, 4)`` matrix or batched ``(..., 4, 4)``
    broadcasting against the leading axes of ``stokes``.
    """
    if stokes.shape[-2] != STOKES_DIM:
        raise ValueError("apply_mueller: stokes axis -2 must have size 4")
    return torch.einsum("...ij,...jc->...ic", mueller.to(stokes.dtype), stokes)


def degree_angle_of_polarization(stokes: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel degree and angle of linear polarisation.

    ``dop = sqrt(s1^2 + s2^2) / s0`` and ``aop = 0.5 atan2(s2, s1)``.  Pixels
    with ``s0 == 0`` return (0, 0).

    Args:
        stokes: tensor shaped ``(..., 4, C)``.

    Returns:
        ``(dop, aop)`` each shaped ``(..., C)``; aop in radians in
        (-pi/2, pi/2].
    """
    if stokes.shape[-2] != STOKES_DIM:
        raise ValueError("degree_angle_of_polarization: stokes axis -2 must have size 4")
    s0 = stokes[..., 0, :]
    s1 = stokes[..., 1, :]
    s2 = stokes[..., 2, :]
    lin = torch.sqrt(s1 * s1 + s2 * s2)
    valid = s0.abs() > _EPS
    dop = torch.where(valid, lin / torch.where(valid, s0, torch.ones_like(s0)), torch.zeros_like(s0))
    aop = torch.where(valid, 0.5 * torch.atan2(s2, s1), torch.zeros_like(s0))
    return dop, aop


def unpolarized_stokes(intensity: Tensor) -> Tensor:
    """Lift an intensity tensor ``(..., C)`` to an unpolarised ``(..., 4, C)`` Stokes stack."""
    intensity = _as_tensor(intensity)
    zeros = torch.zeros_like(intensity)
    return torch.stack([intensity, zeros, zeros, zeros], dim=-2)
