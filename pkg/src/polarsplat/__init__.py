"""Polarimetric forward and inverse rendering of glossy dielectric objects
represented as 2D Gaussian surfels.

The package is organised around the rendering pipeline:

* :mod:`polarsplat.optics` -- Stokes vectors, Mueller matrices, Fresnel terms.
* :mod:`polarsplat.surfels` -- surfel clouds, cameras, ray-splat intersection
  and the alpha-blending rasterizer that produces attribute G-buffers.
* :mod:`polarsplat.envlight` -- cube environment maps with a roughness mip
  chain, diffuse irradiance and the split-sum BRDF lookup table.
* :mod:`polarsplat.shading` -- deferred polarimetric shading (Stokes images).
* :mod:`polarsplat.occlusion` -- anchor grids of local cubemaps that
  approximate self-occlusion for both diffuse and specular transport.
* :mod:`polarsplat.losses` / :mod:`polarsplat.training` -- photometric,
  polarimetric and geometric losses plus the Adam-based inverse renderer.
* :mod:`polarsplat.fileio`, :mod:`polarsplat.bundle`,
  :mod:`polarsplat.synthetic`, :mod:`polarsplat.metrics`,
  :mod:`polarsplat.cli` -- file formats, scene bundles, synthetic scenes,
  quality metrics and the command line front end.
"""

from .errors import ConfigError, NumericError
from .optics import (
    FresnelSet,
    fresnel_coefficients,
    beta_spec,
    beta_diff,
    mueller_linear_polarizer,
    mueller_rotation,
    apply_mueller,
    degree_angle_of_polarization,
)
from .surfels import Camera, SurfelCloud, GBuffer, rasterize, depth_to_normal
from .envlight import EnvironmentMap, SplitSumLUT, CubeGrid, env_activation, env_activation_inverse, diffuse_irradiance
from .shading import StokesImage, RenderResult, render_stokes, simulate_lp_capture
from .occlusion import AnchorGrid, place_anchors, build_anchor_grid
from .training import TrainConfig, LossWeights, SceneParameters, train, ior_activation, ior_activation_inverse

__all__ = [
    "ConfigError",
    "NumericError",
    "FresnelSet",
    "fresnel_coefficients",
    "beta_spec",
    "beta_diff",
    "mueller_linear_polarizer",
    "mueller_rotation",
    "apply_mueller",
    "degree_angle_of_polarization",
    "Camera",
    "SurfelCloud",
    "GBuffer",
    "rasterize",
    "depth_to_normal",
    "EnvironmentMap",
    "SplitSumLUT",
    "CubeGrid",
    "env_activation",
    "env_activation_inverse",
    "diffuse_irradiance",
    "StokesImage",
    "RenderResult",
    "render_stokes",
    "simulate_lp_capture",
    "AnchorGrid",
    "place_anchors",
    "build_anchor_grid",
    "TrainConfig",
    "LossWeights",
    "SceneParameters",
    "train",
    "ior_activation",
    "ior_activation_inverse",
]

__version__ = "0.1.0"
