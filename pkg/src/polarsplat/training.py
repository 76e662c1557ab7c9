"""Inverse rendering: scene parameterisation and the optimisation loop.

Every optimisable quantity lives in an unconstrained latent and is mapped
into its physical range on materialisation:

* albedo, opacity: sigmoid into (0, 1);
* roughness: ``0.08 + 0.92 * sigmoid`` into (0.08, 1);
* index of refraction: ``1.3 + sigmoid`` into (1.3, 2.3);
* scales: exponential;
* tangent frames: unnormalised quaternions (normalised on use), whose
  rotation matrix columns are (t_u, t_v, n);
* environment: raw latents activated by the environment activation;
* polariser angles (partial supervision): raw radians.

The loop is plain Adam over per-group learning rates.  Anchor grids (when
enabled) are rebuilt on a fixed cadence from the current detached scene, so
gradients never flow through the occlusion approximation.  Losses are
averaged over the training views; every eighth view is held out by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import torch
from torch import Tensor

from .envlight import EnvironmentMap, SplitSumLUT, env_activation_inverse
from .errors import ConfigError, NumericError
from .losses import LossWeights, total_loss
from .occlusion import build_anchor_grid
from .optics import DTYPE
from .shading import render_stokes
from .surfels import SurfelCloud

_LOGIT_EPS = 1e-6

PARAMETER_GROUPS = (
    "positions",
    "rotations",
    "log_scales",
    "opacity_logit",
    "albedo_logit",
    "roughness_logit",
    "ior_latent",
    "env_latents",
    "lp_angles",
)

DEFAULT_LEARNING_RATES = {
    "positions": 1e-4,
    "rotations": 1e-3,
    "log_scales": 1e-3,
    "opacity_logit": 2e-2,
    "albedo_logit": 5e-2,
    "roughness_logit": 5e-2,
    "ior_latent": 5e-2,
    "env_latents": 5e-2,
    "lp_angles": 2e-2,
}


def ior_activation(latent: Tensor) -> Tensor:
    """Index of refraction ``1.3 + sigmoid(latent)``, range (1.3, 2.3)."""
    latent = torch.as_tensor(latent, dtype=DTYPE) if not isinstance(latent, Tensor) else latent
    return 1.3 + torch.sigmoid(latent)


def ior_activation_inverse(eta: Tensor) -> Tensor:
    eta = torch.as_tensor(eta, dtype=DTYPE) if not isinstance(eta, Tensor) else eta
    if bool(((eta <= 1.3) | (eta >= 2.3)).any()):
        raise ValueError("ior_activation_inverse: eta must lie strictly inside (1.3, 2.3)")
    return _logit(eta - 1.3)


def _logit(x: Tensor) -> Tensor:
    x = x.clamp(_LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return torch.log(x) - torch.log1p(-x)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unnormalised quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True).clamp(min=1e-12)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def rotmat_to_quat(m: Tensor) -> Tensor:
    """Rotation matrices (N, 3, 3) -> unit quaternions (N, 4), branch-stable."""
    n = m.shape[0]
    q = torch.empty(n, 4, dtype=m.dtype)
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    trace = m00 + m11 + m22
    choice = torch.stack([trace, m00, m11, m22], dim=-1).argmax(dim=-1)

    sel = choice == 0
    if bool(sel.any()):
        s = torch.sqrt(1.0 + trace[sel]) * 2.0
        q[sel, 0] = 0.25 * s
        q[sel, 1] = (m21[sel] - m12[sel]) / s
        q[sel, 2] = (m02[sel] - m20[sel]) / s
        q[sel, 3] = (m10[sel] - m01[sel]) / s
    sel = choice == 1
    if bool(sel.any()):
        s = torch.sqrt(1.0 + m00[sel] - m11[sel] - m22[sel]) * 2.0
        q[sel, 0] = (m21[sel] - m12[sel]) / s
        q[sel, 1] = 0.25 * s
        q[sel, 2] = (m01[sel] + m10[sel]) / s
        q[sel, 3] = (m02[sel] + m20[sel]) / s
    sel = choice == 2
    if bool(sel.any()):
        s = torch.sqrt(1.0 - m00[sel] + m11[sel] - m22[sel]) * 2.0
        q[sel, 0] = (m02[sel] - m20[sel]) / s
        q[sel, 1] = (m01[sel] + m10[sel]) / s
        q[sel, 2] = 0.25 * s
        q[sel, 3] = (m12[sel] + m21[sel]) / s
    sel = choice == 3
    if bool(sel.any()):
        s = torch.sqrt(1.0 - m00[sel] - m11[sel] + m22[sel]) * 2.0
        q[sel, 0] = (m10[sel] - m01[sel]) / s
        q[sel, 1] = (m02[sel] + m20[sel]) / s
        q[sel, 2] = (m12[sel] + m21[sel]) / s
        q[sel, 3] = 0.25 * s
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)


@dataclass
class SceneParameters:
    """Latent scene state; materialise with :meth:`to_cloud` / :meth:`env_map`."""

    positions: Tensor
    rotations: Tensor
    log_scales: Tensor
    opacity_logit: Tensor
    albedo_logit: Tensor
    roughness_logit: Tensor
    ior_latent: Tensor
    env_latents: Tensor
    env_resolution: int
    lp_angles: Tensor | None = None

    @classmethod
    def from_scene(
        cls,
        cloud: SurfelCloud,
        env_latents: Tensor,
        env_resolution: int,
        lp_angles_deg=None,
    ) -> "SceneParameters":
        frames = torch.stack([cloud.tangent_u, cloud.tangent_v, cloud.normals], dim=-1)
        lp = None
        if lp_angles_deg is not None:
            lp = torch.as_tensor(lp_angles_deg, dtype=DTYPE) * math.pi / 180.0
        return cls(
            positions=cloud.positions.clone().detach(),
            rotations=rotmat_to_quat(frames).detach(),
            log_scales=cloud.scales.clamp(min=1e-12).log().detach(),
            opacity_logit=_logit(cloud.opacity).detach(),
            albedo_logit=_logit(cloud.albedo).detach(),
            roughness_logit=_logit((cloud.roughness - 0.08) / 0.92).detach(),
            ior_latent=ior_activation_inverse(cloud.eta.clamp(1.3 + 1e-9, 2.3 - 1e-9)).detach(),
            env_latents=env_latents.clone().detach(),
            env_resolution=env_resolution,
            lp_angles=lp,
        )

    def to_cloud(self) -> SurfelCloud:
        rot = quat_to_rotmat(self.rotations)
        return SurfelCloud(
            positions=self.positions,
            tangent_u=rot[..., :, 0],
            tangent_v=rot[..., :, 1],
            scales=self.log_scales.exp(),
            opacity=torch.sigmoid(self.opacity_logit),
            albedo=torch.sigmoid(self.albedo_logit),
            roughness=0.08 + 0.92 * torch.sigmoid(self.roughness_logit),
            eta=ior_activation(self.ior_latent),
        )

    def env_map(self) -> EnvironmentMap:
        return EnvironmentMap.from_latents(self.env_latents, self.env_resolution)

    def groups(self) -> dict[str, Tensor]:
        out = {}
        for name in PARAMETER_GROUPS:
            t = getattr(self, name, None)
            if t is not None:
                out[name] = t
        return out

    def clone(self) -> "SceneParameters":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.detach().clone() if isinstance(v, Tensor) else v
        return SceneParameters(**kw)

    def with_group(self, name: str, tensor: Tensor) -> "SceneParameters":
        """Copy with one latent group replaced (for finite-difference probes)."""
        return replace(self, **{name: tensor})


@dataclass
class TrainConfig:
    """Options controlling :func:`train`; all keys are also INI config keys."""

    iterations: int = 300
    mode: str = "full"  # "full" Stokes supervision or "partial" polariser captures
    optimize_geometry: bool = False
    optimize_materials: bool = True
    optimize_environment: bool = True
    optimize_lp_angles: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rates: dict = field(default_factory=dict)
    gridmap_enabled: bool = False
    gridmap_weighting: str = "literal"
    gridmap_refresh_interval: int = 300
    gridmap_resolution: int = 16
    opacity_threshold: float = 0.5
    holdout_every: int = 8
    divergence_factor: float = 1e3
    seed: int = 0
    log_every: int = 0

    def lr(self, group: str) -> float:
        return float(self.learning_rates.get(group, DEFAULT_LEARNING_RATES[group]))

    def active_groups(self) -> list[str]:
        groups = []
        if self.optimize_geometry:
            groups += ["positions", "rotations", "log_scales", "opacity_logit"]
        if self.optimize_materials:
            groups += ["albedo_logit", "roughness_logit", "ior_latent"]
        if self.optimize_environment:
            groups += ["env_latents"]
        if self.optimize_lp_angles:
            groups += ["lp_angles"]
        return groups


@dataclass
class TrainResult:
    params: SceneParameters
    history: list
    anchor_grid: object = None

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else math.nan


_DEFAULT_LUT: SplitSumLUT | None = None


def default_lut() -> SplitSumLUT:
    global _DEFAULT_LUT
    if _DEFAULT_LUT is None:
        _DEFAULT_LUT = SplitSumLUT.build()
    return _DEFAULT_LUT


def training_views(observations, config: TrainConfig) -> list:
    """Drop held-out observations (every ``holdout_every``-th by default)."""
    kept = []
    for i, obs in enumerate(observations):
        held = getattr(obs, "holdout", None)
        if held is None and config.holdout_every > 0:
            held = (i + 1) % config.holdout_every == 0
        if not held:
            kept.append(obs)
    if not kept:
        raise ConfigError("training_views: no observations left after hold-out")
    return kept


def compute_loss(
    params: SceneParameters,
    observations,
    config: TrainConfig,
    lut: SplitSumLUT | None = None,
    anchor_grid=None,
) -> tuple[Tensor, list[dict]]:
    """Mean total loss over the given observations (no hold-out filtering)."""
    lut = lut or default_lut()
    cloud = params.to_cloud()
    env = params.env_map()
    total = torch.zeros((), dtype=DTYPE)
    parts = []
    for obs in observations:
        result = render_stokes(
            cloud,
            obs.camera,
            env,
            lut,
            anchor_grid=anchor_grid if config.gridmap_enabled else None,
            weighting=config.gridmap_weighting,
            opacity_threshold=config.opacity_threshold,
        )
        value, p = total_loss(result, obs, config.weights, params.lp_angles)
        total = total + value
        parts.append({k: float(v.detach()) for k, v in p.items()})
    return total / len(observations), parts


def evaluate_loss(
    params: SceneParameters,
    observations,
    config: TrainConfig,
    lut: SplitSumLUT | None = None,
    anchor_grid=None,
) -> float:
    with torch.no_grad():
        value, _ = compute_loss(params, observations, config, lut, anchor_grid)
    return float(value)


def parameter_gradients(
    params: SceneParameters,
    observations,
    config: TrainConfig,
    lut: SplitSumLUT | None = None,
    groups: list[str] | None = None,
) -> dict[str, Tensor]:
    """Autograd gradients of the mean loss for every requested latent group."""
    groups = groups or [g for g in config.active_groups() if getattr(params, g, None) is not None]
    tensors = {}
    for g in groups:
        t = getattr(params, g).detach().clone().requires_grad_(True)
        tensors[g] = t
    probe = params
    for g, t in tensors.items():
        probe = probe.with_group(g, t)
    value, _ = compute_loss(probe, observations, config, lut)
    value.backward()
    return {g: t.grad.detach().clone() for g, t in tensors.items()}


def _check_finite(value: Tensor, parts: list[dict], iteration: int):
    if not bool(torch.isfinite(value)):
        bad = sorted({k for p in parts for k, v in p.items() if not math.isfinite(v)})
        raise NumericError(
            f"non-finite loss at iteration {iteration}"
            + (f" (terms: {', '.join(bad)})" if bad else "")
        )


def train(
    params: SceneParameters,
    observations,
    config: TrainConfig,
    lut: SplitSumLUT | None = None,
) -> TrainResult:
    """Optimise the latent scene against the observations with Adam.

    Raises :class:`NumericError` if the loss turns non-finite or grows past
    ``divergence_factor`` times its starting value.  Fully deterministic for
    a fixed seed and inputs.
    """
    torch.manual_seed(config.seed)
    lut = lut or default_lut()
    views = training_views(observations, config)
    active = [g for g in config.active_groups() if getattr(params, g, None) is not None]
    if not active:
        raise ConfigError("train: no parameter group enabled for optimisation")
    param_groups = []
    for g in active:
        t = getattr(params, g).detach().clone().requires_grad_(True)
        setattr(params, g, t)
        param_groups.append({"params": [t], "lr": config.lr(g)})
    optimizer = torch.optim.Adam(param_groups)

    history: list[float] = []
    anchor_grid = None
    initial = None
    for it in range(config.iterations):
        if config.gridmap_enabled and (
            anchor_grid is None or anchor_grid.needs_refresh(it, config.gridmap_refresh_interval)
        ):
            with torch.no_grad():
                snapshot = params.clone()
                anchor_grid = build_anchor_grid(
                    snapshot.to_cloud(),
                    snapshot.env_map(),
                    resolution=config.gridmap_resolution,
                    iteration=it,
                )
        optimizer.zero_grad()
        value, parts = compute_loss(params, views, config, lut, anchor_grid)
        _check_finite(value, parts, it)
        scalar = float(value.detach())
        history.append(scalar)
        if initial is None:
            initial = scalar
        elif scalar > config.divergence_factor * max(initial, 1e-12):
            raise NumericError(
                f"loss diverged at iteration {it}: {scalar:.6g} vs initial {initial:.6g}"
            )
        value.backward()
        optimizer.step()
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            print(f"iter {it:5d}  loss {scalar:.6f}")
    for g in active:
        setattr(params, g, getattr(params, g).detach())
    return TrainResult(params=params, history=history, anchor_grid=anchor_grid)
