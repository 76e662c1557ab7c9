"""Scene bundles: a directory with surfels, environment, cameras, observations.

Layout::

    bundle.json          scene metadata, cameras, observation records
    surfels.fpak         per-surfel arrays (positions, frames, materials)
    environment.fimg     environment latents
    obs/view###.*.fimg   ground-truth Stokes / capture / mask images

Bundles are the interchange unit between the CLI verbs: synthesis writes
one, rendering/decomposition/relighting read one, training reads one and
writes an optimised copy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError
from .fileio import (
    env_from_file,
    env_to_file,
    intensity_from_file,
    intensity_to_file,
    read_array_pack,
    read_float_image,
    scalar_map_to_file,
    stokes_from_file,
    stokes_to_file,
    write_array_pack,
)
from .optics import DTYPE
from .surfels import Camera, SurfelCloud


@dataclass
class Observation:
    """One supervision image: full Stokes or a single polariser capture."""

    camera: Camera
    mask: Tensor  # (H, W) bool
    stokes: Tensor | None = None  # (H, W, 4, 3)
    intensity: Tensor | None = None  # (H, W, 3)
    lp_index: int | None = None
    holdout: bool | None = None
    name: str = "view"


@dataclass
class SceneBundle:
    cloud: SurfelCloud
    env_latents: Tensor
    env_resolution: int
    cameras: list
    observations: list = field(default_factory=list)
    mode: str = "full"
    lp_angles_deg: list | None = None
    name: str = "scene"


def camera_to_json(cam: Camera) -> dict:
    return {
        "world_to_camera": [float(x) for x in cam.world_to_camera.reshape(-1)],
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
    }


def camera_from_json(d: dict) -> Camera:
    return Camera(
        world_to_camera=torch.tensor(d["world_to_camera"], dtype=DTYPE).reshape(4, 4),
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
    )


def save_bundle(bundle: SceneBundle, dirpath):
    root = Path(dirpath)
    (root / "obs").mkdir(parents=True, exist_ok=True)
    cloud = bundle.cloud
    write_array_pack(
        root / "surfels.fpak",
        {
            "positions": cloud.positions,
            "tangent_u": cloud.tangent_u,
            "tangent_v": cloud.tangent_v,
            "scales": cloud.scales,
            "opacity": cloud.opacity,
            "albedo": cloud.albedo,
            "roughness": cloud.roughness,
            "eta": cloud.eta,
        },
        meta={"count": len(cloud)},
    )
    env_to_file(root / "environment.fimg", bundle.env_latents, bundle.env_resolution)

    camera_index = {id(cam): i for i, cam in enumerate(bundle.cameras)}
    records = []
    for i, obs in enumerate(bundle.observations):
        rec = {"camera": camera_index.get(id(obs.camera), i), "name": obs.name}
        base = f"obs/{obs.name}"
        mask_file = f"{base}.mask.fimg"
        scalar_map_to_file(root / mask_file, obs.mask.to(DTYPE), "mask")
        rec["mask"] = mask_file
        if obs.stokes is not None:
            st_file = f"{base}.stokes.fimg"
            stokes_to_file(root / st_file, obs.stokes, component="observed")
            rec["stokes"] = st_file
        if obs.intensity is not None:
            cap_file = f"{base}.capture.fimg"
            intensity_to_file(root / cap_file, obs.intensity, component="capture", meta={"lp_index": obs.lp_index})
            rec["capture"] = cap_file
            rec["lp_index"] = obs.lp_index
        if obs.holdout is not None:
            rec["holdout"] = bool(obs.holdout)
        records.append(rec)

    doc = {
        "version": 1,
        "name": bundle.name,
        "mode": bundle.mode,
        "env_resolution": bundle.env_resolution,
        "environment": "environment.fimg",
        "surfels": "surfels.fpak",
        "lp_angles_deg": bundle.lp_angles_deg,
        "cameras": [camera_to_json(c) for c in bundle.cameras],
        "observations": records,
    }
    (root / "bundle.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_bundle(dirpath) -> SceneBundle:
    root = Path(dirpath)
    doc_path = root / "bundle.json"
    if not doc_path.exists():
        raise ConfigError(f"{dirpath}: not a scene bundle (missing bundle.json)")
    doc = json.loads(doc_path.read_text())
    arrays, _ = read_array_pack(root / doc["surfels"])
    cloud = SurfelCloud(**{k: torch.from_numpy(v).to(DTYPE) for k, v in arrays.items()})
    env_latents, env_res = env_from_file(root / doc["environment"])
    if env_res != int(doc["env_resolution"]):
        raise ConfigError(f"{dirpath}: environment resolution mismatch")
    cameras = [camera_from_json(c) for c in doc["cameras"]]
    observations = []
    for rec in doc["observations"]:
        cam = cameras[rec["camera"]]
        mask_img = read_float_image(root / rec["mask"])
        mask = torch.from_numpy(mask_img.data[0].astype(np.float64)) >= 0.5
        stokes = None
        intensity = None
        lp_index = None
        if "stokes" in rec:
            stokes, _ = stokes_from_file(root / rec["stokes"])
        if "capture" in rec:
            intensity, _ = intensity_from_file(root / rec["capture"])
            lp_index = rec.get("lp_index")
        observations.append(
            Observation(
                camera=cam,
                mask=mask,
                stokes=stokes,
                intensity=intensity,
                lp_index=lp_index,
                holdout=rec.get("holdout"),
                name=rec.get("name", f"view{len(observations):03d}"),
            )
        )
    return SceneBundle(
        cloud=cloud,
        env_latents=env_latents,
        env_resolution=env_res,
        cameras=cameras,
        observations=observations,
        mode=doc.get("mode", "full"),
        lp_angles_deg=doc.get("lp_angles_deg"),
        name=doc.get("name", "scene"),
    )
