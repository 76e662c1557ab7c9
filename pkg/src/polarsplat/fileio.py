"""Binary file formats: float images, array packs, environment and LUT files.

Float image container (magic ``FIMG``): a little-endian uint32 header length
follows the magic, then a canonical JSON header (width, height, plane count,
plane labels, optional component tag and metadata), then the payload as
float32 little-endian planes, each row-major.  The writer is deterministic,
so identical data round-trips to identical bytes.

Array packs (magic ``FPAK``) use the same framing with named typed arrays;
they back checkpoints, anchor grids and the split-sum LUT file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError
from .optics import DTYPE

_FIMG_MAGIC = b"FIMG"
_FPAK_MAGIC = b"FPAK"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


@dataclass
class FloatImage:
    data: np.ndarray  # (planes, H, W) float32
    labels: list
    component: str | None = None
    meta: dict | None = None

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


def _to_numpy(data) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.detach().cpu().numpy()
    return np.asarray(data)


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ConfigError(f"{path}: bad magic, expected {magic!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    return header, raw[8 + hlen :]


def write_float_image(path, data, labels, component: str | None = None, meta: dict | None = None):
    """Write planes (P, H, W) as a float image file."""
    arr = _to_numpy(data).astype("<f4")
    if arr.ndim != 3:
        raise ValueError("write_float_image: data must be (planes, H, W)")
    if len(labels) != arr.shape[0]:
        raise ValueError("write_float_image: one label per plane required")
    if not np.isfinite(arr).all():
        raise ValueError("write_float_image: data contains non-finite values")
    header = {
        "version": 1,
        "width": int(arr.shape[2]),
        "height": int(arr.shape[1]),
        "planes": int(arr.shape[0]),
        "labels": [str(l) for l in labels],
        "component": component,
        "meta": meta or {},
    }
    blob = _dump_header(header)
    with open(path, "wb") as f:
        f.write(_FIMG_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes(order="C"))


def read_float_image(path) -> FloatImage:
    header, payload = _read_framed(path, _FIMG_MAGIC)
    p, h, w = header["planes"], header["height"], header["width"]
    expected = p * h * w * 4
    if len(payload) != expected:
        raise ConfigError(f"{path}: payload size {len(payload)} != expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(p, h, w).copy()
    return FloatImage(data=data, labels=list(header["labels"]), component=header.get("component"), meta=header.get("meta") or {})


def write_array_pack(path, arrays: dict, meta: dict | None = None):
    """Write named arrays (float32/float64/int64) with a JSON header."""
    entries = []
    blobs = []
    for name, value in arrays.items():
        arr = _to_numpy(value)
        if arr.dtype.kind == "f":
            code = "f8" if arr.dtype.itemsize == 8 else "f4"
        elif arr.dtype.kind in "iu":
            code = "i8"
        else:
            raise ValueError(f"write_array_pack: unsupported dtype for {name}: {arr.dtype}")
        arr = arr.astype(_DTYPES[code])
        entries.append({"name": str(name), "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.tobytes(order="C"))
    header = {"version": 1, "arrays": entries, "meta": meta or {}}
    blob = _dump_header(header)
    with open(path, "wb") as f:
        f.write(_FPAK_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for b in blobs:
            f.write(b)


def read_array_pack(path) -> tuple[dict, dict]:
    """Returns (arrays by name, meta dict)."""
    header, payload = _read_framed(path, _FPAK_MAGIC)
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        arrays[entry["name"]] = (
            np.frombuffer(payload[offset : offset + nbytes], dtype=dt).reshape(entry["shape"]).copy()
        )
        offset += nbytes
    if offset != len(payload):
        raise ConfigError(f"{path}: trailing bytes in array pack")
    return arrays, header.get("meta") or {}


STOKES_PLANE_LABELS = [f"s{i}.{c}" for i in range(3) for c in "RGB"]


def stokes_to_file(path, stokes, component: str = "total"):
    """Store a Stokes image (H, W, 4, 3); s3 is identically zero and dropped."""
    s = stokes.stokes if hasattr(stokes, "stokes") else stokes
    s = _to_numpy(s)
    planes = np.stack([s[..., i, c] for i in range(3) for c in range(3)], axis=0)
    write_float_image(path, planes, STOKES_PLANE_LABELS, component=component)


def stokes_from_file(path) -> tuple[Tensor, str]:
    img = read_float_image(path)
    if img.labels != STOKES_PLANE_LABELS:
        raise ConfigError(f"{path}: not a Stokes image (labels {img.labels})")
    h, w = img.height, img.width
    s = torch.zeros(h, w, 4, 3, dtype=DTYPE)
    for p, label in enumerate(img.labels):
        i = int(label[1])
        c = "RGB".index(label[3])
        s[..., i, c] = torch.from_numpy(img.data[p].astype(np.float64))
    return s, (img.component or "total")


def intensity_to_file(path, rgb, component: str = "capture", meta: dict | None = None):
    arr = _to_numpy(rgb)
    planes = np.stack([arr[..., c] for c in range(3)], axis=0)
    write_float_image(path, planes, ["R", "G", "B"], component=component, meta=meta)


def intensity_from_file(path) -> tuple[Tensor, dict]:
    img = read_float_image(path)
    if img.labels != ["R", "G", "B"]:
        raise ConfigError(f"{path}: not an RGB intensity image")
    data = np.stack([img.data[0], img.data[1], img.data[2]], axis=-1)
    return torch.from_numpy(data.astype(np.float64)), img.meta or {}


def scalar_map_to_file(path, values, label: str, component: str | None = None):
    arr = _to_numpy(values)
    write_float_image(path, arr[None], [label], component=component)


def scalar_map_from_file(path) -> Tensor:
    img = read_float_image(path)
    return torch.from_numpy(img.data[0].astype(np.float64))


def vector_map_to_file(path, values, labels, component: str | None = None):
    arr = _to_numpy(values)
    planes = np.stack([arr[..., c] for c in range(arr.shape[-1])], axis=0)
    write_float_image(path, planes, labels, component=component)


ENV_PLANE_LABELS = [f"face{f}.{c}" for f in range(6) for c in "RGB"]


def env_to_file(path, latents, resolution: int):
    """Environment latents, one cube face per plane group (18 planes)."""
    arr = _to_numpy(latents)
    if arr.shape != (6 * resolution * resolution, 3):
        raise ValueError("env_to_file: latents shape does not match resolution")
    faces = arr.reshape(6, resolution, resolution, 3)
    planes = np.stack([faces[f, :, :, c] for f in range(6) for c in range(3)], axis=0)
    write_float_image(path, planes, ENV_PLANE_LABELS, component="env_latents", meta={"resolution": int(resolution)})


def env_from_file(path) -> tuple[Tensor, int]:
    img = read_float_image(path)
    if img.labels != ENV_PLANE_LABELS or img.component != "env_latents":
        raise ConfigError(f"{path}: not an environment latent file")
    d = int((img.meta or {}).get("resolution", img.width))
    if img.height != d or img.width != d:
        raise ConfigError(f"{path}: face size {img.width}x{img.height} != resolution {d}")
    faces = np.stack([img.data[3 * f : 3 * f + 3] for f in range(6)], axis=0)  # (6, 3, D, D)
    latents = np.moveaxis(faces, 1, -1).reshape(6 * d * d, 3)
    return torch.from_numpy(latents.astype(np.float64)), d


def lut_to_file(path, lut):
    write_array_pack(
        path,
        {"tau0": lut.tau0, "tau1": lut.tau1},
        meta={
            "cos_range": list(lut.cos_range),
            "rough_range": list(lut.rough_range),
            "sample_count": lut.sample_count,
            "shape": list(lut.shape),
        },
    )


def lut_from_file(path):
    from .envlight import SplitSumLUT

    arrays, meta = read_array_pack(path)
    return SplitSumLUT(
        torch.from_numpy(arrays["tau0"]),
        torch.from_numpy(arrays["tau1"]),
        cos_range=tuple(meta["cos_range"]),
        rough_range=tuple(meta["rough_range"]),
        sample_count=meta.get("sample_count", 0),
    )


def checkpoint_to_file(path, params, iteration: int):
    arrays = {name: tensor for name, tensor in params.groups().items()}
    meta = {"iteration": int(iteration), "env_resolution": int(params.env_resolution)}
    write_array_pack(path, arrays, meta=meta)


def checkpoint_from_file(path):
    from .training import SceneParameters

    arrays, meta = read_array_pack(path)
    kw = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    lp = kw.pop("lp_angles", None)
    params = SceneParameters(env_resolution=int(meta["env_resolution"]), lp_angles=lp, **kw)
    return params, int(meta["iteration"])


def anchor_grid_to_file(path, grid):
    base = torch.stack([m.base for m in grid.maps], dim=0)
    write_array_pack(
        path,
        {
            "anchors": grid.anchors,
            "radiance": base,
            "bbox_min": grid.bbox_min,
            "bbox_max": grid.bbox_max,
        },
        meta={"resolution": int(grid.resolution), "built_at": int(grid.built_at)},
    )


def anchor_grid_from_file(path):
    from .envlight import EnvironmentMap
    from .occlusion import AnchorGrid

    arrays, meta = read_array_pack(path)
    res = int(meta["resolution"])
    radiance = torch.from_numpy(arrays["radiance"])
    maps = [EnvironmentMap.from_radiance(radiance[a], res) for a in range(radiance.shape[0])]
    return AnchorGrid(
        anchors=torch.from_numpy(arrays["anchors"]),
        maps=maps,
        resolution=res,
        bbox_min=torch.from_numpy(arrays["bbox_min"]),
        bbox_max=torch.from_numpy(arrays["bbox_max"]),
        built_at=int(meta["built_at"]),
    )


def preview_to_png(path, rgb):
    """Optional sRGB 8-bit preview next to the float data; needs Pillow."""
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        return False
    arr = np.clip(_to_numpy(rgb), 0.0, 1.0)
    srgb = np.where(arr <= 0.0031308, 12.92 * arr, 1.055 * arr ** (1 / 2.4) - 0.055)
    Image.fromarray((srgb * 255.0 + 0.5).astype(np.uint8)).save(path)
    return True
