"""Quality metrics and file-pair evaluation reports.

PSNR/SSIM cover radiometric images, cosine distance and mean angular error
cover normal maps.  :func:`evaluate_dirs` pairs rendered and reference float
image files by name, picks metrics from the plane labels, and produces CSV
or plain-text reports.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import torch
from torch import Tensor

from .errors import ConfigError
from .fileio import read_float_image
from .losses import ssim as _ssim

PSNR_CAP = 99.0


def psnr(pred: Tensor, ref: Tensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    mse = float(((pred - ref) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    value = 10.0 * math.log10(data_range * data_range / mse)
    return min(value, PSNR_CAP)


def ssim(pred: Tensor, ref: Tensor, data_range: float = 1.0) -> float:
    return float(_ssim(pred, ref, data_range))


def normal_cosine_distance(pred: Tensor, ref: Tensor, mask: Tensor | None = None) -> float:
    """Mean ``1 - n_pred . n_ref`` over masked pixels (0 for identical maps)."""
    dots = (pred * ref).sum(-1)
    if mask is None:
        mask = (torch.linalg.vector_norm(pred, dim=-1) > 0.5) & (torch.linalg.vector_norm(ref, dim=-1) > 0.5)
    if not bool(mask.any()):
        return 0.0
    return float((1.0 - dots[mask]).mean())


def normal_mae_degrees(pred: Tensor, ref: Tensor, mask: Tensor | None = None) -> float:
    """Mean angular error between unit normal maps, in degrees."""
    dots = (pred * ref).sum(-1).clamp(-1.0, 1.0)
    if mask is None:
        mask = (torch.linalg.vector_norm(pred, dim=-1) > 0.5) & (torch.linalg.vector_norm(ref, dim=-1) > 0.5)
    if not bool(mask.any()):
        return 0.0
    return float(torch.rad2deg(torch.acos(dots[mask])).mean())


def _planes_to_tensor(img, labels) -> Tensor:
    idx = [img.labels.index(l) for l in labels]
    return torch.from_numpy(img.data[idx].astype("float64")).permute(1, 2, 0)


def compare_files(pred_path, ref_path) -> dict:
    """Metric row for one pair of float image files, keyed by content type."""
    pred = read_float_image(pred_path)
    ref = read_float_image(ref_path)
    if pred.labels != ref.labels:
        raise ConfigError(f"{pred_path} vs {ref_path}: plane labels differ")
    row: dict = {"file": Path(pred_path).name}
    if set(("s0.R", "s0.G", "s0.B")).issubset(pred.labels):
        a = _planes_to_tensor(pred, ["s0.R", "s0.G", "s0.B"])
        b = _planes_to_tensor(ref, ["s0.R", "s0.G", "s0.B"])
        row["psnr_s0"] = psnr(a, b)
        row["ssim_s0"] = ssim(a, b)
        for comp in ("s1", "s2"):
            if f"{comp}.R" in pred.labels:
                pa = _planes_to_tensor(pred, [f"{comp}.{c}" for c in "RGB"])
                pb = _planes_to_tensor(ref, [f"{comp}.{c}" for c in "RGB"])
                row[f"mae_{comp}"] = float((pa - pb).abs().mean())
    elif set(("normal.x", "normal.y", "normal.z")).issubset(pred.labels):
        a = _planes_to_tensor(pred, ["normal.x", "normal.y", "normal.z"])
        b = _planes_to_tensor(ref, ["normal.x", "normal.y", "normal.z"])
        row["cosine_distance"] = normal_cosine_distance(a, b)
        row["mae_deg"] = normal_mae_degrees(a, b)
    elif pred.labels == ["R", "G", "B"]:
        a = _planes_to_tensor(pred, ["R", "G", "B"])
        b = _planes_to_tensor(ref, ["R", "G", "B"])
        row["psnr"] = psnr(a, b)
        row["ssim"] = ssim(a, b)
    else:
        a = torch.from_numpy(pred.data.astype("float64"))
        b = torch.from_numpy(ref.data.astype("float64"))
        row["psnr"] = psnr(a, b)
    return row


def evaluate_dirs(pred_dir, ref_dir) -> list:
    """Compare all same-named ``*.fimg`` files of two directories."""
    pred_dir = Path(pred_dir)
    ref_dir = Path(ref_dir)
    names = sorted(p.name for p in pred_dir.glob("*.fimg"))
    ref_names = {p.name for p in ref_dir.glob("*.fimg")}
    common = [n for n in names if n in ref_names]
    if not common:
        raise ConfigError(f"no matching .fimg files between {pred_dir} and {ref_dir}")
    return [compare_files(pred_dir / n, ref_dir / n) for n in common]


def write_report(rows: list, path):
    keys = ["file"] + sorted({k for row in rows for k in row} - {"file"})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_report(rows: list) -> str:
    lines = []
    for row in rows:
        parts = [f"{k}={row[k]:.4f}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in row]
        lines.append("  ".join(parts))
    return "\n".join(lines)
