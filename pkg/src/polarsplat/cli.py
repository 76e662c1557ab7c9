"""Command line interface.

Verbs: ``synth``, ``render``, ``decompose``, ``relight``, ``train``,
``eval``, ``lut``.  Configuration files are INI with [scene], [train],
[losses] and [lut] sections (all keys optional; see README for the list).
Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from configparser import ConfigParser
from pathlib import Path

import torch

from .bundle import load_bundle, save_bundle
from .envlight import EnvironmentMap, SplitSumLUT
from .errors import ConfigError, NumericError
from .fileio import (
    checkpoint_to_file,
    env_from_file,
    lut_to_file,
    scalar_map_to_file,
    stokes_to_file,
    vector_map_to_file,
)
from .losses import LossWeights
from .metrics import evaluate_dirs, format_report, write_report
from .occlusion import build_anchor_grid
from .optics import degree_angle_of_polarization
from .shading import render_stokes
from .synthetic import SceneSpec, synthesize_bundle
from .training import SceneParameters, TrainConfig, default_lut, train


def _coerce(value: str, target_type):
    if target_type is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is tuple:
        return tuple(float(x) for x in value.split(",") if x.strip())
    return value


def _read_ini(path) -> ConfigParser:
    parser = ConfigParser()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(p)
    except Exception as exc:
        raise ConfigError(f"could not parse config {path}: {exc}") from exc
    return parser


def _fill_dataclass(instance, items: dict, section_name: str) -> None:
    names = {f.name for f in dataclasses.fields(instance)}
    for key, value in items.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} in section [{section_name}]")
        base = type(getattr(instance, key))
        try:
            setattr(instance, key, _coerce(value, base))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc


def scene_spec_from_config(path) -> SceneSpec:
    spec = SceneSpec()
    if path:
        parser = _read_ini(path)
        if parser.has_section("scene"):
            _fill_dataclass(spec, dict(parser["scene"]), "scene")
    return spec


def train_config_from_config(path) -> TrainConfig:
    cfg = TrainConfig()
    if path:
        parser = _read_ini(path)
        if parser.has_section("train"):
            items = dict(parser["train"])
            # lr_<group> keys map into the per-group learning rate table
            for key in [k for k in items if k.startswith("lr_")]:
                try:
                    cfg.learning_rates[key[3:]] = float(items.pop(key))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}") from exc
            _fill_dataclass(cfg, items, "train")
        if parser.has_section("losses"):
            weights = LossWeights()
            _fill_dataclass(weights, dict(parser["losses"]), "losses")
            cfg.weights = weights
    return cfg


def _parse_gridmap(value: str | None) -> tuple[bool, str]:
    if value is None or value == "off":
        return False, "literal"
    if value in ("on", "literal"):
        return True, "literal"
    if value == "inverse":
        return True, "inverse"
    raise ConfigError(f"--gridmap must be on|off|literal|inverse, got {value!r}")


def _parse_views(value: str | None, total: int) -> list[int]:
    if value is None or value == "all":
        return list(range(total))
    try:
        if "," in value:
            indices = [int(x) for x in value.split(",") if x.strip()]
        else:
            count = int(value)
            indices = list(range(min(count, total)))
    except ValueError as exc:
        raise ConfigError(f"--views must be an integer count or comma-separated indices: {value!r}") from exc
    for i in indices:
        if i < 0 or i >= total:
            raise ConfigError(f"view index {i} out of range (bundle has {total} cameras)")
    return indices


def _load_scene(bundle_dir):
    bundle = load_bundle(bundle_dir)
    env = EnvironmentMap.from_latents(bundle.env_latents, bundle.env_resolution)
    return bundle, env


def _maybe_grid(enabled: bool, bundle, env, resolution: int = 16):
    if not enabled:
        return None
    return build_anchor_grid(bundle.cloud, env, resolution=resolution)


def _render_views(bundle, env, indices, out_dir, grid, weighting, decompose: bool = False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lut = default_lut()
    written = []
    with torch.no_grad():
        for i in indices:
            cam = bundle.cameras[i]
            result = render_stokes(bundle.cloud, cam, env, lut, anchor_grid=grid, weighting=weighting)
            stem = f"view{i:03d}"
            stokes_to_file(out / f"{stem}.total.fimg", result.total.stokes, component="total")
            written.append(f"{stem}.total.fimg")
            if decompose:
                stokes_to_file(out / f"{stem}.diffuse.fimg", result.diffuse.stokes, component="diffuse")
                stokes_to_file(out / f"{stem}.specular.fimg", result.specular.stokes, component="specular")
                dop, aop = degree_angle_of_polarization(result.total.stokes)
                vector_map_to_file(out / f"{stem}.dop.fimg", dop, ["dop.R", "dop.G", "dop.B"])
                vector_map_to_file(out / f"{stem}.aop.fimg", aop, ["aop.R", "aop.G", "aop.B"])
                vector_map_to_file(
                    out / f"{stem}.normal.fimg", result.gbuffer.normal, ["normal.x", "normal.y", "normal.z"]
                )
                scalar_map_to_file(out / f"{stem}.depth.fimg", result.gbuffer.depth, "depth")
                scalar_map_to_file(out / f"{stem}.opacity.fimg", result.gbuffer.opacity, "opacity")
                written += [f"{stem}.{kind}.fimg" for kind in ("diffuse", "specular", "dop", "aop", "normal", "depth", "opacity")]
    return written


def cmd_synth(args) -> int:
    spec = scene_spec_from_config(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    if args.views is not None:
        spec.views = int(args.views)
    bundle = synthesize_bundle(spec)
    save_bundle(bundle, args.out)
    print(f"wrote bundle with {len(bundle.observations)} observations to {args.out}")
    return 0


def cmd_render(args) -> int:
    bundle, env = _load_scene(args.bundle)
    enabled, weighting = _parse_gridmap(args.gridmap)
    grid = _maybe_grid(enabled, bundle, env)
    indices = _parse_views(args.views, len(bundle.cameras))
    written = _render_views(bundle, env, indices, args.out, grid, weighting)
    print(f"rendered {len(written)} images to {args.out}")
    return 0


def cmd_decompose(args) -> int:
    bundle, env = _load_scene(args.bundle)
    enabled, weighting = _parse_gridmap(args.gridmap)
    grid = _maybe_grid(enabled, bundle, env)
    indices = _parse_views(args.views, len(bundle.cameras))
    written = _render_views(bundle, env, indices, args.out, grid, weighting, decompose=True)
    print(f"decomposed {len(indices)} views into {len(written)} images at {args.out}")
    return 0


def cmd_relight(args) -> int:
    bundle, _ = _load_scene(args.bundle)
    latents, resolution = env_from_file(args.envfile)
    env = EnvironmentMap.from_latents(latents, resolution)
    enabled, weighting = _parse_gridmap(args.gridmap)
    grid = _maybe_grid(enabled, bundle, env)
    indices = _parse_views(args.views, len(bundle.cameras))
    written = _render_views(bundle, env, indices, args.out, grid, weighting)
    print(f"relit {len(written)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    bundle, _ = _load_scene(args.bundle)
    cfg = train_config_from_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.gridmap is not None:
        cfg.gridmap_enabled, cfg.gridmap_weighting = _parse_gridmap(args.gridmap)
    if bundle.mode == "partial":
        cfg.mode = "partial"
        if not cfg.optimize_lp_angles:
            cfg.optimize_lp_angles = True
    params = SceneParameters.from_scene(
        bundle.cloud, bundle.env_latents, bundle.env_resolution, bundle.lp_angles_deg
    )
    result = train(params, bundle.observations, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_to_file(out / "checkpoint.fpak", result.params, len(result.history))
    trained = dataclasses.replace(
        bundle,
        cloud=result.params.to_cloud(),
        env_latents=result.params.env_latents,
    )
    if result.params.lp_angles is not None:
        trained.lp_angles_deg = [float(a) * 180.0 / math.pi for a in result.params.lp_angles]
    save_bundle(trained, out / "bundle")
    with open(out / "losses.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, value in enumerate(result.history):
            writer.writerow([i, f"{value:.10g}"])
    print(f"trained {len(result.history)} iterations; final loss {result.final_loss:.6f}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    rows = evaluate_dirs(args.rendered, args.reference)
    if args.out:
        write_report(rows, args.out)
        print(f"wrote {len(rows)} metric rows to {args.out}")
    else:
        print(format_report(rows))
    return 0


def cmd_lut(args) -> int:
    n_cos, n_rough, samples = 32, 32, 16384
    if args.config:
        parser = _read_ini(args.config)
        if parser.has_section("lut"):
            section = parser["lut"]
            n_cos = section.getint("cos_bins", n_cos)
            n_rough = section.getint("rough_bins", n_rough)
            samples = section.getint("samples", samples)
    lut = SplitSumLUT.build(n_cos, n_rough, samples)
    lut_to_file(args.out, lut)
    print(f"wrote {n_cos}x{n_rough} split-sum table ({samples} samples) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bundle_arg=True):
        if bundle_arg:
            p.add_argument("bundle", help="scene bundle directory")
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="random seed override")
        p.add_argument("--gridmap", choices=["on", "off", "literal", "inverse"], help="self-occlusion anchor grid mode")
        p.add_argument("--views", help="view selection: count or comma-separated indices (default all)")
        p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("synth", help="synthesise a scene bundle with ground-truth observations")
    p.add_argument("--config", help="INI configuration file with a [scene] section")
    p.add_argument("--seed", type=int, help="random seed override")
    p.add_argument("--views", help="number of views")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render Stokes images from a bundle")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("decompose", help="render with diffuse/specular/DoP/AoP/geometry outputs")
    common(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("relight", help="render a bundle under a replacement environment")
    common(p)
    p.add_argument("envfile", help="environment latent image (.fimg)")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("train", help="optimise scene latents against the bundle observations")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare two directories of rendered images")
    p.add_argument("rendered", help="directory with rendered .fimg files")
    p.add_argument("reference", help="directory with reference .fimg files")
    p.add_argument("--out", help="CSV report path (default: print)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lut", help="precompute the split-sum BRDF table")
    p.add_argument("--config", help="INI configuration file with a [lut] section")
    p.add_argument("--out", required=True, help="output table path")
    p.set_defaults(func=cmd_lut)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entry():  # console_scripts hook
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
