"""Command-line entry point.

Subcommands: render, optimize, init-visual-hull, extract-mesh, grad-check,
variance-bench, make-scene. Every command is reproducible from its config
and seed alone; exit codes are 0 (ok), 2 (configuration error), 3 (runtime
failure).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image as PilImage

from . import checks, scenes
from .brdf import BrdfParams, MaterialField
from .evolution import NieConfig
from .grids import SdfGrid
from .init_shape import init_sdf
from .lighting import EnvmapPlusPlus, InfiniteEnvmap, write_pfm
from .meshes import marching_cubes
from .optimize import (LossConfig, MaterialGrid, OptimizeConfig,
                       optimize_scene)
from .render import Camera, RenderSettings, Scene, render_antithetic

CONFIG_ERRORS = (ValueError, KeyError, TypeError, FileNotFoundError,
                 NotADirectoryError, json.JSONDecodeError)


def _guarded(fn):
    """Map validation errors to exit code 2 and other failures to 3."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CONFIG_ERRORS as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001 - single diagnostic line
            click.echo(f"runtime failure: {type(exc).__name__}: {exc}",
                       err=True)
            sys.exit(3)

    return wrapper


def tonemap(img: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    """Linear radiance to 8-bit sRGB."""
    x = np.clip(np.asarray(img) * exposure, 0.0, 1.0)
    srgb = np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * x ** (1.0 / 2.4) - 0.055)
    return (srgb * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img, exposure: float = 1.0):
    PilImage.fromarray(tonemap(img, exposure)).save(path)


def _load_config(config_path, overrides):
    cfg = json.loads(Path(config_path).read_text()) if config_path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def _render_settings(cfg: dict) -> RenderSettings:
    allowed = {"spp", "max_depth", "rr_start_depth", "seed", "edge_samples",
               "edge_delta_px", "roughness_escalator", "use_nee"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ValueError(f"unknown render settings: {sorted(unknown)}")
    return RenderSettings(**cfg)


@click.group()
def main():
    """Inverse rendering of shape, glossy materials, and near-field
    lighting with a deterministic differentiable path tracer."""


@main.command("make-scene")
@click.argument("name", type=click.Choice(scenes.SCENE_NAMES))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--target-spp", default=512, show_default=True,
              help="Samples per pixel for the ground-truth target renders.")
@_guarded
def cmd_make_scene(name, out_dir, target_spp):
    """Write a synthetic ground-truth scene bundle (true assets + targets)."""
    bundle = scenes.make_scene(name)
    bundle.save(out_dir, target_spp=target_spp)
    click.echo(f"wrote scene bundle {name!r} to {out_dir}")


@main.command("render")
@click.option("--scene", "scene_dir", required=True, type=click.Path(),
              help="Scene bundle directory (from make-scene or optimize).")
@click.option("--camera-index", default=0, show_default=True)
@click.option("--spp", default=64, show_default=True)
@click.option("--max-depth", default=6, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--exposure", default=1.0, show_default=True)
@click.option("--out", "out_prefix", required=True, type=click.Path(),
              help="Output prefix; writes <prefix>.pfm and <prefix>.png.")
@_guarded
def cmd_render(scene_dir, camera_index, spp, max_depth, seed, exposure,
               out_prefix):
    """Render one camera of a scene bundle to PFM (linear) and PNG."""
    bundle = scenes.load_bundle(scene_dir)
    if bundle.scene is None:
        raise ValueError(f"bundle {scene_dir} has no renderable scene")
    cams = bundle.cameras + bundle.novel_cameras
    if not 0 <= camera_index < len(cams):
        raise ValueError(f"camera index {camera_index} out of range "
                         f"(bundle has {len(cams)} cameras)")
    settings = RenderSettings(spp=spp, max_depth=max_depth, seed=seed)
    img, stats = render_antithetic(bundle.scene, cams[camera_index], settings)
    out = Path(out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(out.with_suffix(".pfm"), img)
    write_png(out.with_suffix(".png"), img, exposure)
    click.echo(f"rendered camera {camera_index} at {spp} spp -> {out}.pfm/.png"
               f" (dropped {stats['nonfinite_samples']} non-finite samples)")


@main.command("init-visual-hull")
@click.option("--masks", "masks_dir", required=True, type=click.Path(),
              help="Directory of mask PNGs (sorted order matches cameras).")
@click.option("--cameras", "cameras_file", required=True, type=click.Path(),
              help="JSON array of camera dicts.")
@click.option("--resolution", default=64, show_default=True)
@click.option("--bbox-half", default=1.2, show_default=True)
@click.option("--keep-fraction", default=0.95, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def cmd_init_visual_hull(masks_dir, cameras_file, resolution, bbox_half,
                         keep_fraction, out_path):
    """Carve a visual hull from masks and write the initial SDF grid."""
    cams = [Camera.from_dict(d)
            for d in json.loads(Path(cameras_file).read_text())]
    mask_files = sorted(Path(masks_dir).glob("*.png"))
    if len(mask_files) != len(cams):
        raise ValueError(f"{len(mask_files)} masks but {len(cams)} cameras")
    masks = [np.asarray(PilImage.open(f)).reshape(
        cams[i].height, cams[i].width, -1).any(axis=2)
        for i, f in enumerate(mask_files)]
    sdf = init_sdf(masks, cams, resolution, [-bbox_half] * 3,
                   [bbox_half] * 3, keep_fraction)
    sdf.save(out_path)
    click.echo(f"wrote {resolution}^3 SDF to {out_path}.json/.raw")


@main.command("extract-mesh")
@click.option("--sdf", "sdf_path", required=True, type=click.Path())
@click.option("--resolution", default=0, show_default=True,
              help="Resample the SDF to this resolution first (0 = native).")
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def cmd_extract_mesh(sdf_path, resolution, out_path):
    """Extract the zero level set of an SDF grid as an OBJ mesh."""
    grid = SdfGrid.load(sdf_path)
    if resolution and tuple(grid.resolution) != (resolution,) * 3:
        fine = SdfGrid((resolution,) * 3, grid.bbox_min, grid.bbox_max,
                       np.zeros((resolution,) * 3))
        vals, _ = grid.sample(fine.node_coords().reshape(-1, 3))
        fine.values = vals.reshape(fine.resolution)
        grid = fine
    mesh = marching_cubes(grid)
    if mesh.is_empty:
        raise RuntimeError("the SDF has no zero level set inside its box")
    mesh.save_obj(out_path)
    click.echo(f"wrote {mesh.n_vertices} vertices / {mesh.n_faces} faces "
               f"to {out_path}")


@main.command("grad-check")
@click.option("--params", default=",".join(checks.GRAD_CHECK_PARAMS),
              show_default=True, help="Comma-separated parameter list.")
@click.option("--seed", default=0, show_default=True)
@click.option("--h", "h", default=1e-3, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def cmd_grad_check(params, seed, h, out_path):
    """Compare reverse-mode gradients against CRN finite differences (CSV)."""
    names = [p.strip() for p in params.split(",") if p.strip()]
    rows = checks.grad_check_all(names, seed=seed, h=h)
    checks.write_grad_check_csv(rows, out_path)
    for r in rows:
        click.echo(f"{r['parameter']:>14s}: analytic {r['analytic']:12.4f} "
                   f"fd {r['fd']:12.4f} rel {100 * r['rel_error']:6.2f}%")
    click.echo(f"wrote {out_path}")


@main.command("variance-bench")
@click.option("--seeds", default=64, show_default=True)
@click.option("--spp", default=16, show_default=True)
@click.option("--roughness", default=0.05, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@_guarded
def cmd_variance_bench(seeds, spp, roughness, out_path):
    """Antithetic vs standard translation-gradient variance (CSV)."""
    res = checks.variance_bench(n_seeds=seeds, spp=spp, roughness=roughness)
    checks.write_variance_csv(res, out_path)
    click.echo(f"variance ratio (antithetic / standard): "
               f"{res['variance_ratio']:.4f}; mean gap "
               f"{res['mean_gap_sigmas']:.2f} sigma")
    click.echo(f"wrote {out_path}")


@main.command("optimize")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True,
              help="Dotted-key override, e.g. --set render.spp=16")
@_guarded
def cmd_optimize(config_path, overrides):
    """Run the joint optimization described by a JSON config file."""
    cfg = _load_config(config_path, overrides)
    scene_dir = cfg.get("scene")
    out_dir = cfg.get("out_dir")
    if not scene_dir or not out_dir:
        raise ValueError("config must set 'scene' (bundle dir) and 'out_dir'")
    bundle = scenes.load_bundle(scene_dir)
    targets = bundle.truth.get("targets")
    if not targets:
        raise ValueError(f"bundle {scene_dir} has no target images; "
                         "re-run make-scene")
    views = list(zip(bundle.cameras, targets))
    groups = tuple(cfg.get("groups", ("shape", "materials", "emitter")))
    lrs = cfg.get("lrs", {})
    opt_cfg = OptimizeConfig(
        iters=int(cfg.get("iters", 1000)), seed=int(cfg.get("seed", 0)),
        groups=groups,
        lr_materials=lrs.get("materials", 1e-2),
        lr_emitter_radiance=lrs.get("emitter_radiance", 1e-2),
        lr_emitter_r=lrs.get("emitter_r", 1e-3),
        checkpoint_every=int(cfg.get("checkpoint_every", 100)),
        material_grid_res=int(cfg.get("material_grid_res", 64)),
        loss=LossConfig(**cfg.get("loss", {})),
        nie=NieConfig(**cfg.get("nie", {})),
        render=_render_settings(cfg.get("render", {})))

    init = cfg.get("init", {})
    sdf = None
    if "shape" in groups:
        if "sdf" in init:
            sdf = SdfGrid.load(init["sdf"])
        else:
            from .scenes import sphere_sdf
            sdf = sphere_sdf(int(init.get("sdf_res", 64)),
                             float(init.get("bbox_half", 1.2)),
                             float(init.get("radius", 0.6)))
    emitter_cfg = cfg.get("emitter", {"kind": "envpp"})
    if emitter_cfg.get("kind", "envpp") == "envpp":
        emitter = EnvmapPlusPlus(
            face_res=int(emitter_cfg.get("face_res", 8)),
            scale=float(emitter_cfg.get("scale", 5.0)))
        emitter.radiance[:] = float(emitter_cfg.get("init_radiance", 0.5))
        emitter.r_values[:] = float(emitter_cfg.get("init_r", 0.5))
        emitter.rebuild()
    elif emitter_cfg["kind"] == "infinite":
        emitter = InfiniteEnvmap(np.full(
            (int(emitter_cfg.get("height", 32)),
             int(emitter_cfg.get("width", 64)), 3),
            float(emitter_cfg.get("init_radiance", 0.5))))
    elif emitter_cfg["kind"] == "true":
        emitter = bundle.scene.emitter
    else:
        raise ValueError("emitter.kind must be 'envpp', 'infinite', or "
                         "'true'")

    if "shape" in groups:
        mesh = marching_cubes(sdf)
        grid = MaterialGrid(opt_cfg.material_grid_res, sdf.bbox_min,
                            sdf.bbox_max)
        mats = MaterialField(grid.sample_at(mesh.vertices))
        start = Scene(mesh, mats, emitter)
    else:
        mesh = bundle.scene.mesh
        grid = None
        if "materials" in groups:
            mats = MaterialField.constant(
                mesh.n_vertices, BrdfParams([0.5] * 3, [0.04] * 3, 0.5))
        else:
            mats = bundle.scene.materials
        start = Scene(mesh, mats, emitter)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2))
    result = optimize_scene(start, views, opt_cfg, sdf=sdf,
                            material_grid=grid, out_dir=out)
    final_psnr = result.logs[-1]["psnr"] if result.logs else float("nan")
    click.echo(f"finished {opt_cfg.iters} iterations; last-view PSNR "
               f"{final_psnr:.2f} dB; run directory {out}")


if __name__ == "__main__":
    main()
