"""Gradient checks against common-random-number finite differences, and the
antithetic-vs-standard gradient variance benchmark.

Every check renders the same scene at parameter ± h with identical random
streams (central finite difference, CRN) and compares against the reverse-mode
estimate from :mod:`invrender.render_grad` under a whole-image adjoint.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import scenes
from .render import Camera, RenderSettings, Scene, render_antithetic
from .render_grad import backprop, backprop_antithetic

GRAD_CHECK_PARAMS = ("albedo", "roughness", "radiance_scale",
                     "translation_x", "emitter_r")


def _loss(scene: Scene, cam: Camera, settings: RenderSettings) -> float:
    img, _ = render_antithetic(scene, cam, settings)
    return float(img.sum())


def grad_check(param: str, seed: int = 0, h: float = 1e-3):
    """One gradient check; returns a dict row with analytic/fd/rel_error.

    The protocol is pinned: 32x32 image, max_depth 2, CRN central differences
    at ``h``; 256 spp (512 and dense edge sampling for the translation check,
    whose reference is the noisiest).
    """
    if param not in GRAD_CHECK_PARAMS:
        raise ValueError(f"unknown parameter {param!r}; "
                         f"choose from {GRAD_CHECK_PARAMS}")
    t0 = time.perf_counter()
    settings = RenderSettings(spp=256, seed=seed, max_depth=2)
    adj = None  # whole-image adjoint (ones) built per camera below

    if param == "albedo":
        scene, cam = scenes.gradcheck_lambert_sphere()
        sp, _ = scenes.gradcheck_lambert_sphere(albedo=0.8 + h)
        sm, _ = scenes.gradcheck_lambert_sphere(albedo=0.8 - h)
        fd = (_loss(sp, cam, settings) - _loss(sm, cam, settings)) / (2 * h)
        adj = np.ones((cam.height, cam.width, 3))
        g, _ = backprop_antithetic(scene, cam, adj, settings,
                                   want=("materials",))
        analytic = float(g.d_material[:, 0:3].sum())
    elif param == "roughness":
        scene, cam = scenes.gradcheck_chrome_sphere()
        sp, _ = scenes.gradcheck_chrome_sphere(roughness=0.3 + h)
        sm, _ = scenes.gradcheck_chrome_sphere(roughness=0.3 - h)
        fd = (_loss(sp, cam, settings) - _loss(sm, cam, settings)) / (2 * h)
        adj = np.ones((cam.height, cam.width, 3))
        g, _ = backprop_antithetic(scene, cam, adj, settings,
                                   want=("materials",))
        analytic = float(g.d_material[:, 6].sum())
    elif param == "radiance_scale":
        scene, cam = scenes.gradcheck_lambert_sphere()
        sp, _ = scenes.gradcheck_lambert_sphere(radiance_scale=1.0 + h)
        sm, _ = scenes.gradcheck_lambert_sphere(radiance_scale=1.0 - h)
        fd = (_loss(sp, cam, settings) - _loss(sm, cam, settings)) / (2 * h)
        adj = np.ones((cam.height, cam.width, 3))
        g, _ = backprop_antithetic(scene, cam, adj, settings,
                                   want=("emitter_radiance",))
        analytic = float((g.d_emitter_radiance *
                          scene.emitter.radiance).sum())
    elif param == "translation_x":
        settings = RenderSettings(spp=512, seed=seed, max_depth=2,
                                  edge_samples=256)
        scene, cam = scenes.gradcheck_lambert_sphere()
        sp, _ = scenes.gradcheck_lambert_sphere(shift_x=+h)
        sm, _ = scenes.gradcheck_lambert_sphere(shift_x=-h)
        fd = (_loss(sp, cam, settings) - _loss(sm, cam, settings)) / (2 * h)
        adj = np.ones((cam.height, cam.width, 3))
        g, _ = backprop_antithetic(scene, cam, adj, settings,
                                   want=("vertices",))
        analytic = float(g.d_vertices[:, 0].sum())
    else:  # emitter_r
        scene, cam, bright = scenes.gradcheck_emitter_r()
        sp, cam, _ = scenes.gradcheck_emitter_r(dr=+h)
        sm, cam, _ = scenes.gradcheck_emitter_r(dr=-h)
        fd = (_loss(sp, cam, settings) - _loss(sm, cam, settings)) / (2 * h)
        adj = np.ones((cam.height, cam.width, 3))
        g, _ = backprop_antithetic(scene, cam, adj, settings,
                                   want=("emitter_r",))
        analytic = float(g.d_emitter_r[bright].sum())

    rel = abs(analytic - fd) / max(abs(fd), 1e-12)
    return {"parameter": param, "analytic": analytic, "fd": fd,
            "rel_error": rel, "seconds": time.perf_counter() - t0}


def grad_check_all(params=GRAD_CHECK_PARAMS, seed: int = 0, h: float = 1e-3):
    return [grad_check(p, seed=seed, h=h) for p in params]


def write_grad_check_csv(rows, path):
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["parameter", "analytic", "fd",
                                          "rel_error", "seconds"])
        w.writeheader()
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# gradient-variance benchmark
# ---------------------------------------------------------------------------

def variance_bench(n_seeds: int = 64, spp: int = 16, roughness: float = 0.05):
    """Translation-gradient variance: antithetic vs standard estimator.

    Both estimators see the same total sample budget (antithetic: two
    mirrored passes at ``spp`` each; standard: one pass at ``2 * spp``). The
    silhouette boundary term is computed identically by both estimators, so
    it is excluded to compare what actually differs (the interior term).
    Returns a dict with per-estimator means/variances and the ratio.
    """
    scene, cam = scenes.variance_bench_scene(roughness)
    adj = np.ones((cam.height, cam.width, 3))
    anti = np.empty(n_seeds)
    std = np.empty(n_seeds)
    for s in range(n_seeds):
        st_a = RenderSettings(spp=spp, seed=s, max_depth=2)
        g, _ = backprop_antithetic(scene, cam, adj, st_a, want=("vertices",),
                                   boundary=False)
        anti[s] = g.d_vertices[:, 0].sum()
        st_s = RenderSettings(spp=2 * spp, seed=s, max_depth=2)
        g, _ = backprop(scene, cam, adj, st_s, pass_id=0, want=("vertices",),
                        boundary=False)
        std[s] = g.d_vertices[:, 0].sum()
    v_anti = float(anti.var(ddof=1))
    v_std = float(std.var(ddof=1))
    sigma = np.sqrt(v_anti / n_seeds + v_std / n_seeds)
    return {"n_seeds": n_seeds, "spp": spp, "roughness": roughness,
            "mean_antithetic": float(anti.mean()),
            "mean_standard": float(std.mean()),
            "var_antithetic": v_anti, "var_standard": v_std,
            "variance_ratio": v_anti / v_std,
            "mean_gap_sigmas": abs(anti.mean() - std.mean()) / max(sigma,
                                                                   1e-300)}


def write_variance_csv(result, path):
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["estimator", "seeds", "mean", "variance"])
        w.writerow(["antithetic", result["n_seeds"],
                    result["mean_antithetic"], result["var_antithetic"]])
        w.writerow(["standard", result["n_seeds"],
                    result["mean_standard"], result["var_standard"]])
    return path
