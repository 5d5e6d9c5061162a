"""Simplified Disney BRDF: Lambertian diffuse plus isotropic GGX specular.

Conventions fixed here so tests are bit-stable:
  - GGX with the Disney remapping alpha = roughness^2,
    D(h) = a2 / (pi * ((n.h)^2 (a2 - 1) + 1)^2) with a2 = alpha^2.
  - Smith height-correlated masking-shadowing G = 1 / (1 + Lam_i + Lam_o).
  - Schlick Fresnel on f0 with the half-vector/light angle.
  - Lobe selection probability proportional to the luminances of the diffuse
    albedo and specular f0.

The scalar cores are numba-compiled and shared with the path-tracing kernels;
the module-level functions are thin array wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

R_MIN = 0.01  # roughness floor; D overflows as alpha -> 0
INV_PI = 1.0 / np.pi


# ---------------------------------------------------------------------------
# numba scalar cores
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def luminance(r, g, b):
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


@njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True, inline="always")
def _normalize(x, y, z):
    n = np.sqrt(x * x + y * y + z * z)
    if n < 1e-300:
        return 0.0, 0.0, 0.0
    return x / n, y / n, z / n


@njit(cache=True, inline="always")
def build_frame(nx, ny, nz):
    """Branchless orthonormal tangent frame about a unit normal."""
    s = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (s + nz)
    b = nx * ny * a
    tx, ty, tz = 1.0 + s * nx * nx * a, s * b, -s * nx
    bx, by, bz = b, s + ny * ny * a, -ny
    return tx, ty, tz, bx, by, bz


@njit(cache=True, inline="always")
def ggx_d(cosh, a2):
    if cosh <= 0.0:
        return 0.0
    t = cosh * cosh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * t * t)


@njit(cache=True, inline="always")
def _smith_lambda(c, a2):
    c2 = c * c
    k = (1.0 - c2) / max(c2, 1e-18)
    return 0.5 * (np.sqrt(1.0 + a2 * k) - 1.0)


@njit(cache=True, inline="always")
def ggx_g(ci, co, a2):
    return 1.0 / (1.0 + _smith_lambda(ci, a2) + _smith_lambda(co, a2))


@njit(cache=True)
def eval_core(dr, dg, db, fr, fg, fb, rough,
              wix, wiy, wiz, wox, woy, woz, nx, ny, nz):
    """BRDF value (RGB, cosine not included); zero below the horizon."""
    ci = _dot(wix, wiy, wiz, nx, ny, nz)
    co = _dot(wox, woy, woz, nx, ny, nz)
    if ci <= 0.0 or co <= 0.0:
        return 0.0, 0.0, 0.0
    if luminance(fr, fg, fb) <= 0.0:
        # a black-f0 lobe is absent entirely (it also has zero sampling
        # probability); Schlick would otherwise leak grazing energy and
        # break the furnace identity for pure Lambertian surfaces
        return dr * INV_PI, dg * INV_PI, db * INV_PI
    hx, hy, hz = _normalize(wix + wox, wiy + woy, wiz + woz)
    cosh = _dot(hx, hy, hz, nx, ny, nz)
    mu = max(_dot(hx, hy, hz, wix, wiy, wiz), 0.0)
    alpha = rough * rough
    a2 = alpha * alpha
    d = ggx_d(cosh, a2)
    g = ggx_g(ci, co, a2)
    spec_common = d * g / (4.0 * ci * co)
    one_minus_mu5 = (1.0 - mu) ** 5
    out_r = dr * INV_PI + spec_common * (fr + (1.0 - fr) * one_minus_mu5)
    out_g = dg * INV_PI + spec_common * (fg + (1.0 - fg) * one_minus_mu5)
    out_b = db * INV_PI + spec_common * (fb + (1.0 - fb) * one_minus_mu5)
    return out_r, out_g, out_b


@njit(cache=True)
def eval_grad_core(dr, dg, db, fr, fg, fb, rough,
                   wix, wiy, wiz, wox, woy, woz, nx, ny, nz):
    """BRDF value plus analytic parameter derivatives.

    Returns (f_rgb, d f/d albedo (scalar per channel), d f/d f0 per channel,
    d f/d roughness per channel).
    """
    ci = _dot(wix, wiy, wiz, nx, ny, nz)
    co = _dot(wox, woy, woz, nx, ny, nz)
    if ci <= 0.0 or co <= 0.0:
        return (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    if luminance(fr, fg, fb) <= 0.0:
        # matches eval_core's absent black-f0 lobe; the f0 derivative is the
        # one-sided slope of switching the lobe on
        hx, hy, hz = _normalize(wix + wox, wiy + woy, wiz + woz)
        mu0 = max(_dot(hx, hy, hz, wix, wiy, wiz), 0.0)
        cosh0 = _dot(hx, hy, hz, nx, ny, nz)
        a2z = rough ** 4
        sc = ggx_d(cosh0, a2z) * ggx_g(ci, co, a2z) / (4.0 * ci * co)
        return (dr * INV_PI, dg * INV_PI, db * INV_PI, INV_PI,
                sc * (1.0 - (1.0 - mu0) ** 5), 0.0, 0.0, 0.0, mu0)
    hx, hy, hz = _normalize(wix + wox, wiy + woy, wiz + woz)
    cosh = _dot(hx, hy, hz, nx, ny, nz)
    mu = max(_dot(hx, hy, hz, wix, wiy, wiz), 0.0)
    alpha = rough * rough
    a2 = alpha * alpha
    d = ggx_d(cosh, a2)
    g = ggx_g(ci, co, a2)
    denom = 4.0 * ci * co
    spec_common = d * g / denom
    omm5 = (1.0 - mu) ** 5
    f_r = dr * INV_PI + spec_common * (fr + (1.0 - fr) * omm5)
    f_g = dg * INV_PI + spec_common * (fg + (1.0 - fg) * omm5)
    f_b = db * INV_PI + spec_common * (fb + (1.0 - fb) * omm5)
    d_albedo = INV_PI
    d_f0_scale = spec_common * (1.0 - omm5)  # per-channel, same scale

    # roughness derivative through a2 = rough^4
    d_rough_r = 0.0
    d_rough_g = 0.0
    d_rough_b = 0.0
    if cosh > 0.0:
        t = cosh * cosh * (a2 - 1.0) + 1.0
        dd_da2 = (t - 2.0 * a2 * cosh * cosh) / (np.pi * t * t * t)
        ci2 = ci * ci
        co2 = co * co
        ki = (1.0 - ci2) / max(ci2, 1e-18)
        ko = (1.0 - co2) / max(co2, 1e-18)
        dlam_i = ki / (4.0 * np.sqrt(1.0 + a2 * ki))
        dlam_o = ko / (4.0 * np.sqrt(1.0 + a2 * ko))
        dg_da2 = -g * g * (dlam_i + dlam_o)
        dspec_da2 = (dd_da2 * g + d * dg_da2) / denom
        da2_drough = 4.0 * rough * rough * rough
        base = dspec_da2 * da2_drough
        d_rough_r = base * (fr + (1.0 - fr) * omm5)
        d_rough_g = base * (fg + (1.0 - fg) * omm5)
        d_rough_b = base * (fb + (1.0 - fb) * omm5)
    return (f_r, f_g, f_b, d_albedo, d_f0_scale, d_rough_r, d_rough_g, d_rough_b, mu)


@njit(cache=True, inline="always")
def lobe_probs(dr, dg, db, fr, fg, fb):
    pd = luminance(dr, dg, db)
    ps = luminance(fr, fg, fb)
    total = pd + ps
    if total <= 0.0:
        return 1.0, 0.0
    return pd / total, ps / total


@njit(cache=True)
def pdf_core(dr, dg, db, fr, fg, fb, rough,
             wox, woy, woz, wix, wiy, wiz, nx, ny, nz):
    """Lobe-mixture solid-angle PDF of ``wi``; zero below the horizon."""
    ci = _dot(wix, wiy, wiz, nx, ny, nz)
    co = _dot(wox, woy, woz, nx, ny, nz)
    if ci <= 0.0 or co <= 0.0:
        return 0.0
    p_diff, p_spec = lobe_probs(dr, dg, db, fr, fg, fb)
    pdf = p_diff * ci * INV_PI
    if p_spec > 0.0:
        hx, hy, hz = _normalize(wix + wox, wiy + woy, wiz + woz)
        cosh = _dot(hx, hy, hz, nx, ny, nz)
        dot_wo_h = _dot(hx, hy, hz, wox, woy, woz)
        if cosh > 0.0 and dot_wo_h > 1e-12:
            alpha = rough * rough
            a2 = alpha * alpha
            pdf += p_spec * ggx_d(cosh, a2) * cosh / (4.0 * dot_wo_h)
    return pdf


@njit(cache=True)
def sample_core(dr, dg, db, fr, fg, fb, rough,
                wox, woy, woz, nx, ny, nz, u0, u1, u2, mirror_half):
    """Sample an incident direction from the lobe mixture.

    ``mirror_half`` reflects the sampled specular half vector about the
    normal before constructing ``wi`` (the antithetic variant).
    Returns (wix, wiy, wiz, pdf, hx, hy, hz, is_specular); a pdf of 0 marks a
    rejected sample (below-horizon reflection).
    """
    p_diff, p_spec = lobe_probs(dr, dg, db, fr, fg, fb)
    tx, ty, tz, bx, by, bz = build_frame(nx, ny, nz)
    use_spec = u0 >= p_diff
    hx = hy = hz = 0.0
    if not use_spec:
        # cosine-weighted hemisphere
        r = np.sqrt(u1)
        phi = 2.0 * np.pi * u2
        lx = r * np.cos(phi)
        ly = r * np.sin(phi)
        lz = np.sqrt(max(1.0 - u1, 0.0))
        wix = lx * tx + ly * bx + lz * nx
        wiy = lx * ty + ly * by + lz * ny
        wiz = lx * tz + ly * bz + lz * nz
    else:
        alpha = rough * rough
        a2 = alpha * alpha
        cosh = np.sqrt(max((1.0 - u1) / (1.0 + (a2 - 1.0) * u1), 0.0))
        sinh = np.sqrt(max(1.0 - cosh * cosh, 0.0))
        phi = 2.0 * np.pi * u2
        lx = sinh * np.cos(phi)
        ly = sinh * np.sin(phi)
        hx = lx * tx + ly * bx + cosh * nx
        hy = lx * ty + ly * by + cosh * ny
        hz = lx * tz + ly * bz + cosh * nz
        if mirror_half:
            ndh = _dot(hx, hy, hz, nx, ny, nz)
            hx = 2.0 * ndh * nx - hx
            hy = 2.0 * ndh * ny - hy
            hz = 2.0 * ndh * nz - hz
        dot_wo_h = _dot(hx, hy, hz, wox, woy, woz)
        wix = 2.0 * dot_wo_h * hx - wox
        wiy = 2.0 * dot_wo_h * hy - woy
        wiz = 2.0 * dot_wo_h * hz - woz
        if dot_wo_h <= 1e-12 or _dot(wix, wiy, wiz, nx, ny, nz) <= 0.0:
            return 0.0, 0.0, 0.0, 0.0, hx, hy, hz, True
    pdf = pdf_core(dr, dg, db, fr, fg, fb, rough,
                   wox, woy, woz, wix, wiy, wiz, nx, ny, nz)
    if pdf <= 0.0:
        return 0.0, 0.0, 0.0, 0.0, hx, hy, hz, use_spec
    return wix, wiy, wiz, pdf, hx, hy, hz, use_spec


# ---------------------------------------------------------------------------
# python API
# ---------------------------------------------------------------------------

@dataclass
class BrdfParams:
    """Per-point material parameters, clamped to their valid ranges."""

    diffuse_albedo: np.ndarray
    specular_f0: np.ndarray
    roughness: float

    def __post_init__(self):
        self.diffuse_albedo = np.clip(
            np.asarray(self.diffuse_albedo, dtype=np.float64).reshape(3), 0.0, 1.0)
        self.specular_f0 = np.clip(
            np.asarray(self.specular_f0, dtype=np.float64).reshape(3), 0.0, 1.0)
        self.roughness = float(np.clip(self.roughness, R_MIN, 1.0))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.diffuse_albedo, self.specular_f0, [self.roughness]])

    @classmethod
    def from_vector(cls, v) -> "BrdfParams":
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return cls(v[:3], v[3:6], v[6])


class MaterialField:
    """Per-vertex BRDF parameters aligned with a mesh, stored as (n, 7)."""

    def __init__(self, values: np.ndarray):
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1, 7)
        self.values = clamp_material(values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def constant(cls, n: int, params: BrdfParams) -> "MaterialField":
        return cls(np.tile(params.as_vector(), (n, 1)))


def clamp_material(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    out[..., :6] = np.clip(out[..., :6], 0.0, 1.0)
    out[..., 6] = np.clip(out[..., 6], R_MIN, 1.0)
    return out


def material_at(field: MaterialField, mesh, face: int, barycentrics) -> BrdfParams:
    """Barycentric interpolation of vertex materials inside one face."""
    bary = np.asarray(barycentrics, dtype=np.float64).reshape(3)
    if abs(bary.sum() - 1.0) > 1e-6 or np.any(bary < -1e-12):
        raise ValueError("barycentrics must be non-negative and sum to 1")
    if face < 0 or face >= mesh.n_faces:
        raise IndexError(f"face {face} out of range")
    idx = mesh.faces[face]
    v = bary @ field.values[idx]
    return BrdfParams.from_vector(v)


def brdf_eval(p: BrdfParams, wi, wo, n) -> np.ndarray:
    """BRDF value for unit directions (cosine not included)."""
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d, f0 = p.diffuse_albedo, p.specular_f0
    return np.array(eval_core(d[0], d[1], d[2], f0[0], f0[1], f0[2], p.roughness,
                              wi[0], wi[1], wi[2], wo[0], wo[1], wo[2],
                              n[0], n[1], n[2]))


def brdf_pdf(p: BrdfParams, wo, wi, n) -> float:
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d, f0 = p.diffuse_albedo, p.specular_f0
    return float(pdf_core(d[0], d[1], d[2], f0[0], f0[1], f0[2], p.roughness,
                          wo[0], wo[1], wo[2], wi[0], wi[1], wi[2],
                          n[0], n[1], n[2]))


def brdf_sample(p: BrdfParams, wo, n, u, mirror_half: bool = False):
    """Sample ``wi`` from the lobe mixture given three uniform variates.

    Returns ``(wi, pdf, half_vector_or_None)``; a rejected (below-horizon)
    sample comes back as ``(None, 0.0, half)``.
    """
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).reshape(3)
    d, f0 = p.diffuse_albedo, p.specular_f0
    wix, wiy, wiz, pdf, hx, hy, hz, is_spec = sample_core(
        d[0], d[1], d[2], f0[0], f0[1], f0[2], p.roughness,
        wo[0], wo[1], wo[2], n[0], n[1], n[2], u[0], u[1], u[2], mirror_half)
    half = np.array([hx, hy, hz]) if is_spec else None
    if pdf <= 0.0:
        return None, 0.0, half
    return np.array([wix, wiy, wiz]), float(pdf), half


def antithetic_half_vector(omega_h, n) -> np.ndarray:
    """Reflect a half vector about the normal; preserves the GGX D value."""
    omega_h = np.asarray(omega_h, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    ndh = float(np.dot(n, omega_h))
    if ndh <= 0.0:
        raise ValueError("half vector must be in the normal's hemisphere")
    return 2.0 * ndh * n - omega_h
