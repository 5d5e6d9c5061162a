"""Numba path-tracing kernels.

One trace routine serves both the forward renderer and the gradient passes:
it always records the per-bounce quantities needed to differentiate the
path's light-carrying terms with all sampling decisions and pdfs detached.
Radiance is computed by the same instruction sequence in every mode, so a
gradient replay reproduces the forward image bitwise.

Estimator layout per path: at each object vertex one next-event light sample
and one BRDF continuation, combined with the power heuristic (beta = 2);
paths end on an emitter hit, at ``max_depth`` object bounces, or by Russian
roulette keyed on throughput luminance.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .brdf import (eval_core, eval_grad_core, luminance, pdf_core, sample_core)
from .bvh import bvh_intersect, bvh_occluded
from .lighting import latlong_eval, latlong_pdf, latlong_sample
from .sampling import (P_BSDF, P_EDGE, P_LIGHT, P_LOBE, P_PIXEL_JITTER, P_RR,
                       rand_ld, rand_u01)

MAXB = 24  # hard cap on recorded object bounces
GRAZE_MIN = 1e-3  # incidence-cosine floor for first-hit vertex derivatives
N_CLAMP = 0.01  # minimum shading-normal cosine against the outgoing ray

ENV_INFINITE = 0
ENV_SPHERE = 1

END_NONE = 0
END_SPHERE_EMITTER = 1
END_INFINITE_EMITTER = 2
END_MISS = -1  # escaped a sphere emitter (counted warning)


def make_scratch():
    """Per-thread record buffers for one path (reused across samples)."""
    return (
        np.zeros(MAXB, dtype=np.int64),     # 0 face
        np.zeros((MAXB, 2)),                # 1 bary (b1, b2)
        np.zeros((MAXB, 3)),                # 2 hit point
        np.zeros((MAXB, 3)),                # 3 shading normal
        np.zeros((MAXB, 3)),                # 4 wo
        np.zeros((MAXB, 7)),                # 5 interpolated material
        np.zeros(MAXB, dtype=np.uint8),     # 6 roughness-escalated flag
        np.zeros((MAXB, 3)),                # 7 throughput at vertex entry
        np.zeros(MAXB, dtype=np.uint8),     # 8 nee valid
        np.zeros((MAXB, 3)),                # 9 nee direction
        np.zeros(MAXB),                     # 10 nee distance
        np.zeros((MAXB, 3)),                # 11 nee brdf value
        np.zeros((MAXB, 2)),                # 12 nee (pdf, mis weight)
        np.zeros(MAXB),                     # 13 nee cos at surface
        np.zeros((MAXB, 3)),                # 14 nee radiance
        np.zeros(MAXB, dtype=np.int64),     # 15 nee emitter face
        np.zeros((MAXB, 3)),                # 16 nee emitter bary
        np.zeros((MAXB, 3)),                # 17 nee local term (f cos w Le / pdf)
        np.zeros((MAXB, 3)),                # 18 continuation brdf value
        np.zeros(MAXB),                     # 19 continuation cos
        np.zeros((MAXB, 2)),                # 20 continuation (pdf, rr divisor)
        np.zeros((MAXB, 3)),                # 21 continuation direction wi
    )


@njit(cache=True, inline="always")
def _smooth_light_pdf(ler, leg, leb, e_aux, yx, yy, yz, dx, dy, dz, dist):
    """Continuous stand-in for the sphere light's solid-angle pdf, used only
    inside MIS weights: interpolated luminance over total power replaces the
    piecewise-constant per-face area density and the radial direction
    replaces the face normal, so the weight has no jumps across emitter
    triangles and stays differentiable when a perturbation slides the hit
    point. Returns -1 when degenerate."""
    rx = yx - e_aux[0]
    ry = yy - e_aux[1]
    rz = yz - e_aux[2]
    rl = np.sqrt(rx * rx + ry * ry + rz * rz)
    if rl < 1e-12:
        return -1.0
    cos_r = abs((rx * dx + ry * dy + rz * dz) / rl)
    if cos_r < 1e-9:
        return -1.0
    return luminance(ler, leg, leb) * e_aux[3] * dist * dist / cos_r


@njit(cache=True, inline="always")
def _interp3(arr, faces, f, b0, b1, b2, col):
    return (b0 * arr[faces[f, 0], col] + b1 * arr[faces[f, 1], col]
            + b2 * arr[faces[f, 2], col])


@njit(cache=True)
def trace_record(
    ox, oy, oz, dx, dy, dz,
    obj, env_type, env, inf_env,
    seed, pixel, sample,
    max_depth, rr_start, ray_eps, pass_id, rough_escalate, use_nee,
    rec,
):
    """Trace one path, recording per-bounce data into ``rec``.

    ``obj`` = (nmin, nmax, left, right, start, count, order, verts, faces,
    vnormals, materials); ``env`` = (nmin, nmax, left, right, start, count,
    order, verts, faces, fnormals, radiance, power_cdf, pdf_area,
    aux = [center xyz, 1 / total power]);
    ``inf_env`` = (texture, row_cdf, cond_cdf, pdf_table).

    Returns (r, g, b, n_bounces, end_type, end_face, end_b0, end_b1, end_b2,
    endT_r, endT_g, endT_b, endLe_r, endLe_g, endLe_b, end_w,
    end_dx, end_dy, end_dz).
    """
    (o_nmin, o_nmax, o_left, o_right, o_start, o_cnt, o_order, o_verts,
     o_faces, o_vn, o_mat) = obj
    (e_nmin, e_nmax, e_left, e_right, e_start, e_cnt, e_order, e_verts,
     e_faces, e_fn, e_rad, e_cdf, e_pdfA, e_aux) = env
    tex, row_cdf, cond_cdf, pdf_table = inf_env
    (rec_face, rec_bary, rec_hit, rec_n, rec_wo, rec_mat, rec_resc, rec_Tin,
     rec_nv, rec_ndir, rec_ndist, rec_nf, rec_npw, rec_ncos, rec_nLe,
     rec_nef, rec_neb, rec_nloc, rec_cf, rec_ccos, rec_cpr, rec_wi) = rec

    lr = 0.0
    lg = 0.0
    lb = 0.0
    tr = 1.0
    tg = 1.0
    tb = 1.0
    prev_pdf = 0.0
    b = 0
    end_type = END_NONE
    end_face = -1
    eb0 = eb1 = eb2 = 0.0
    endT_r = endT_g = endT_b = 0.0
    endLe_r = endLe_g = endLe_b = 0.0
    end_w = 0.0
    end_dx = end_dy = end_dz = 0.0

    while True:
        to, fo, ob1, ob2 = bvh_intersect(
            o_nmin, o_nmax, o_left, o_right, o_start, o_cnt, o_order,
            o_verts, o_faces, ox, oy, oz, dx, dy, dz, ray_eps, np.inf)
        if env_type == ENV_SPHERE:
            te, fe, sb1, sb2 = bvh_intersect(
                e_nmin, e_nmax, e_left, e_right, e_start, e_cnt, e_order,
                e_verts, e_faces, ox, oy, oz, dx, dy, dz, ray_eps, np.inf)
        else:
            te, fe, sb1, sb2 = np.inf, -1, 0.0, 0.0

        if fo < 0 and fe < 0:
            if env_type == ENV_INFINITE:
                er, eg, eb = latlong_eval(tex, dx, dy, dz)
                if b == 0 or not use_nee:
                    w = 1.0
                else:
                    pl = latlong_pdf(pdf_table, dx, dy, dz)
                    w = prev_pdf * prev_pdf / (prev_pdf * prev_pdf + pl * pl)
                lr += tr * er * w
                lg += tg * eg * w
                lb += tb * eb * w
                end_type = END_INFINITE_EMITTER
                endT_r, endT_g, endT_b = tr, tg, tb
                endLe_r, endLe_g, endLe_b = er, eg, eb
                end_w = w
                end_dx, end_dy, end_dz = dx, dy, dz
            else:
                end_type = END_MISS
            break

        if fe >= 0 and (fo < 0 or te < to):
            # emitter surface hit
            b0 = 1.0 - sb1 - sb2
            er = b0 * e_rad[e_faces[fe, 0], 0] + sb1 * e_rad[e_faces[fe, 1], 0] + sb2 * e_rad[e_faces[fe, 2], 0]
            eg = b0 * e_rad[e_faces[fe, 0], 1] + sb1 * e_rad[e_faces[fe, 1], 1] + sb2 * e_rad[e_faces[fe, 2], 1]
            ebv = b0 * e_rad[e_faces[fe, 0], 2] + sb1 * e_rad[e_faces[fe, 1], 2] + sb2 * e_rad[e_faces[fe, 2], 2]
            if b == 0 or not use_nee:
                w = 1.0
            else:
                pl = _smooth_light_pdf(er, eg, ebv, e_aux,
                                       ox + te * dx, oy + te * dy,
                                       oz + te * dz, dx, dy, dz, te)
                if pl < 0.0:
                    w = 0.0
                else:
                    w = prev_pdf * prev_pdf / (prev_pdf * prev_pdf + pl * pl)
            lr += tr * er * w
            lg += tg * eg * w
            lb += tb * ebv * w
            end_type = END_SPHERE_EMITTER
            end_face = fe
            eb0, eb1, eb2 = b0, sb1, sb2
            endT_r, endT_g, endT_b = tr, tg, tb
            endLe_r, endLe_g, endLe_b = er, eg, ebv
            end_w = w
            end_dx, end_dy, end_dz = dx, dy, dz
            break

        # object hit
        if b >= max_depth or b >= MAXB:
            break
        bi = b
        b += 1
        px = ox + to * dx
        py = oy + to * dy
        pz = oz + to * dz
        b0 = 1.0 - ob1 - ob2
        nx = _interp3(o_vn, o_faces, fo, b0, ob1, ob2, 0)
        ny = _interp3(o_vn, o_faces, fo, b0, ob1, ob2, 1)
        nz = _interp3(o_vn, o_faces, fo, b0, ob1, ob2, 2)
        nl = np.sqrt(nx * nx + ny * ny + nz * nz)
        if nl < 1e-300:
            break
        nx /= nl
        ny /= nl
        nz /= nl
        wox, woy, woz = -dx, -dy, -dz
        ndv = nx * wox + ny * woy + nz * woz
        if ndv < N_CLAMP:
            # interpolated normals can turn away from the viewer near the
            # silhouette; bend the normal into the view hemisphere instead
            # of flipping it so shading stays continuous in the geometry
            nx += (N_CLAMP - ndv) * wox
            ny += (N_CLAMP - ndv) * woy
            nz += (N_CLAMP - ndv) * woz
            nl = np.sqrt(nx * nx + ny * ny + nz * nz)
            nx /= nl
            ny /= nl
            nz /= nl
        for c in range(7):
            rec_mat[bi, c] = _interp3(o_mat, o_faces, fo, b0, ob1, ob2, c)
            if c < 6:
                rec_mat[bi, c] = min(max(rec_mat[bi, c], 0.0), 1.0)
        rec_mat[bi, 6] = min(max(rec_mat[bi, 6], 0.01), 1.0)
        rec_resc[bi] = 0
        if rough_escalate and bi >= 2 and rec_mat[bi, 6] < 0.1:
            rec_mat[bi, 6] = 0.1
            rec_resc[bi] = 1
        m_dr = rec_mat[bi, 0]; m_dg = rec_mat[bi, 1]; m_db = rec_mat[bi, 2]
        m_fr = rec_mat[bi, 3]; m_fg = rec_mat[bi, 4]; m_fb = rec_mat[bi, 5]
        m_ro = rec_mat[bi, 6]

        rec_face[bi] = fo
        rec_bary[bi, 0] = ob1
        rec_bary[bi, 1] = ob2
        rec_hit[bi, 0] = px; rec_hit[bi, 1] = py; rec_hit[bi, 2] = pz
        rec_n[bi, 0] = nx; rec_n[bi, 1] = ny; rec_n[bi, 2] = nz
        rec_wo[bi, 0] = wox; rec_wo[bi, 1] = woy; rec_wo[bi, 2] = woz
        rec_Tin[bi, 0] = tr; rec_Tin[bi, 1] = tg; rec_Tin[bi, 2] = tb
        rec_nv[bi] = 0
        rec_nloc[bi, 0] = 0.0; rec_nloc[bi, 1] = 0.0; rec_nloc[bi, 2] = 0.0

        # ---- next-event estimation ----
        if bi == 0:
            # low-discrepancy draws stratify the direct-lighting integral
            u0 = rand_ld(seed, pixel, sample, 0, P_LIGHT, 0, 5)
            u1 = rand_ld(seed, pixel, sample, 0, P_LIGHT, 1, 7)
            u2 = rand_ld(seed, pixel, sample, 0, P_LIGHT, 2, 11)
        else:
            u0 = rand_u01(seed, pixel, sample, bi, P_LIGHT, 0)
            u1 = rand_u01(seed, pixel, sample, bi, P_LIGHT, 1)
            u2 = rand_u01(seed, pixel, sample, bi, P_LIGHT, 2)
        pdf_l = 0.0
        if not use_nee:
            pdf_l = -1.0
        ldx = ldy = ldz = 0.0
        ldist = np.inf
        ler = leg = leb = 0.0
        lface = -1
        lb0 = lb1 = lb2 = 0.0
        if not use_nee:
            pass
        elif env_type == ENV_SPHERE:
            lface = np.searchsorted(e_cdf, u0, side="right")
            if lface >= len(e_cdf):
                lface = len(e_cdf) - 1
            su = np.sqrt(u1)
            lb0 = 1.0 - su
            lb1 = u2 * su
            lb2 = 1.0 - lb0 - lb1
            i0 = e_faces[lface, 0]; i1 = e_faces[lface, 1]; i2 = e_faces[lface, 2]
            yx = lb0 * e_verts[i0, 0] + lb1 * e_verts[i1, 0] + lb2 * e_verts[i2, 0]
            yy = lb0 * e_verts[i0, 1] + lb1 * e_verts[i1, 1] + lb2 * e_verts[i2, 1]
            yz = lb0 * e_verts[i0, 2] + lb1 * e_verts[i1, 2] + lb2 * e_verts[i2, 2]
            ldx = yx - px; ldy = yy - py; ldz = yz - pz
            ldist = np.sqrt(ldx * ldx + ldy * ldy + ldz * ldz)
            if ldist > 1e-12:
                ldx /= ldist; ldy /= ldist; ldz /= ldist
                cos_e = -(e_fn[lface, 0] * ldx + e_fn[lface, 1] * ldy + e_fn[lface, 2] * ldz)
                if abs(cos_e) > 1e-9:
                    pdf_l = e_pdfA[lface] * ldist * ldist / abs(cos_e)
                    ler = lb0 * e_rad[i0, 0] + lb1 * e_rad[i1, 0] + lb2 * e_rad[i2, 0]
                    leg = lb0 * e_rad[i0, 1] + lb1 * e_rad[i1, 1] + lb2 * e_rad[i2, 1]
                    leb = lb0 * e_rad[i0, 2] + lb1 * e_rad[i1, 2] + lb2 * e_rad[i2, 2]
        elif env_type == ENV_INFINITE:
            ldx, ldy, ldz, pdf_l, ler, leg, leb = latlong_sample(
                tex, row_cdf, cond_cdf, pdf_table, u0, u1)
            ldist = np.inf
        cosl = nx * ldx + ny * ldy + nz * ldz
        if pdf_l > 0.0 and cosl > 0.0:
            sx = px + ldx * ray_eps
            sy = py + ldy * ray_eps
            sz = pz + ldz * ray_eps
            if ldist == np.inf:
                tfar = np.inf
            else:
                tfar = ldist - ray_eps - 1e-9 * ldist
            blocked = bvh_occluded(o_nmin, o_nmax, o_left, o_right, o_start,
                                   o_cnt, o_order, o_verts, o_faces,
                                   sx, sy, sz, ldx, ldy, ldz, ray_eps, tfar)
            if not blocked and env_type == ENV_SPHERE:
                blocked = bvh_occluded(e_nmin, e_nmax, e_left, e_right,
                                       e_start, e_cnt, e_order, e_verts,
                                       e_faces, sx, sy, sz, ldx, ldy, ldz,
                                       ray_eps, tfar)
            if not blocked:
                fr_, fg_, fb_ = eval_core(m_dr, m_dg, m_db, m_fr, m_fg, m_fb,
                                          m_ro, ldx, ldy, ldz, wox, woy, woz,
                                          nx, ny, nz)
                pdf_b = pdf_core(m_dr, m_dg, m_db, m_fr, m_fg, m_fb, m_ro,
                                 wox, woy, woz, ldx, ldy, ldz, nx, ny, nz)
                if env_type == ENV_SPHERE:
                    pl_w = _smooth_light_pdf(
                        ler, leg, leb, e_aux, px + ldist * ldx,
                        py + ldist * ldy, pz + ldist * ldz,
                        ldx, ldy, ldz, ldist)
                    if pl_w < 0.0:
                        w = 1.0  # proxy pdf diverges there, weight -> 1
                    else:
                        w = pl_w * pl_w / (pl_w * pl_w + pdf_b * pdf_b)
                else:
                    w = pdf_l * pdf_l / (pdf_l * pdf_l + pdf_b * pdf_b)
                scale = cosl * w / pdf_l
                loc_r = fr_ * scale * ler
                loc_g = fg_ * scale * leg
                loc_b = fb_ * scale * leb
                lr += tr * loc_r
                lg += tg * loc_g
                lb += tb * loc_b
                rec_nv[bi] = 1
                rec_ndir[bi, 0] = ldx; rec_ndir[bi, 1] = ldy; rec_ndir[bi, 2] = ldz
                rec_ndist[bi] = ldist
                rec_nf[bi, 0] = fr_; rec_nf[bi, 1] = fg_; rec_nf[bi, 2] = fb_
                rec_npw[bi, 0] = pdf_l; rec_npw[bi, 1] = w
                rec_ncos[bi] = cosl
                rec_nLe[bi, 0] = ler; rec_nLe[bi, 1] = leg; rec_nLe[bi, 2] = leb
                rec_nef[bi] = lface
                rec_neb[bi, 0] = lb0; rec_neb[bi, 1] = lb1; rec_neb[bi, 2] = lb2
                rec_nloc[bi, 0] = loc_r; rec_nloc[bi, 1] = loc_g; rec_nloc[bi, 2] = loc_b

        # ---- continuation ----
        if bi == 0:
            ul = rand_ld(seed, pixel, sample, 0, P_LOBE, 0, 13)
            ub0 = rand_ld(seed, pixel, sample, 0, P_BSDF, 0, 17)
            ub1 = rand_ld(seed, pixel, sample, 0, P_BSDF, 1, 19)
        else:
            ul = rand_u01(seed, pixel, sample, bi, P_LOBE, 0)
            ub0 = rand_u01(seed, pixel, sample, bi, P_BSDF, 0)
            ub1 = rand_u01(seed, pixel, sample, bi, P_BSDF, 1)
        mirror = pass_id == 1 and bi == 0
        wix, wiy, wiz, pdf_c, hx, hy, hz, is_spec = sample_core(
            m_dr, m_dg, m_db, m_fr, m_fg, m_fb, m_ro,
            wox, woy, woz, nx, ny, nz, ul, ub0, ub1, mirror)
        rec_cf[bi, 0] = 0.0; rec_cf[bi, 1] = 0.0; rec_cf[bi, 2] = 0.0
        rec_ccos[bi] = 0.0
        rec_cpr[bi, 0] = 0.0
        rec_cpr[bi, 1] = 1.0
        if pdf_c <= 0.0:
            break
        cfr, cfg, cfb = eval_core(m_dr, m_dg, m_db, m_fr, m_fg, m_fb, m_ro,
                                  wix, wiy, wiz, wox, woy, woz, nx, ny, nz)
        cosc = nx * wix + ny * wiy + nz * wiz
        tr *= cfr * cosc / pdf_c
        tg *= cfg * cosc / pdf_c
        tb *= cfb * cosc / pdf_c
        rr_div = 1.0
        if b >= rr_start:
            q = min(1.0, luminance(tr, tg, tb))
            urr = rand_u01(seed, pixel, sample, bi, P_RR, 0)
            if urr >= q:
                break
            tr /= q
            tg /= q
            tb /= q
            rr_div = q
        rec_cf[bi, 0] = cfr; rec_cf[bi, 1] = cfg; rec_cf[bi, 2] = cfb
        rec_ccos[bi] = cosc
        rec_cpr[bi, 0] = pdf_c
        rec_cpr[bi, 1] = rr_div
        rec_wi[bi, 0] = wix; rec_wi[bi, 1] = wiy; rec_wi[bi, 2] = wiz
        ox = px + wix * ray_eps
        oy = py + wiy * ray_eps
        oz = pz + wiz * ray_eps
        dx, dy, dz = wix, wiy, wiz
        prev_pdf = pdf_c

    return (lr, lg, lb, b, end_type, end_face, eb0, eb1, eb2,
            endT_r, endT_g, endT_b, endLe_r, endLe_g, endLe_b, end_w,
            end_dx, end_dy, end_dz)


# ---------------------------------------------------------------------------
# gradient accumulation from path records
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _latlong_stencil(h, w, dx, dy, dz):
    """Bilinear texel stencil matching latlong_eval exactly."""
    inv2pi = 1.0 / (2.0 * np.pi)
    u = np.arctan2(dz, dx) * inv2pi
    if u < 0.0:
        u += 1.0
    v = np.arccos(min(max(dy, -1.0), 1.0)) / np.pi
    x = u * w - 0.5
    y = v * h - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x1 = (x0 + 1) % w
    x0 = x0 % w
    y1 = min(max(y0 + 1, 0), h - 1)
    y0 = min(max(y0, 0), h - 1)
    return (y0, x0, y0, x1, y1, x0, y1, x1,
            (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)


@njit(cache=True, inline="always")
def _plane_hit_affine(v0x, v0y, v0z, v1x, v1y, v1z, v2x, v2y, v2z,
                      ox, oy, oz, dx, dy, dz):
    """Ray / triangle-plane intersection with affine barycentrics.

    The plane is unbounded so interior finite differences stay smooth when a
    perturbation pushes the hit slightly past an edge; silhouette jumps are
    handled by the separate boundary term. Returns (ok, b0, b1, b2).
    """
    e1x = v1x - v0x; e1y = v1y - v0y; e1z = v1z - v0z
    e2x = v2x - v0x; e2y = v2y - v0y; e2z = v2z - v0z
    ngx = e1y * e2z - e1z * e2y
    ngy = e1z * e2x - e1x * e2z
    ngz = e1x * e2y - e1y * e2x
    denom = dx * ngx + dy * ngy + dz * ngz
    if abs(denom) < 1e-18:
        return False, 0.0, 0.0, 0.0
    t = ((v0x - ox) * ngx + (v0y - oy) * ngy + (v0z - oz) * ngz) / denom
    if t <= 0.0:
        return False, 0.0, 0.0, 0.0
    px = ox + t * dx - v0x
    py = oy + t * dy - v0y
    pz = oz + t * dz - v0z
    d00 = e1x * e1x + e1y * e1y + e1z * e1z
    d01 = e1x * e2x + e1y * e2y + e1z * e2z
    d11 = e2x * e2x + e2y * e2y + e2z * e2z
    dp1 = px * e1x + py * e1y + pz * e1z
    dp2 = px * e2x + py * e2y + pz * e2z
    det = d00 * d11 - d01 * d01
    if abs(det) < 1e-30:
        return False, 0.0, 0.0, 0.0
    b1 = (d11 * dp1 - d01 * dp2) / det
    b2 = (d00 * dp2 - d01 * dp1) / det
    return True, 1.0 - b1 - b2, b1, b2


@njit(cache=True)
def _first_hit_terms(bary0, bary1, bary2,
                     v0x, v0y, v0z, v1x, v1y, v1z, v2x, v2y, v2z,
                     obj, f0, wox, woy, woz, nee_valid, yx, yy, yz,
                     nee_inf, ndx, ndy, ndz, le_r, le_g, le_b, pdfA0,
                     e_fnx, e_fny, e_fnz,
                     cont_on, wix, wiy, wiz, pdf_c, cont_rr, d0r, d0g, d0b,
                     escalate0, end_track, end_tri, end_le, end_w,
                     end_mis, e_aux):
    """Radiance terms of the first object vertex as a function of its
    triangle's (possibly perturbed) geometry, replaying the forward
    computation with detached sampling densities: the light point stays
    fixed in area measure while its direction and the MIS weights move with
    the surface; the continuation direction ``wi`` and its pdf ``pdf_c``
    stay frozen at their sampled values while the BRDF is re-evaluated
    against the perturbed shading frame. Freezing the density (rather than
    replaying the sampler) keeps the sharp normal-distribution factor in the
    differentiated numerator, which is exactly the heavy-tailed term the
    mirrored-half-vector antithetic pass cancels.

    ``pdfA0`` is the light sample's area pdf (its solid-angle pdf for an
    infinite emitter); ``cont_rr`` the roulette divisor; ``d0*`` = detached
    downstream radiance past the continuation, replaced by a tracked emitter
    lookup when ``end_track``. Returns the summed first-vertex contribution.
    """
    o_vn = obj[9]
    o_mat = obj[10]
    o_faces = obj[8]
    i0 = o_faces[f0, 0]; i1 = o_faces[f0, 1]; i2 = o_faces[f0, 2]
    px = bary0 * v0x + bary1 * v1x + bary2 * v2x
    py = bary0 * v0y + bary1 * v1y + bary2 * v2y
    pz = bary0 * v0z + bary1 * v1z + bary2 * v2z
    nx = bary0 * o_vn[i0, 0] + bary1 * o_vn[i1, 0] + bary2 * o_vn[i2, 0]
    ny = bary0 * o_vn[i0, 1] + bary1 * o_vn[i1, 1] + bary2 * o_vn[i2, 1]
    nz = bary0 * o_vn[i0, 2] + bary1 * o_vn[i1, 2] + bary2 * o_vn[i2, 2]
    nl = np.sqrt(nx * nx + ny * ny + nz * nz)
    if nl < 1e-300:
        return 0.0, 0.0, 0.0, False
    nx /= nl; ny /= nl; nz /= nl
    ndv = nx * wox + ny * woy + nz * woz
    if ndv < N_CLAMP:
        # same hemisphere clamp as the forward tracer: shading must be a
        # continuous function of the perturbed geometry or the finite
        # difference would divide a jump by the tiny step
        nx += (N_CLAMP - ndv) * wox
        ny += (N_CLAMP - ndv) * woy
        nz += (N_CLAMP - ndv) * woz
        nl = np.sqrt(nx * nx + ny * ny + nz * nz)
        nx /= nl; ny /= nl; nz /= nl
    m = np.empty(7)
    for c in range(7):
        m[c] = bary0 * o_mat[i0, c] + bary1 * o_mat[i1, c] + bary2 * o_mat[i2, c]
        if c < 6:
            m[c] = min(max(m[c], 0.0), 1.0)
    m[6] = min(max(m[6], 0.01), 1.0)
    if escalate0 and m[6] < 0.1:
        m[6] = 0.1
    out_r = 0.0
    out_g = 0.0
    out_b = 0.0
    if nee_valid:
        pl = 0.0
        if nee_inf:
            ldx, ldy, ldz = ndx, ndy, ndz
            pl = pdfA0
        else:
            ldx = yx - px; ldy = yy - py; ldz = yz - pz
            dist = np.sqrt(ldx * ldx + ldy * ldy + ldz * ldz)
            if dist < 1e-12:
                return 0.0, 0.0, 0.0, False
            ldx /= dist; ldy /= dist; ldz /= dist
            cos_e = abs(e_fnx * ldx + e_fny * ldy + e_fnz * ldz)
            if cos_e > 1e-12:
                pl = pdfA0 * dist * dist / cos_e
        cosl = nx * ldx + ny * ldy + nz * ldz
        if cosl > 0.0 and pl > 0.0:
            fr_, fg_, fb_ = eval_core(m[0], m[1], m[2], m[3], m[4], m[5], m[6],
                                      ldx, ldy, ldz, wox, woy, woz, nx, ny, nz)
            pb = pdf_core(m[0], m[1], m[2], m[3], m[4], m[5], m[6],
                          wox, woy, woz, ldx, ldy, ldz, nx, ny, nz)
            if nee_inf:
                w = pl * pl / (pl * pl + pb * pb)
            else:
                pl_w = _smooth_light_pdf(le_r, le_g, le_b, e_aux,
                                         yx, yy, yz, ldx, ldy, ldz, dist)
                if pl_w < 0.0:
                    w = 1.0  # proxy pdf diverges there, so its weight -> 1
                else:
                    w = pl_w * pl_w / (pl_w * pl_w + pb * pb)
            out_r += fr_ * cosl * (w / pl) * le_r
            out_g += fg_ * cosl * (w / pl) * le_g
            out_b += fb_ * cosl * (w / pl) * le_b
    if cont_on:
        cosc = nx * wix + ny * wiy + nz * wiz
        if pdf_c > 0.0 and cosc > 0.0:
            if end_track:
                # the continuation terminates directly on the sphere emitter:
                # its interpolated radiance is continuous in the lookup point,
                # so the moved first hit and re-sampled direction shift the
                # emitter hit, its radiance, and the MIS weight together
                oke, c0, c1, c2 = _plane_hit_affine(
                    end_tri[0, 0], end_tri[0, 1], end_tri[0, 2],
                    end_tri[1, 0], end_tri[1, 1], end_tri[1, 2],
                    end_tri[2, 0], end_tri[2, 1], end_tri[2, 2],
                    px, py, pz, wix, wiy, wiz)
                if oke:
                    we = end_w
                    ter = (c0 * end_le[0, 0] + c1 * end_le[1, 0]
                           + c2 * end_le[2, 0])
                    teg = (c0 * end_le[0, 1] + c1 * end_le[1, 1]
                           + c2 * end_le[2, 1])
                    teb = (c0 * end_le[0, 2] + c1 * end_le[1, 2]
                           + c2 * end_le[2, 2])
                    if end_mis:
                        ehx = (c0 * end_tri[0, 0] + c1 * end_tri[1, 0]
                               + c2 * end_tri[2, 0])
                        ehy = (c0 * end_tri[0, 1] + c1 * end_tri[1, 1]
                               + c2 * end_tri[2, 1])
                        ehz = (c0 * end_tri[0, 2] + c1 * end_tri[1, 2]
                               + c2 * end_tri[2, 2])
                        tdist = np.sqrt((ehx - px) ** 2 + (ehy - py) ** 2
                                        + (ehz - pz) ** 2)
                        ple = _smooth_light_pdf(ter, teg, teb, e_aux,
                                                ehx, ehy, ehz,
                                                wix, wiy, wiz, tdist)
                        if ple < 0.0:
                            we = 0.0
                        else:
                            # the MIS weight is part of the integrand, so its
                            # BSDF density moves with the perturbed frame even
                            # though the estimator's divisor stays frozen
                            pb_w = pdf_core(m[0], m[1], m[2], m[3], m[4],
                                            m[5], m[6], wox, woy, woz,
                                            wix, wiy, wiz, nx, ny, nz)
                            we = (pb_w * pb_w
                                  / (pb_w * pb_w + ple * ple))
                    d0r = we * ter
                    d0g = we * teg
                    d0b = we * teb
            fr_, fg_, fb_ = eval_core(m[0], m[1], m[2], m[3], m[4], m[5], m[6],
                                      wix, wiy, wiz, wox, woy, woz, nx, ny, nz)
            sc = cosc / (pdf_c * cont_rr)
            out_r += fr_ * sc * d0r
            out_g += fg_ * sc * d0g
            out_b += fb_ * sc * d0b
    return out_r, out_g, out_b, True


@njit(cache=True)
def accumulate_gradients(
    rec, nb, end_type, end_face, eb0, eb1, eb2,
    endT_r, endT_g, endT_b, endLe_r, endLe_g, endLe_b, end_w,
    end_dx, end_dy, end_dz,
    ar, ag, ab,
    want_mat, want_env_rad, want_env_r, want_verts, use_nee,
    obj, env_type, env, inf_env,
    e_unit, e_r, e_scale, e_cx, e_cy, e_cz,
    fd_h_vert, fd_h_r,
    cam_ox, cam_oy, cam_oz, dir0x, dir0y, dir0z,
    d_mat, d_env_rad, d_env_r, d_vpos, lam,
):
    """Scatter one path's parameter/vertex gradients weighted by the pixel
    adjoint (ar, ag, ab). ``lam`` is a (MAXB, 3) scratch that receives the
    detached downstream radiance past each vertex."""
    (rec_face, rec_bary, rec_hit, rec_n, rec_wo, rec_mat, rec_resc, rec_Tin,
     rec_nv, rec_ndir, rec_ndist, rec_nf, rec_npw, rec_ncos, rec_nLe,
     rec_nef, rec_neb, rec_nloc, rec_cf, rec_ccos, rec_cpr, rec_wi) = rec
    o_faces = obj[8]
    e_verts = env[7]
    e_faces = env[8]
    e_fn = env[9]
    tex = inf_env[0]

    # the path-terminating emitter term is linear in its interpolated
    # radiance with weight T * w, whatever the path length
    if want_env_rad:
        if end_type == END_SPHERE_EMITTER:
            for j in range(3):
                vi = e_faces[end_face, j]
                bw = eb0 if j == 0 else (eb1 if j == 1 else eb2)
                d_env_rad[vi, 0] += ar * endT_r * end_w * bw
                d_env_rad[vi, 1] += ag * endT_g * end_w * bw
                d_env_rad[vi, 2] += ab * endT_b * end_w * bw
        elif end_type == END_INFINITE_EMITTER:
            h, w = tex.shape[0], tex.shape[1]
            (ya, xa, yb, xb, yc, xc, yd, xd, wa, wb, wc, wd) = _latlong_stencil(
                h, w, end_dx, end_dy, end_dz)
            for q in range(4):
                if q == 0:
                    ti = ya * w + xa; tw = wa
                elif q == 1:
                    ti = yb * w + xb; tw = wb
                elif q == 2:
                    ti = yc * w + xc; tw = wc
                else:
                    ti = yd * w + xd; tw = wd
                d_env_rad[ti, 0] += ar * endT_r * end_w * tw
                d_env_rad[ti, 1] += ag * endT_g * end_w * tw
                d_env_rad[ti, 2] += ab * endT_b * end_w * tw
    # the deformed emitter moves under the path-terminating ray as its
    # vertices' inverted distances change; the interpolated radiance is
    # continuous in the lookup point, so a local central difference over the
    # end face's r values captures the whole chain (MIS weight detached)
    if want_env_r and env_type == ENV_SPHERE and end_type == END_SPHERE_EMITTER:
        if nb > 0:
            sox = rec_hit[nb - 1, 0]
            soy = rec_hit[nb - 1, 1]
            soz = rec_hit[nb - 1, 2]
        else:
            sox = cam_ox
            soy = cam_oy
            soz = cam_oz
        end_mis0 = nb > 0 and use_nee
        pdf_c0 = rec_cpr[nb - 1, 0] if nb > 0 else 0.0
        for j in range(3):
            evi = e_faces[end_face, j]
            acc0 = 0.0
            okfd = True
            for sgn in range(2):
                h_r = fd_h_r if sgn == 0 else -fd_h_r
                rv = e_r[evi] + h_r
                inv = e_scale / rv
                wjx = e_unit[evi, 0] * inv + e_cx
                wjy = e_unit[evi, 1] * inv + e_cy
                wjz = e_unit[evi, 2] * inv + e_cz
                t0x = wjx if j == 0 else e_verts[e_faces[end_face, 0], 0]
                t0y = wjy if j == 0 else e_verts[e_faces[end_face, 0], 1]
                t0z = wjz if j == 0 else e_verts[e_faces[end_face, 0], 2]
                t1x = wjx if j == 1 else e_verts[e_faces[end_face, 1], 0]
                t1y = wjy if j == 1 else e_verts[e_faces[end_face, 1], 1]
                t1z = wjz if j == 1 else e_verts[e_faces[end_face, 1], 2]
                t2x = wjx if j == 2 else e_verts[e_faces[end_face, 2], 0]
                t2y = wjy if j == 2 else e_verts[e_faces[end_face, 2], 1]
                t2z = wjz if j == 2 else e_verts[e_faces[end_face, 2], 2]
                oke, c0, c1, c2 = _plane_hit_affine(
                    t0x, t0y, t0z, t1x, t1y, t1z, t2x, t2y, t2z,
                    sox, soy, soz, end_dx, end_dy, end_dz)
                if not oke:
                    okfd = False
                    break
                ler = (c0 * env[10][e_faces[end_face, 0], 0]
                       + c1 * env[10][e_faces[end_face, 1], 0]
                       + c2 * env[10][e_faces[end_face, 2], 0])
                leg = (c0 * env[10][e_faces[end_face, 0], 1]
                       + c1 * env[10][e_faces[end_face, 1], 1]
                       + c2 * env[10][e_faces[end_face, 2], 1])
                leb = (c0 * env[10][e_faces[end_face, 0], 2]
                       + c1 * env[10][e_faces[end_face, 1], 2]
                       + c2 * env[10][e_faces[end_face, 2], 2])
                we = end_w
                if end_mis0:
                    # the emitter hit slides with the deformation; recompute
                    # the smooth light pdf inside the MIS weight accordingly
                    hpx = c0 * t0x + c1 * t1x + c2 * t2x
                    hpy = c0 * t0y + c1 * t1y + c2 * t2y
                    hpz = c0 * t0z + c1 * t1z + c2 * t2z
                    tdist = np.sqrt((hpx - sox) ** 2 + (hpy - soy) ** 2
                                    + (hpz - soz) ** 2)
                    ple = _smooth_light_pdf(ler, leg, leb, env[13],
                                            hpx, hpy, hpz,
                                            end_dx, end_dy, end_dz, tdist)
                    if ple < 0.0:
                        we = 0.0
                    else:
                        we = (pdf_c0 * pdf_c0
                              / (pdf_c0 * pdf_c0 + ple * ple))
                val = we * (ar * endT_r * ler + ag * endT_g * leg
                            + ab * endT_b * leb)
                if sgn == 0:
                    acc0 = val
                else:
                    d_env_r[evi] += (acc0 - val) / (2.0 * fd_h_r)
            if not okfd:
                continue

    if nb == 0:
        return

    # downstream radiance recursion (detached)
    if end_type == END_SPHERE_EMITTER or end_type == END_INFINITE_EMITTER:
        lam[nb - 1, 0] = endLe_r * end_w
        lam[nb - 1, 1] = endLe_g * end_w
        lam[nb - 1, 2] = endLe_b * end_w
    else:
        lam[nb - 1, 0] = 0.0
        lam[nb - 1, 1] = 0.0
        lam[nb - 1, 2] = 0.0
    for k in range(nb - 2, -1, -1):
        pdf_c = rec_cpr[k + 1, 0]
        if pdf_c > 0.0:
            s = rec_ccos[k + 1] / (pdf_c * rec_cpr[k + 1, 1])
            lam[k, 0] = rec_nloc[k + 1, 0] + rec_cf[k + 1, 0] * s * lam[k + 1, 0]
            lam[k, 1] = rec_nloc[k + 1, 1] + rec_cf[k + 1, 1] * s * lam[k + 1, 1]
            lam[k, 2] = rec_nloc[k + 1, 2] + rec_cf[k + 1, 2] * s * lam[k + 1, 2]
        else:
            lam[k, 0] = rec_nloc[k + 1, 0]
            lam[k, 1] = rec_nloc[k + 1, 1]
            lam[k, 2] = rec_nloc[k + 1, 2]

    for k in range(nb):
        f = rec_face[k]
        b1 = rec_bary[k, 0]
        b2 = rec_bary[k, 1]
        b0 = 1.0 - b1 - b2
        nx = rec_n[k, 0]; ny = rec_n[k, 1]; nz = rec_n[k, 2]
        wox = rec_wo[k, 0]; woy = rec_wo[k, 1]; woz = rec_wo[k, 2]
        tr = rec_Tin[k, 0]; tg = rec_Tin[k, 1]; tb = rec_Tin[k, 2]
        m0 = rec_mat[k, 0]; m1 = rec_mat[k, 1]; m2 = rec_mat[k, 2]
        m3 = rec_mat[k, 3]; m4 = rec_mat[k, 4]; m5 = rec_mat[k, 5]
        m6 = rec_mat[k, 6]

        if want_mat:
            ga_r = 0.0; ga_g = 0.0; ga_b = 0.0  # d loss / d albedo per channel
            gf_r = 0.0; gf_g = 0.0; gf_b = 0.0
            g_ro = 0.0
            if rec_nv[k] == 1:
                scale = rec_ncos[k] * rec_npw[k, 1] / rec_npw[k, 0]
                cr = ar * tr * scale * rec_nLe[k, 0]
                cg = ag * tg * scale * rec_nLe[k, 1]
                cb = ab * tb * scale * rec_nLe[k, 2]
                (_, _, _, d_alb, d_f0, dr_r, dr_g, dr_b, _) = eval_grad_core(
                    m0, m1, m2, m3, m4, m5, m6,
                    rec_ndir[k, 0], rec_ndir[k, 1], rec_ndir[k, 2],
                    wox, woy, woz, nx, ny, nz)
                ga_r += cr * d_alb; ga_g += cg * d_alb; ga_b += cb * d_alb
                gf_r += cr * d_f0; gf_g += cg * d_f0; gf_b += cb * d_f0
                g_ro += cr * dr_r + cg * dr_g + cb * dr_b
            if rec_cpr[k, 0] > 0.0:
                scale = rec_ccos[k] / (rec_cpr[k, 0] * rec_cpr[k, 1])
                cr = ar * tr * scale * lam[k, 0]
                cg = ag * tg * scale * lam[k, 1]
                cb = ab * tb * scale * lam[k, 2]
                (_, _, _, d_alb, d_f0, dr_r, dr_g, dr_b, _) = eval_grad_core(
                    m0, m1, m2, m3, m4, m5, m6,
                    rec_wi[k, 0], rec_wi[k, 1], rec_wi[k, 2],
                    wox, woy, woz, nx, ny, nz)
                ga_r += cr * d_alb; ga_g += cg * d_alb; ga_b += cb * d_alb
                gf_r += cr * d_f0; gf_g += cg * d_f0; gf_b += cb * d_f0
                g_ro += cr * dr_r + cg * dr_g + cb * dr_b
            if rec_resc[k] == 1:
                g_ro = 0.0  # clamped to the escalator floor
            for j in range(3):
                vi = o_faces[f, j]
                bw = b0 if j == 0 else (b1 if j == 1 else b2)
                d_mat[vi, 0] += bw * ga_r
                d_mat[vi, 1] += bw * ga_g
                d_mat[vi, 2] += bw * ga_b
                d_mat[vi, 3] += bw * gf_r
                d_mat[vi, 4] += bw * gf_g
                d_mat[vi, 5] += bw * gf_b
                d_mat[vi, 6] += bw * g_ro

        if rec_nv[k] == 1 and want_env_rad:
            # d(term)/d(radiance) = T * f * cos * w / pdf at the light stencil
            sr = tr * rec_nf[k, 0] * rec_ncos[k] * rec_npw[k, 1] / rec_npw[k, 0]
            sg = tg * rec_nf[k, 1] * rec_ncos[k] * rec_npw[k, 1] / rec_npw[k, 0]
            sb = tb * rec_nf[k, 2] * rec_ncos[k] * rec_npw[k, 1] / rec_npw[k, 0]
            if env_type == ENV_SPHERE:
                lf = rec_nef[k]
                for j in range(3):
                    vi = e_faces[lf, j]
                    bw = rec_neb[k, j]
                    d_env_rad[vi, 0] += ar * sr * bw
                    d_env_rad[vi, 1] += ag * sg * bw
                    d_env_rad[vi, 2] += ab * sb * bw
            else:
                h, w = tex.shape[0], tex.shape[1]
                (ya, xa, yb, xb, yc, xc, yd, xd, wa, wb, wc, wd) = _latlong_stencil(
                    h, w, rec_ndir[k, 0], rec_ndir[k, 1], rec_ndir[k, 2])
                for q in range(4):
                    if q == 0:
                        ti = ya * w + xa; tw = wa
                    elif q == 1:
                        ti = yb * w + xb; tw = wb
                    elif q == 2:
                        ti = yc * w + xc; tw = wc
                    else:
                        ti = yd * w + xd; tw = wd
                    d_env_rad[ti, 0] += ar * sr * tw
                    d_env_rad[ti, 1] += ag * sg * tw
                    d_env_rad[ti, 2] += ab * sb * tw

        if (rec_nv[k] == 1 and want_env_r and env_type == ENV_SPHERE
                and rec_ndist[k] < np.inf):
            # finite differences over the sampled light triangle's r values,
            # with the point fixed in barycentric coordinates and pdf/MIS
            # weights detached
            lf = rec_nef[k]
            px = rec_hit[k, 0]; py = rec_hit[k, 1]; pz = rec_hit[k, 2]
            dist0 = rec_ndist[k]
            cos_e0 = -(e_fn[lf, 0] * rec_ndir[k, 0] + e_fn[lf, 1] * rec_ndir[k, 1]
                       + e_fn[lf, 2] * rec_ndir[k, 2])
            if abs(cos_e0) > 1e-9:
                pl0 = rec_npw[k, 0]
                vy = np.empty((3, 3))
                for j in range(3):
                    vi = e_faces[lf, j]
                    vy[j, 0] = e_verts[vi, 0]
                    vy[j, 1] = e_verts[vi, 1]
                    vy[j, 2] = e_verts[vi, 2]
                ex0 = vy[1, 0] - vy[0, 0]; ey0 = vy[1, 1] - vy[0, 1]; ez0 = vy[1, 2] - vy[0, 2]
                fx0 = vy[2, 0] - vy[0, 0]; fy0 = vy[2, 1] - vy[0, 1]; fz0 = vy[2, 2] - vy[0, 2]
                cxx = ey0 * fz0 - ez0 * fy0
                cyy = ez0 * fx0 - ex0 * fz0
                czz = ex0 * fy0 - ey0 * fx0
                area2_0 = np.sqrt(cxx * cxx + cyy * cyy + czz * czz)
                if area2_0 < 1e-300:
                    continue
                for j in range(3):
                    vi = e_faces[lf, j]
                    acc = 0.0
                    for sgn in range(2):
                        h_r = fd_h_r if sgn == 0 else -fd_h_r
                        rv = e_r[vi] + h_r
                        inv = e_scale / rv
                        wjx = e_unit[vi, 0] * inv + e_cx
                        wjy = e_unit[vi, 1] * inv + e_cy
                        wjz = e_unit[vi, 2] * inv + e_cz
                        # perturbed triangle: vertex j moved, others fixed
                        ax_ = wjx if j == 0 else vy[0, 0]
                        ay_ = wjy if j == 0 else vy[0, 1]
                        az_ = wjz if j == 0 else vy[0, 2]
                        bx_ = wjx if j == 1 else vy[1, 0]
                        by_ = wjy if j == 1 else vy[1, 1]
                        bz_ = wjz if j == 1 else vy[1, 2]
                        cx_ = wjx if j == 2 else vy[2, 0]
                        cy_ = wjy if j == 2 else vy[2, 1]
                        cz_ = wjz if j == 2 else vy[2, 2]
                        yx = rec_neb[k, 0] * ax_ + rec_neb[k, 1] * bx_ + rec_neb[k, 2] * cx_
                        yy = rec_neb[k, 0] * ay_ + rec_neb[k, 1] * by_ + rec_neb[k, 2] * cy_
                        yz = rec_neb[k, 0] * az_ + rec_neb[k, 1] * bz_ + rec_neb[k, 2] * cz_
                        dxl = yx - px; dyl = yy - py; dzl = yz - pz
                        dist = np.sqrt(dxl * dxl + dyl * dyl + dzl * dzl)
                        val = 0.0
                        if dist > 1e-12:
                            dxl /= dist; dyl /= dist; dzl /= dist
                            # perturbed emitter plane normal
                            e1x = bx_ - ax_; e1y = by_ - ay_; e1z = bz_ - az_
                            e2x = cx_ - ax_; e2y = cy_ - ay_; e2z = cz_ - az_
                            fnx = e1y * e2z - e1z * e2y
                            fny = e1z * e2x - e1x * e2z
                            fnz = e1x * e2y - e1y * e2x
                            fl = np.sqrt(fnx * fnx + fny * fny + fnz * fnz)
                            if fl > 1e-300:
                                fnx /= fl; fny /= fl; fnz /= fl
                                cos_e = abs(fnx * dxl + fny * dyl + fnz * dzl)
                                # solid-angle pdf of the moved sample: the
                                # face-selection probability stays detached,
                                # the area Jacobian and geometry move with it
                                pl = (pl0 * (abs(cos_e0) * area2_0
                                             / (dist0 * dist0))
                                      / (cos_e * fl / (dist * dist)))
                                cosl = nx * dxl + ny * dyl + nz * dzl
                                if cosl > 0.0 and pl > 0.0:
                                    fr_, fg_, fb_ = eval_core(
                                        m0, m1, m2, m3, m4, m5, m6,
                                        dxl, dyl, dzl, wox, woy, woz, nx, ny, nz)
                                    pb = pdf_core(
                                        m0, m1, m2, m3, m4, m5, m6,
                                        wox, woy, woz, dxl, dyl, dzl,
                                        nx, ny, nz)
                                    pl_w = _smooth_light_pdf(
                                        rec_nLe[k, 0], rec_nLe[k, 1],
                                        rec_nLe[k, 2], env[13],
                                        yx, yy, yz, dxl, dyl, dzl, dist)
                                    if pl_w < 0.0:
                                        w = 1.0  # diverging proxy: weight -> 1
                                    else:
                                        w = pl_w * pl_w / (pl_w * pl_w
                                                           + pb * pb)
                                    val = (ar * tr * fr_ * rec_nLe[k, 0]
                                           + ag * tg * fg_ * rec_nLe[k, 1]
                                           + ab * tb * fb_ * rec_nLe[k, 2]
                                           ) * cosl * w / pl
                        if sgn == 0:
                            acc = val
                        else:
                            d_env_r[vi] += (acc - val) / (2.0 * fd_h_r)

    # first-vertex position gradients by local central differences
    if want_verts:
        f0 = rec_face[0]
        i0 = o_faces[f0, 0]; i1 = o_faces[f0, 1]; i2 = o_faces[f0, 2]
        o_verts = obj[7]
        nee_valid = rec_nv[0] == 1
        nee_inf = rec_ndist[0] == np.inf
        yx = rec_hit[0, 0] + rec_ndist[0] * rec_ndir[0, 0] if (nee_valid and not nee_inf) else 0.0
        yy = rec_hit[0, 1] + rec_ndist[0] * rec_ndir[0, 1] if (nee_valid and not nee_inf) else 0.0
        yz = rec_hit[0, 2] + rec_ndist[0] * rec_ndir[0, 2] if (nee_valid and not nee_inf) else 0.0
        e_fnx = e_fny = e_fnz = 0.0
        pdfA0 = 0.0
        if nee_valid and not nee_inf:
            lf = rec_nef[0]
            e_fnx = e_fn[lf, 0]; e_fny = e_fn[lf, 1]; e_fnz = e_fn[lf, 2]
            cos_e0 = abs(e_fnx * rec_ndir[0, 0] + e_fny * rec_ndir[0, 1]
                         + e_fnz * rec_ndir[0, 2])
            if cos_e0 < 1e-9:
                nee_valid = False
            else:
                # recover the light sample's area pdf from the recorded
                # solid-angle pdf; it is invariant under surface motion
                pdfA0 = (rec_npw[0, 0] * cos_e0
                         / (rec_ndist[0] * rec_ndist[0]))
        elif nee_valid:
            pdfA0 = rec_npw[0, 0]
        le_r = rec_nLe[0, 0]
        le_g = rec_nLe[0, 1]
        le_b = rec_nLe[0, 2]
        cont_on = rec_cpr[0, 0] > 0.0 and (lam[0, 0] != 0.0 or lam[0, 1] != 0.0
                                           or lam[0, 2] != 0.0)
        cont_rr = rec_cpr[0, 1]
        end_track = (cont_on and nb == 1 and end_type == END_SPHERE_EMITTER)
        end_mis = end_track and use_nee
        end_tri = np.zeros((3, 3))
        end_le = np.zeros((3, 3))
        if end_track:
            for j in range(3):
                evi = e_faces[end_face, j]
                for c in range(3):
                    end_tri[j, c] = e_verts[evi, c]
                    end_le[j, c] = env[10][evi, c]
        if nee_valid or cont_on:
            wox = rec_wo[0, 0]; woy = rec_wo[0, 1]; woz = rec_wo[0, 2]
            vx = np.empty(3); vyv = np.empty(3); vz = np.empty(3)
            for j in range(3):
                vi = o_faces[f0, j]
                vx[j] = o_verts[vi, 0]
                vyv[j] = o_verts[vi, 1]
                vz[j] = o_verts[vi, 2]
            # near-grazing primary hits slide along the ray as 1/cos under a
            # vertex perturbation, an integrable singularity at the limb
            # whose samples have unbounded magnitude; drop that thin sliver
            # (its mass is tiny) to keep the estimator's tails in check
            ge1x = vx[1] - vx[0]; ge1y = vyv[1] - vyv[0]; ge1z = vz[1] - vz[0]
            ge2x = vx[2] - vx[0]; ge2y = vyv[2] - vyv[0]; ge2z = vz[2] - vz[0]
            gnx = ge1y * ge2z - ge1z * ge2y
            gny = ge1z * ge2x - ge1x * ge2z
            gnz = ge1x * ge2y - ge1y * ge2x
            gnl = np.sqrt(gnx * gnx + gny * gny + gnz * gnz)
            graze = abs(gnx * wox + gny * woy + gnz * woz) / max(gnl, 1e-300)
            if graze < GRAZE_MIN:
                return
            for j in range(3):
                vi = i0 if j == 0 else (i1 if j == 1 else i2)
                for axis in range(3):
                    diff = np.empty(2)
                    ok_both = True
                    for sgn in range(2):
                        h_ = fd_h_vert if sgn == 0 else -fd_h_vert
                        p0x = vx[0]; p0y = vyv[0]; p0z = vz[0]
                        p1x = vx[1]; p1y = vyv[1]; p1z = vz[1]
                        p2x = vx[2]; p2y = vyv[2]; p2z = vz[2]
                        if j == 0:
                            if axis == 0:
                                p0x += h_
                            elif axis == 1:
                                p0y += h_
                            else:
                                p0z += h_
                        elif j == 1:
                            if axis == 0:
                                p1x += h_
                            elif axis == 1:
                                p1y += h_
                            else:
                                p1z += h_
                        else:
                            if axis == 0:
                                p2x += h_
                            elif axis == 1:
                                p2y += h_
                            else:
                                p2z += h_
                        ok, bb0, bb1, bb2 = _plane_hit_affine(
                            p0x, p0y, p0z, p1x, p1y, p1z, p2x, p2y, p2z,
                            cam_ox, cam_oy, cam_oz, dir0x, dir0y, dir0z)
                        if not ok:
                            ok_both = False
                            break
                        cr_, cg_, cb_, okv = _first_hit_terms(
                            bb0, bb1, bb2,
                            p0x, p0y, p0z, p1x, p1y, p1z, p2x, p2y, p2z,
                            obj, f0, wox, woy, woz, nee_valid, yx, yy, yz,
                            nee_inf, rec_ndir[0, 0], rec_ndir[0, 1],
                            rec_ndir[0, 2], le_r, le_g, le_b, pdfA0,
                            e_fnx, e_fny, e_fnz,
                            cont_on, rec_wi[0, 0], rec_wi[0, 1],
                            rec_wi[0, 2], rec_cpr[0, 0], cont_rr,
                            lam[0, 0], lam[0, 1], lam[0, 2],
                            False, end_track, end_tri, end_le, end_w,
                            end_mis, env[13])
                        if not okv:
                            ok_both = False
                            break
                        diff[sgn] = ar * cr_ + ag * cg_ + ab * cb_
                    if ok_both:
                        d_vpos[vi, axis] += (diff[0] - diff[1]) / (2.0 * fd_h_vert)


# ---------------------------------------------------------------------------
# camera helpers
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _screen_ray(cam_o, cam_rot, width, height, tan_half, px, py):
    """World ray through continuous screen coordinates (px in [0, W])."""
    aspect = width / height
    sx = (2.0 * px / width - 1.0) * tan_half * aspect
    sy = (1.0 - 2.0 * py / height) * tan_half
    dx = cam_rot[0, 0] * sx + cam_rot[0, 1] * sy - cam_rot[0, 2]
    dy = cam_rot[1, 0] * sx + cam_rot[1, 1] * sy - cam_rot[1, 2]
    dz = cam_rot[2, 0] * sx + cam_rot[2, 1] * sy - cam_rot[2, 2]
    l = np.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / l, dy / l, dz / l


@njit(cache=True, inline="always")
def _project_point(cam_o, cam_rot, width, height, tan_half, X, Y, Z):
    """World point to continuous screen coordinates; ok=False behind camera."""
    rx = X - cam_o[0]
    ry = Y - cam_o[1]
    rz = Z - cam_o[2]
    # camera-from-world = transpose of the world-from-camera rotation
    qx = cam_rot[0, 0] * rx + cam_rot[1, 0] * ry + cam_rot[2, 0] * rz
    qy = cam_rot[0, 1] * rx + cam_rot[1, 1] * ry + cam_rot[2, 1] * rz
    qz = cam_rot[0, 2] * rx + cam_rot[1, 2] * ry + cam_rot[2, 2] * rz
    zbar = -qz
    if zbar < 1e-9:
        return 0.0, 0.0, False
    aspect = width / height
    px = 0.5 * width * (1.0 + qx / (zbar * tan_half * aspect))
    py = 0.5 * height * (1.0 - qy / (zbar * tan_half))
    return px, py, True


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def forward_kernel(obj, env_type, env, inf_env, cam_o, cam_rot, tan_half,
                   width, height, spp, seed, pass_id, max_depth, rr_start,
                   ray_eps, rough_escalate, use_nee, img, row_counts):
    """Forward render; parallel over rows, per-pixel accumulation order is
    fixed so the result is independent of thread count."""
    for row in prange(height):
        rec = (
            np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 2)),
            np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros((MAXB, 3)),
            np.zeros((MAXB, 7)), np.zeros(MAXB, dtype=np.uint8),
            np.zeros((MAXB, 3)), np.zeros(MAXB, dtype=np.uint8),
            np.zeros((MAXB, 3)), np.zeros(MAXB), np.zeros((MAXB, 3)),
            np.zeros((MAXB, 2)), np.zeros(MAXB), np.zeros((MAXB, 3)),
            np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 3)),
            np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros(MAXB),
            np.zeros((MAXB, 2)), np.zeros((MAXB, 3)),
        )
        n_nonfinite = 0
        n_miss = 0
        for col in range(width):
            pixel = row * width + col
            accr = 0.0
            accg = 0.0
            accb = 0.0
            for s in range(spp):
                u0 = rand_ld(seed, pixel, s, 0, P_PIXEL_JITTER, 0, 2)
                u1 = rand_ld(seed, pixel, s, 0, P_PIXEL_JITTER, 1, 3)
                dx, dy, dz = _screen_ray(cam_o, cam_rot, width, height,
                                         tan_half, col + u0, row + u1)
                out = trace_record(cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                                   obj, env_type, env, inf_env,
                                   seed, pixel, s, max_depth, rr_start,
                                   ray_eps, pass_id, rough_escalate, use_nee,
                                   rec)
                lr, lg, lb = out[0], out[1], out[2]
                if np.isfinite(lr) and np.isfinite(lg) and np.isfinite(lb):
                    accr += lr
                    accg += lg
                    accb += lb
                else:
                    n_nonfinite += 1
                if out[4] == END_MISS:
                    n_miss += 1
            img[row, col, 0] = accr / spp
            img[row, col, 1] = accg / spp
            img[row, col, 2] = accb / spp
        row_counts[row, 0] = n_nonfinite
        row_counts[row, 1] = n_miss


@njit(cache=True)
def grad_kernel(obj, env_type, env, inf_env, cam_o, cam_rot, tan_half,
                width, height, spp, seed, pass_id, max_depth, rr_start,
                ray_eps, rough_escalate, use_nee,
                adjoint, want_mat, want_env_rad, want_env_r, want_verts,
                e_unit, e_r, e_scale, e_cx, e_cy, e_cz, fd_h_vert, fd_h_r,
                d_mat, d_env_rad, d_env_r, d_vpos, img, row_counts):
    """Replay the forward sampling decisions serially and scatter gradients.

    ``adjoint`` is d loss / d pixel; each sample contributes with weight
    adjoint / spp. The replayed image is written to ``img`` and matches the
    forward render bitwise."""
    rec = (
        np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 2)),
        np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 7)), np.zeros(MAXB, dtype=np.uint8),
        np.zeros((MAXB, 3)), np.zeros(MAXB, dtype=np.uint8),
        np.zeros((MAXB, 3)), np.zeros(MAXB), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 2)), np.zeros(MAXB), np.zeros((MAXB, 3)),
        np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros(MAXB),
        np.zeros((MAXB, 2)), np.zeros((MAXB, 3)),
    )
    lam = np.zeros((MAXB, 3))
    inv_spp = 1.0 / spp
    for row in range(height):
        for col in range(width):
            pixel = row * width + col
            accr = 0.0
            accg = 0.0
            accb = 0.0
            ar = adjoint[row, col, 0] * inv_spp
            ag = adjoint[row, col, 1] * inv_spp
            ab = adjoint[row, col, 2] * inv_spp
            for s in range(spp):
                u0 = rand_ld(seed, pixel, s, 0, P_PIXEL_JITTER, 0, 2)
                u1 = rand_ld(seed, pixel, s, 0, P_PIXEL_JITTER, 1, 3)
                dx, dy, dz = _screen_ray(cam_o, cam_rot, width, height,
                                         tan_half, col + u0, row + u1)
                out = trace_record(cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                                   obj, env_type, env, inf_env,
                                   seed, pixel, s, max_depth, rr_start,
                                   ray_eps, pass_id, rough_escalate, use_nee,
                                   rec)
                lr, lg, lb = out[0], out[1], out[2]
                if np.isfinite(lr) and np.isfinite(lg) and np.isfinite(lb):
                    accr += lr
                    accg += lg
                    accb += lb
                else:
                    row_counts[row, 0] += 1
                    continue
                if out[4] == END_MISS:
                    row_counts[row, 1] += 1
                accumulate_gradients(
                    rec, out[3], out[4], out[5], out[6], out[7], out[8],
                    out[9], out[10], out[11], out[12], out[13], out[14],
                    out[15], out[16], out[17], out[18],
                    ar, ag, ab,
                    want_mat, want_env_rad, want_env_r, want_verts, use_nee,
                    obj, env_type, env, inf_env,
                    e_unit, e_r, e_scale, e_cx, e_cy, e_cz,
                    fd_h_vert, fd_h_r,
                    cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                    d_mat, d_env_rad, d_env_r, d_vpos, lam)
            img[row, col, 0] = accr * inv_spp
            img[row, col, 1] = accg * inv_spp
            img[row, col, 2] = accb * inv_spp


@njit(cache=True)
def boundary_kernel(edges, obj, env_type, env, inf_env, cam_o, cam_rot,
                    tan_half, width, height, adjoint, samples_per_edge,
                    delta_px, seed, pass_id, max_depth, rr_start, ray_eps,
                    rough_escalate, use_nee, d_vpos):
    """Silhouette boundary term: screen-space edge integral of the radiance
    jump times the edge's screen velocity under vertex motion.

    Rays on either side of the silhouette are offset ``delta_px`` pixels
    along the screen-space edge normal."""
    rec = (
        np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 2)),
        np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 7)), np.zeros(MAXB, dtype=np.uint8),
        np.zeros((MAXB, 3)), np.zeros(MAXB, dtype=np.uint8),
        np.zeros((MAXB, 3)), np.zeros(MAXB), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 2)), np.zeros(MAXB), np.zeros((MAXB, 3)),
        np.zeros(MAXB, dtype=np.int64), np.zeros((MAXB, 3)),
        np.zeros((MAXB, 3)), np.zeros((MAXB, 3)), np.zeros(MAXB),
        np.zeros((MAXB, 2)), np.zeros((MAXB, 3)),
    )
    o_verts = obj[7]
    n_pixels = width * height
    h_proj = 1e-6
    eps_tau = 1e-4
    for e in range(len(edges)):
        ia = edges[e, 0]
        ib = edges[e, 1]
        ax = o_verts[ia, 0]; ay = o_verts[ia, 1]; az = o_verts[ia, 2]
        bx = o_verts[ib, 0]; by = o_verts[ib, 1]; bz = o_verts[ib, 2]
        ex = bx - ax; ey = by - ay; ez = bz - az
        for s in range(samples_per_edge):
            tau = rand_u01(seed, n_pixels + e, s, 0, P_EDGE, 0)
            X = ax + tau * ex
            Y = ay + tau * ey
            Z = az + tau * ez
            px, py, ok = _project_point(cam_o, cam_rot, width, height,
                                        tan_half, X, Y, Z)
            if not ok:
                continue
            col = int(px)
            row = int(py)
            if col < 0 or col >= width or row < 0 or row >= height:
                continue
            # Keep only edge points that are actually visible: where the
            # discrete silhouette polyline backtracks on itself, the occluded
            # portions would otherwise measure the same radiance jump as the
            # visible envelope and double-count the boundary.
            cdx = X - cam_o[0]
            cdy = Y - cam_o[1]
            cdz = Z - cam_o[2]
            cdist = np.sqrt(cdx * cdx + cdy * cdy + cdz * cdz)
            if cdist < 1e-12:
                continue
            cdx /= cdist
            cdy /= cdist
            cdz /= cdist
            tocc, focc, occ1, occ2 = bvh_intersect(
                obj[0], obj[1], obj[2], obj[3], obj[4], obj[5], obj[6],
                obj[7], obj[8], cam_o[0], cam_o[1], cam_o[2],
                cdx, cdy, cdz, ray_eps, np.inf)
            if focc >= 0 and tocc < cdist * (1.0 - 1e-5):
                # a camera ray toward a silhouette edge runs almost parallel
                # to the adjacent front-facing triangle, so the ray-plane
                # intersection there is ill-conditioned and can report a
                # bogus hit; ignore hits on faces touching the edge itself
                o_faces = obj[8]
                f0 = o_faces[focc, 0]
                f1 = o_faces[focc, 1]
                f2 = o_faces[focc, 2]
                if not (f0 == ia or f1 == ia or f2 == ia
                        or f0 == ib or f1 == ib or f2 == ib):
                    continue
            # screen tangent d(screen)/d(tau) by a small step along the edge
            px2, py2, ok2 = _project_point(cam_o, cam_rot, width, height,
                                           tan_half, X + eps_tau * ex,
                                           Y + eps_tau * ey, Z + eps_tau * ez)
            if not ok2:
                continue
            tvx = (px2 - px) / eps_tau
            tvy = (py2 - py) / eps_tau
            tlen = np.sqrt(tvx * tvx + tvy * tvy)
            if tlen < 1e-12:
                continue
            npx = -tvy / tlen
            npy = tvx / tlen
            # radiance on both sides of the edge, probed at delta and
            # 4*delta and extrapolated to the contour as 2*L(d) - L(4d):
            # exact for L = a + b*sqrt(d), the profile shading takes when a
            # curved surface turns away at its silhouette (the probe cannot
            # sit at d -> 0, where interpolated normals face backwards)
            key = n_pixels + e
            jr = 0.0
            jg = 0.0
            jb = 0.0
            bad = False
            for side in range(2):
                sgn_ = -1.0 if side == 0 else 1.0
                for depth in range(2):
                    dd = delta_px if depth == 0 else 4.0 * delta_px
                    dxs, dys, dzs = _screen_ray(
                        cam_o, cam_rot, width, height, tan_half,
                        px + sgn_ * dd * npx, py + sgn_ * dd * npy)
                    ov = trace_record(cam_o[0], cam_o[1], cam_o[2],
                                      dxs, dys, dzs, obj, env_type, env,
                                      inf_env, seed, key, 4 * s + 2 * side
                                      + depth, max_depth, rr_start, ray_eps,
                                      pass_id, rough_escalate, use_nee, rec)
                    if not (np.isfinite(ov[0]) and np.isfinite(ov[1])
                            and np.isfinite(ov[2])):
                        bad = True
                        break
                    cw = (2.0 if depth == 0 else -1.0) * (1.0 - 2.0 * side)
                    jr += cw * ov[0]
                    jg += cw * ov[1]
                    jb += cw * ov[2]
                if bad:
                    break
            if bad:
                continue
            scal = (adjoint[row, col, 0] * jr + adjoint[row, col, 1] * jg
                    + adjoint[row, col, 2] * jb)
            if scal == 0.0:
                continue
            line_w = tlen / samples_per_edge
            for axis in range(3):
                hx_ = h_proj if axis == 0 else 0.0
                hy_ = h_proj if axis == 1 else 0.0
                hz_ = h_proj if axis == 2 else 0.0
                pxa, pya, oka = _project_point(cam_o, cam_rot, width, height,
                                               tan_half, X + hx_, Y + hy_, Z + hz_)
                pxb, pyb, okb = _project_point(cam_o, cam_rot, width, height,
                                               tan_half, X - hx_, Y - hy_, Z - hz_)
                if not (oka and okb):
                    continue
                jx = (pxa - pxb) / (2.0 * h_proj)
                jy = (pya - pyb) / (2.0 * h_proj)
                vdotn = jx * npx + jy * npy
                d_vpos[ia, axis] += scal * (1.0 - tau) * vdotn * line_w
                d_vpos[ib, axis] += scal * tau * vdotn * line_w
