"""Tile-parallel numba kernels for dual-channel splat compositing.

Every tile owns its output pixels and its slice of the per-entry gradient buffer,
so tiles never write to shared memory and results do not depend on thread count.
All math is float64.

Gradient row layout (per tile-list entry):
    0:3 center, 3:6 t_u, 6:9 t_v, 9 s_u, 10 s_v, 11:14 color,
    14 appearance opacity, 15 geometry opacity, 16:19 unit normal
"""
import numpy as np
from numba import njit, prange

N_GRAD = 19
T_EPS = 1e-4
KERNEL_CUTOFF = 9.0  # u^2 + v^2 <= 9
FILTER_INV_VAR = 4.0  # screen filter exp(-0.5 * 4 * d^2), 0.5 px std
FILTER_CUTOFF = 2.25  # (1.5 px)^2, the filter's own 3 sigma
PARALLEL_EPS = 1e-9


@njit(cache=True, inline="always")
def _hit(cc, tu, tv, nrm, su, sv, pc, p, dx, dy, x, y, near):
    """Ray (dx, dy, 1) against splat p. Returns (ok, t, u, v, G', use_screen, sign)."""
    nx, ny, nz = nrm[p, 0], nrm[p, 1], nrm[p, 2]
    denom = dx * nx + dy * ny + nz
    if denom * denom < PARALLEL_EPS * PARALLEL_EPS * (dx * dx + dy * dy + 1.0):
        return False, 0.0, 0.0, 0.0, 0.0, False, 1.0
    c0, c1, c2 = cc[p, 0], cc[p, 1], cc[p, 2]
    t = (c0 * nx + c1 * ny + c2 * nz) / denom
    if t <= near:
        return False, 0.0, 0.0, 0.0, 0.0, False, 1.0
    r0 = t * dx - c0
    r1 = t * dy - c1
    r2 = t - c2
    u = (r0 * tu[p, 0] + r1 * tu[p, 1] + r2 * tu[p, 2]) / su[p]
    v = (r0 * tv[p, 0] + r1 * tv[p, 1] + r2 * tv[p, 2]) / sv[p]
    q = u * u + v * v
    ex = pc[p, 0] - x
    ey = pc[p, 1] - y
    d2 = ex * ex + ey * ey
    if q > KERNEL_CUTOFF and d2 > FILTER_CUTOFF:
        return False, 0.0, 0.0, 0.0, 0.0, False, 1.0
    g = np.exp(-0.5 * q) if q <= KERNEL_CUTOFF else 0.0
    gs = np.exp(-0.5 * FILTER_INV_VAR * d2) if d2 <= FILTER_CUTOFF else 0.0
    sign = -1.0 if denom > 0.0 else 1.0
    if gs > g:
        return True, t, u, v, gs, True, sign
    return True, t, u, v, g, False, sign


@njit(cache=True, inline="always")
def _insertion_sort(keys_t, keys_p, order, n):
    for i in range(1, n):
        j = i
        while j > 0:
            a = order[j - 1]
            b = order[j]
            if keys_t[a] > keys_t[b] or (keys_t[a] == keys_t[b] and keys_p[a] > keys_p[b]):
                order[j - 1] = b
                order[j] = a
                j -= 1
            else:
                break


@njit(cache=True, parallel=True)
def forward(cc, tu, tv, nrm, su, sv, col, oa, og, fp, pc,
            fx, fy, cx, cy, width, height, tile, tiles_x,
            tile_start, tile_prims, bg, near,
            out_rgb, out_depth, out_normal, out_aa, out_ag, out_count):
    n_tiles = tile_start.shape[0] - 1
    for tid in prange(n_tiles):
        s0 = tile_start[tid]
        length = tile_start[tid + 1] - s0
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        hit_t = np.empty(length)
        hit_p = np.empty(length, dtype=np.int64)
        hit_g = np.empty(length)
        hit_s = np.empty(length)
        order = np.empty(length, dtype=np.int64)
        for i in range(ty * tile, min((ty + 1) * tile, height)):
            y = i + 0.5
            dy = (y - cy) / fy
            for j in range(tx * tile, min((tx + 1) * tile, width)):
                x = j + 0.5
                dx = (x - cx) / fx
                n = 0
                for k in range(length):
                    p = tile_prims[s0 + k]
                    if x < fp[p, 0] or x > fp[p, 1] or y < fp[p, 2] or y > fp[p, 3]:
                        continue
                    ok, t, u, v, g, scr, sign = _hit(cc, tu, tv, nrm, su, sv, pc, p, dx, dy,
                                                     x, y, near)
                    if ok:
                        hit_t[n] = t
                        hit_p[n] = p
                        hit_g[n] = g
                        hit_s[n] = sign
                        order[n] = n
                        n += 1
                _insertion_sort(hit_t, hit_p, order, n)
                ta = 1.0
                tg = 1.0
                done_a = False
                done_g = False
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                dep = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                wa = 0.0
                wg = 0.0
                cnt = 0
                for h in range(n):
                    o = order[h]
                    p = hit_p[o]
                    g = hit_g[o]
                    if not done_a:
                        a = oa[p] * g
                        if a > 0.0:
                            w = a * ta
                            r0 += col[p, 0] * w
                            r1 += col[p, 1] * w
                            r2 += col[p, 2] * w
                            wa += w
                            ta *= 1.0 - a
                            cnt += 1
                        if ta < T_EPS:
                            done_a = True
                    if not done_g:
                        a = og[p] * g
                        if a > 0.0:
                            w = a * tg
                            dep += hit_t[o] * w
                            sg = hit_s[o] * w
                            n0 += nrm[p, 0] * sg
                            n1 += nrm[p, 1] * sg
                            n2 += nrm[p, 2] * sg
                            wg += w
                            tg *= 1.0 - a
                        if tg < T_EPS:
                            done_g = True
                    if done_a and done_g:
                        break
                out_rgb[i, j, 0] = r0 + (1.0 - wa) * bg[0]
                out_rgb[i, j, 1] = r1 + (1.0 - wa) * bg[1]
                out_rgb[i, j, 2] = r2 + (1.0 - wa) * bg[2]
                out_depth[i, j] = dep
                out_normal[i, j, 0] = n0
                out_normal[i, j, 1] = n1
                out_normal[i, j, 2] = n2
                out_aa[i, j] = wa
                out_ag[i, j] = wg
                out_count[i, j] = cnt


@njit(cache=True, parallel=True)
def backward(cc, tu, tv, nrm, su, sv, col, oa, og, fp, pc,
             fx, fy, cx, cy, width, height, tile, tiles_x,
             tile_start, tile_prims, bg, near,
             g_rgb, g_depth, g_normal, g_aa, g_ag, out_grad):
    n_tiles = tile_start.shape[0] - 1
    for tid in prange(n_tiles):
        s0 = tile_start[tid]
        length = tile_start[tid + 1] - s0
        ty = tid // tiles_x
        tx = tid - ty * tiles_x
        hit_t = np.empty(length)
        hit_p = np.empty(length, dtype=np.int64)
        hit_k = np.empty(length, dtype=np.int64)
        hit_g = np.empty(length)
        hit_s = np.empty(length)
        hit_u = np.empty(length)
        hit_v = np.empty(length)
        hit_scr = np.empty(length, dtype=np.bool_)
        ta_before = np.empty(length)
        tg_before = np.empty(length)
        order = np.empty(length, dtype=np.int64)
        for i in range(ty * tile, min((ty + 1) * tile, height)):
            y = i + 0.5
            dy = (y - cy) / fy
            for j in range(tx * tile, min((tx + 1) * tile, width)):
                x = j + 0.5
                dx = (x - cx) / fx
                n = 0
                for k in range(length):
                    p = tile_prims[s0 + k]
                    if x < fp[p, 0] or x > fp[p, 1] or y < fp[p, 2] or y > fp[p, 3]:
                        continue
                    ok, t, u, v, g, scr, sign = _hit(cc, tu, tv, nrm, su, sv, pc, p, dx, dy,
                                                     x, y, near)
                    if ok:
                        hit_t[n] = t
                        hit_p[n] = p
                        hit_k[n] = k
                        hit_g[n] = g
                        hit_s[n] = sign
                        hit_u[n] = u
                        hit_v[n] = v
                        hit_scr[n] = scr
                        order[n] = n
                        n += 1
                _insertion_sort(hit_t, hit_p, order, n)
                # forward replay: transmittance before each hit, termination index
                ta = 1.0
                tg = 1.0
                last_a = n - 1
                last_g = n - 1
                done_a = False
                done_g = False
                for h in range(n):
                    o = order[h]
                    p = hit_p[o]
                    g = hit_g[o]
                    ta_before[h] = ta
                    tg_before[h] = tg
                    if not done_a:
                        ta *= 1.0 - oa[p] * g
                        if ta < T_EPS:
                            done_a = True
                            last_a = h
                    if not done_g:
                        tg *= 1.0 - og[p] * g
                        if tg < T_EPS:
                            done_g = True
                            last_g = h
                    if done_a and done_g:
                        break
                gr0 = g_rgb[i, j, 0]
                gr1 = g_rgb[i, j, 1]
                gr2 = g_rgb[i, j, 2]
                gd = g_depth[i, j]
                gn0 = g_normal[i, j, 0]
                gn1 = g_normal[i, j, 1]
                gn2 = g_normal[i, j, 2]
                gwa = g_aa[i, j]
                gwg = g_ag[i, j]
                # suffix accumulators (content behind the current hit)
                sa0 = bg[0]
                sa1 = bg[1]
                sa2 = bg[2]
                ba = 0.0
                sd = 0.0
                sn0 = 0.0
                sn1 = 0.0
                sn2 = 0.0
                bgeo = 0.0
                top = max(last_a, last_g)
                for h in range(top, -1, -1):
                    o = order[h]
                    p = hit_p[o]
                    g = hit_g[o]
                    t = hit_t[o]
                    sign = hit_s[o]
                    row = s0 + hit_k[o]
                    galpha_a = 0.0
                    galpha_g = 0.0
                    gt = 0.0
                    if h <= last_a:
                        a = oa[p] * g
                        T = ta_before[h]
                        w = a * T
                        out_grad[row, 11] += gr0 * w
                        out_grad[row, 12] += gr1 * w
                        out_grad[row, 13] += gr2 * w
                        galpha_a = T * (gr0 * (col[p, 0] - sa0) + gr1 * (col[p, 1] - sa1)
                                        + gr2 * (col[p, 2] - sa2) + gwa * (1.0 - ba))
                        sa0 = a * col[p, 0] + (1.0 - a) * sa0
                        sa1 = a * col[p, 1] + (1.0 - a) * sa1
                        sa2 = a * col[p, 2] + (1.0 - a) * sa2
                        ba = a + (1.0 - a) * ba
                    if h <= last_g:
                        a = og[p] * g
                        T = tg_before[h]
                        w = a * T
                        nf0 = sign * nrm[p, 0]
                        nf1 = sign * nrm[p, 1]
                        nf2 = sign * nrm[p, 2]
                        gt = gd * w
                        out_grad[row, 16] += sign * gn0 * w
                        out_grad[row, 17] += sign * gn1 * w
                        out_grad[row, 18] += sign * gn2 * w
                        galpha_g = T * (gd * (t - sd) + gn0 * (nf0 - sn0) + gn1 * (nf1 - sn1)
                                        + gn2 * (nf2 - sn2) + gwg * (1.0 - bgeo))
                        sd = a * t + (1.0 - a) * sd
                        sn0 = a * nf0 + (1.0 - a) * sn0
                        sn1 = a * nf1 + (1.0 - a) * sn1
                        sn2 = a * nf2 + (1.0 - a) * sn2
                        bgeo = a + (1.0 - a) * bgeo
                    out_grad[row, 14] += g * galpha_a
                    out_grad[row, 15] += g * galpha_g
                    gG = oa[p] * galpha_a + og[p] * galpha_g
                    c0 = cc[p, 0]
                    c1 = cc[p, 1]
                    c2 = cc[p, 2]
                    nx = nrm[p, 0]
                    ny = nrm[p, 1]
                    nz = nrm[p, 2]
                    r0 = t * dx - c0
                    r1 = t * dy - c1
                    r2 = t - c2
                    if hit_scr[o]:
                        ex = pc[p, 0] - x
                        ey = pc[p, 1] - y
                        gd2 = gG * (-0.5 * FILTER_INV_VAR * g)
                        gpx = gd2 * 2.0 * ex
                        gpy = gd2 * 2.0 * ey
                        out_grad[row, 0] += gpx * fx / c2
                        out_grad[row, 1] += gpy * fy / c2
                        out_grad[row, 2] += -(gpx * fx * c0 + gpy * fy * c1) / (c2 * c2)
                    else:
                        u = hit_u[o]
                        v = hit_v[o]
                        gq = gG * (-0.5 * g)
                        gu = gq * 2.0 * u / su[p]
                        gv = gq * 2.0 * v / sv[p]
                        # gu, gv are dL/d(r . t_u), dL/d(r . t_v)
                        gr_0 = gu * tu[p, 0] + gv * tv[p, 0]
                        gr_1 = gu * tu[p, 1] + gv * tv[p, 1]
                        gr_2 = gu * tu[p, 2] + gv * tv[p, 2]
                        out_grad[row, 3] += gu * r0
                        out_grad[row, 4] += gu * r1
                        out_grad[row, 5] += gu * r2
                        out_grad[row, 6] += gv * r0
                        out_grad[row, 7] += gv * r1
                        out_grad[row, 8] += gv * r2
                        out_grad[row, 9] += -gu * u
                        out_grad[row, 10] += -gv * v
                        out_grad[row, 0] -= gr_0
                        out_grad[row, 1] -= gr_1
                        out_grad[row, 2] -= gr_2
                        gt += gr_0 * dx + gr_1 * dy + gr_2
                    if gt != 0.0:
                        denom = dx * nx + dy * ny + nz
                        f = gt / denom
                        out_grad[row, 0] += f * nx
                        out_grad[row, 1] += f * ny
                        out_grad[row, 2] += f * nz
                        out_grad[row, 16] -= f * r0
                        out_grad[row, 17] -= f * r1
                        out_grad[row, 18] -= f * r2
