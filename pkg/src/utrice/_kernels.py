"""Numba kernels: k-closest BVH traversal, compositing, analytic backward.

All hot paths are scalar float64 code compiled with cache=True. The
brute-force oracle in reference.py mirrors the arithmetic expression order
used here so that threshold classifications (response cutoff, depth
ordering) agree between the two paths.

Parallelism: rays are partitioned into `workers` contiguous blocks; each
block runs on its own prange lane with private scratch and gradient
buffers. For a fixed worker count the result is bit-deterministic because
the merge order is fixed.
"""

import numpy as np
from numba import njit, prange

from .constants import (ALPHA_MAX, PARALLEL_EPS, RATIO_EPS, RESPONSE_EPS,
                        T_MIN)

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2_0 = 1.0925484305920792
_SH_C2_1 = -1.0925484305920792
_SH_C2_2 = 0.31539156525252005
_SH_C2_3 = -1.0925484305920792
_SH_C2_4 = 0.5462742152960396
_SH_C3_0 = -0.5900435899266435
_SH_C3_1 = 2.890611442640554
_SH_C3_2 = -0.4570457994644658
_SH_C3_3 = 0.3731763325901154
_SH_C3_4 = -0.4570457994644658
_SH_C3_5 = 1.445305721320277
_SH_C3_6 = -0.5900435899266435

STACK_CAP = 160


@njit(cache=True, error_model="numpy")
def _sh_basis_into(dx, dy, dz, out):
    xx = dx * dx
    yy = dy * dy
    zz = dz * dz
    xy = dx * dy
    yz = dy * dz
    xz = dx * dz
    out[0] = _SH_C0
    out[1] = -_SH_C1 * dy
    out[2] = _SH_C1 * dz
    out[3] = -_SH_C1 * dx
    out[4] = _SH_C2_0 * xy
    out[5] = _SH_C2_1 * yz
    out[6] = _SH_C2_2 * (2.0 * zz - xx - yy)
    out[7] = _SH_C2_3 * xz
    out[8] = _SH_C2_4 * (xx - yy)
    out[9] = _SH_C3_0 * dy * (3.0 * xx - yy)
    out[10] = _SH_C3_1 * xy * dz
    out[11] = _SH_C3_2 * dy * (4.0 * zz - xx - yy)
    out[12] = _SH_C3_3 * dz * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = _SH_C3_4 * dx * (4.0 * zz - xx - yy)
    out[14] = _SH_C3_5 * dz * (xx - yy)
    out[15] = _SH_C3_6 * dx * (xx - 3.0 * yy)


@njit(cache=True, error_model="numpy")
def _slab(bmin, bmax, node, ox, oy, oz, dx, dy, dz):
    """Ray/AABB overlap interval; returns (enter, exit), exit < enter on miss."""
    enter = -np.inf
    exit_ = np.inf
    if dx > 1e-300 or dx < -1e-300:
        inv = 1.0 / dx
        t0 = (bmin[node, 0] - ox) * inv
        t1 = (bmax[node, 0] - ox) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > enter:
            enter = t0
        if t1 < exit_:
            exit_ = t1
    elif ox < bmin[node, 0] or ox > bmax[node, 0]:
        return 1.0, -1.0
    if dy > 1e-300 or dy < -1e-300:
        inv = 1.0 / dy
        t0 = (bmin[node, 1] - oy) * inv
        t1 = (bmax[node, 1] - oy) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > enter:
            enter = t0
        if t1 < exit_:
            exit_ = t1
    elif oy < bmin[node, 1] or oy > bmax[node, 1]:
        return 1.0, -1.0
    if dz > 1e-300 or dz < -1e-300:
        inv = 1.0 / dz
        t0 = (bmin[node, 2] - oz) * inv
        t1 = (bmax[node, 2] - oz) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > enter:
            enter = t0
        if t1 < exit_:
            exit_ = t1
    elif oz < bmin[node, 2] or oz > bmax[node, 2]:
        return 1.0, -1.0
    return enter, exit_


@njit(cache=True, error_model="numpy")
def _gather_k(node_min, node_max, node_left, node_right, leaf_start,
              leaf_count, prim_order, edge_n, edge_d, phi_s, sigma, face_n,
              plane_d, ox, oy, oz, dx, dy, dz, last_t, last_id, k,
              t_buf, id_buf, rho_buf, stack, stack_t):
    """Collect the k nearest acceptable hits strictly after (last_t, last_id).

    A hit is acceptable when t > T_MIN, (t, id) > (last_t, last_id) in
    lexicographic order, and the window response exceeds RESPONSE_EPS.
    Buffers come back sorted ascending by (t, id).
    """
    nhits = 0
    low = last_t if last_t > T_MIN else T_MIN

    enter, exit_ = _slab(node_min, node_max, 0, ox, oy, oz, dx, dy, dz)
    if exit_ < enter or exit_ < low:
        return 0
    stack[0] = 0
    stack_t[0] = enter
    top = 1

    while top > 0:
        top -= 1
        node = stack[top]
        tent = stack_t[top]
        if nhits == k and tent > t_buf[k - 1]:
            continue
        if node_left[node] < 0:
            s = leaf_start[node]
            e = s + leaf_count[node]
            for p in range(s, e):
                q = prim_order[p]
                denom = face_n[q, 0] * dx + face_n[q, 1] * dy + face_n[q, 2] * dz
                if -PARALLEL_EPS < denom < PARALLEL_EPS:
                    continue
                t = (plane_d[q] - (face_n[q, 0] * ox + face_n[q, 1] * oy
                                   + face_n[q, 2] * oz)) / denom
                if t <= T_MIN:
                    continue
                if t < last_t or (t == last_t and q <= last_id):
                    continue
                if nhits == k:
                    wt = t_buf[k - 1]
                    if t > wt or (t == wt and q > id_buf[k - 1]):
                        continue
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                l0 = edge_n[q, 0, 0] * px + edge_n[q, 0, 1] * py + edge_n[q, 0, 2] * pz + edge_d[q, 0]
                l1 = edge_n[q, 1, 0] * px + edge_n[q, 1, 1] * py + edge_n[q, 1, 2] * pz + edge_d[q, 1]
                l2 = edge_n[q, 2, 0] * px + edge_n[q, 2, 1] * py + edge_n[q, 2, 2] * pz + edge_d[q, 2]
                phi = l0
                if l1 > phi:
                    phi = l1
                if l2 > phi:
                    phi = l2
                ratio = phi / phi_s[q]
                if ratio <= 0.0:
                    continue
                rho = ratio ** sigma[q]
                if rho <= RESPONSE_EPS:
                    continue
                # insertion into the sorted buffer
                if nhits < k:
                    pos = nhits
                    nhits += 1
                else:
                    pos = k - 1
                j = pos
                while j > 0 and (t_buf[j - 1] > t
                                 or (t_buf[j - 1] == t and id_buf[j - 1] > q)):
                    t_buf[j] = t_buf[j - 1]
                    id_buf[j] = id_buf[j - 1]
                    rho_buf[j] = rho_buf[j - 1]
                    j -= 1
                t_buf[j] = t
                id_buf[j] = q
                rho_buf[j] = rho
        else:
            left = node_left[node]
            right = node_right[node]
            el, xl = _slab(node_min, node_max, left, ox, oy, oz, dx, dy, dz)
            er, xr = _slab(node_min, node_max, right, ox, oy, oz, dx, dy, dz)
            okl = xl >= el and xl >= low and not (nhits == k and el > t_buf[k - 1])
            okr = xr >= er and xr >= low and not (nhits == k and er > t_buf[k - 1])
            if okl and okr:
                if el <= er:  # push far first so near pops first
                    stack[top] = right
                    stack_t[top] = er
                    top += 1
                    stack[top] = left
                    stack_t[top] = el
                    top += 1
                else:
                    stack[top] = left
                    stack_t[top] = el
                    top += 1
                    stack[top] = right
                    stack_t[top] = er
                    top += 1
            elif okl:
                stack[top] = left
                stack_t[top] = el
                top += 1
            elif okr:
                stack[top] = right
                stack_t[top] = er
                top += 1
    return nhits


@njit(cache=True, error_model="numpy")
def gather_k_entry(node_min, node_max, node_left, node_right, leaf_start,
                   leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                   face_n, plane_d, ox, oy, oz, dx, dy, dz,
                   t_start, k):
    """One k-closest batch with hits strictly after t_start (any id)."""
    t_buf = np.empty(k, np.float64)
    id_buf = np.empty(k, np.int64)
    rho_buf = np.empty(k, np.float64)
    stack = np.empty(STACK_CAP, np.int64)
    stack_t = np.empty(STACK_CAP, np.float64)
    # last_id at the integer maximum rejects ties at exactly t_start
    nh = _gather_k(node_min, node_max, node_left, node_right, leaf_start,
                   leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                   face_n, plane_d, ox, oy, oz, dx, dy, dz,
                   t_start, np.int64(2 ** 62), k,
                   t_buf, id_buf, rho_buf, stack, stack_t)
    return nh, t_buf, id_buf, rho_buf


@njit(cache=True, error_model="numpy")
def _forward_one(node_min, node_max, node_left, node_right, leaf_start,
                 leaf_count, prim_order, edge_n, edge_d, phi_s, sigma, face_n,
                 plane_d, opacity, sh,
                 r, ox, oy, oz, dx, dy, dz, t_max, k, t_term,
                 out_rgb, out_depth, out_norm, out_t,
                 stat_omega, stat_hit, do_stats,
                 rec_tri, rec_t, rec_alpha, rec_rho, rec_count, rec_flow,
                 do_record, basis, t_buf, id_buf, rho_buf, stack, stack_t):
    _sh_basis_into(dx, dy, dz, basis)
    tr = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    dep = 0.0
    n0 = 0.0
    n1 = 0.0
    n2 = 0.0
    last_t = 0.0
    last_id = np.int64(-1)
    nrec = 0
    while True:
        nh = _gather_k(node_min, node_max, node_left, node_right, leaf_start,
                       leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                       face_n, plane_d, ox, oy, oz, dx, dy, dz,
                       last_t, last_id, k, t_buf, id_buf, rho_buf,
                       stack, stack_t)
        stop = nh < k
        for j in range(nh):
            t = t_buf[j]
            if t >= t_max:
                stop = True
                break
            q = id_buf[j]
            rho = rho_buf[j]
            o = opacity[q]
            alpha = o * rho
            if alpha > ALPHA_MAX:
                alpha = ALPHA_MAX
            raw0 = 0.5
            raw1 = 0.5
            raw2 = 0.5
            for b in range(16):
                raw0 += sh[q, 0, b] * basis[b]
                raw1 += sh[q, 1, b] * basis[b]
                raw2 += sh[q, 2, b] * basis[b]
            col0 = min(max(raw0, 0.0), 1.0)
            col1 = min(max(raw1, 0.0), 1.0)
            col2 = min(max(raw2, 0.0), 1.0)
            w = tr * alpha
            c0 += w * col0
            c1 += w * col1
            c2 += w * col2
            dep += w * t
            fdot = face_n[q, 0] * dx + face_n[q, 1] * dy + face_n[q, 2] * dz
            sflip = -1.0 if fdot > 0.0 else 1.0
            n0 += w * sflip * face_n[q, 0]
            n1 += w * sflip * face_n[q, 1]
            n2 += w * sflip * face_n[q, 2]
            if do_stats:
                om = tr * o * rho
                if om > stat_omega[q]:
                    stat_omega[q] = om
                stat_hit[q] = 1
            if do_record:
                if nrec < rec_tri.shape[1]:
                    rec_tri[r, nrec] = q
                    rec_t[r, nrec] = t
                    rec_alpha[r, nrec] = alpha
                    rec_rho[r, nrec] = rho
                    nrec += 1
                else:
                    rec_flow[r] = 1
            tr *= 1.0 - alpha
            last_t = t
            last_id = q
            if tr < t_term:
                stop = True
                break
        if stop:
            break
    out_rgb[r, 0] = c0
    out_rgb[r, 1] = c1
    out_rgb[r, 2] = c2
    out_depth[r] = dep
    out_norm[r, 0] = n0
    out_norm[r, 1] = n1
    out_norm[r, 2] = n2
    out_t[r] = tr
    if do_record:
        rec_count[r] = nrec


@njit(cache=True, parallel=True, error_model="numpy")
def render_forward(node_min, node_max, node_left, node_right, leaf_start,
                   leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                   face_n, plane_d, opacity, sh,
                   ro, rd, t_max, k, t_term, workers,
                   out_rgb, out_depth, out_norm, out_t,
                   stat_omega, stat_hit, do_stats,
                   rec_tri, rec_t, rec_alpha, rec_rho, rec_count, rec_flow,
                   do_record):
    n_rays = ro.shape[0]
    for wkr in prange(workers):
        lo = n_rays * wkr // workers
        hi = n_rays * (wkr + 1) // workers
        basis = np.empty(16, np.float64)
        t_buf = np.empty(k, np.float64)
        id_buf = np.empty(k, np.int64)
        rho_buf = np.empty(k, np.float64)
        stack = np.empty(STACK_CAP, np.int64)
        stack_t = np.empty(STACK_CAP, np.float64)
        so = stat_omega[wkr]
        sth = stat_hit[wkr]
        for r in range(lo, hi):
            _forward_one(node_min, node_max, node_left, node_right,
                         leaf_start, leaf_count, prim_order, edge_n, edge_d,
                         phi_s, sigma, face_n, plane_d, opacity, sh, r,
                         ro[r, 0], ro[r, 1], ro[r, 2],
                         rd[r, 0], rd[r, 1], rd[r, 2],
                         t_max[r], k, t_term,
                         out_rgb, out_depth, out_norm, out_t,
                         so, sth, do_stats,
                         rec_tri, rec_t, rec_alpha, rec_rho, rec_count,
                         rec_flow, do_record,
                         basis, t_buf, id_buf, rho_buf, stack, stack_t)


@njit(cache=True, error_model="numpy")
def _backward_one(node_min, node_max, node_left, node_right, leaf_start,
                  leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                  face_n, plane_d, opacity, sh, verts, tri_index,
                  r, ox, oy, oz, dx, dy, dz, t_max, k, t_term,
                  tot_rgb, tot_depth, tot_norm, tot_t,
                  dl_rgb, dl_depth, dl_norm, dl_t,
                  g_vert, g_sh, g_logit, g_sigma, drops,
                  basis, t_buf, id_buf, rho_buf, stack, stack_t, tgv):
    """Replay the forward hit order of one ray and accumulate parameter
    gradients. `tot_*` are this ray's forward outputs; suffix sums needed by
    the blending gradient come from totals minus a running prefix, which
    reproduces the forward accumulation bit-for-bit.
    """
    _sh_basis_into(dx, dy, dz, basis)
    tr = 1.0
    last_t = 0.0
    last_id = np.int64(-1)
    pc0 = 0.0
    pc1 = 0.0
    pc2 = 0.0
    pd = 0.0
    pn0 = 0.0
    pn1 = 0.0
    pn2 = 0.0
    dl0 = dl_rgb[r, 0]
    dl1 = dl_rgb[r, 1]
    dl2 = dl_rgb[r, 2]
    dld = dl_depth[r]
    dln0 = dl_norm[r, 0]
    dln1 = dl_norm[r, 1]
    dln2 = dl_norm[r, 2]
    dlt = dl_t[r]
    ndrop = 0
    while True:
        nh = _gather_k(node_min, node_max, node_left, node_right, leaf_start,
                       leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                       face_n, plane_d, ox, oy, oz, dx, dy, dz,
                       last_t, last_id, k, t_buf, id_buf, rho_buf,
                       stack, stack_t)
        stop = nh < k
        for j in range(nh):
            t = t_buf[j]
            if t >= t_max:
                stop = True
                break
            q = id_buf[j]
            rho = rho_buf[j]
            o = opacity[q]
            alpha_raw = o * rho
            clamped = alpha_raw > ALPHA_MAX
            alpha = ALPHA_MAX if clamped else alpha_raw
            raw0 = 0.5
            raw1 = 0.5
            raw2 = 0.5
            for b in range(16):
                raw0 += sh[q, 0, b] * basis[b]
                raw1 += sh[q, 1, b] * basis[b]
                raw2 += sh[q, 2, b] * basis[b]
            col0 = min(max(raw0, 0.0), 1.0)
            col1 = min(max(raw1, 0.0), 1.0)
            col2 = min(max(raw2, 0.0), 1.0)
            w = tr * alpha
            pc0 += w * col0
            pc1 += w * col1
            pc2 += w * col2
            pd += w * t
            fdot = face_n[q, 0] * dx + face_n[q, 1] * dy + face_n[q, 2] * dz
            sflip = -1.0 if fdot > 0.0 else 1.0
            fn0 = sflip * face_n[q, 0]
            fn1 = sflip * face_n[q, 1]
            fn2 = sflip * face_n[q, 2]
            pn0 += w * fn0
            pn1 += w * fn1
            pn2 += w * fn2
            gi = tri_index[q]

            # color -> SH coefficients (zero where the clamp is active)
            wc0 = dl0 * w if 0.0 < raw0 < 1.0 else 0.0
            wc1 = dl1 * w if 0.0 < raw1 < 1.0 else 0.0
            wc2 = dl2 * w if 0.0 < raw2 < 1.0 else 0.0
            if np.isfinite(wc0) and np.isfinite(wc1) and np.isfinite(wc2):
                for b in range(16):
                    g_sh[gi, 0, b] += wc0 * basis[b]
                    g_sh[gi, 1, b] += wc1 * basis[b]
                    g_sh[gi, 2, b] += wc2 * basis[b]
            else:
                ndrop += 1

            # blending gradient: dC/dalpha_i = T_i c_i - suffix_i / (1-alpha_i)
            inv1a = 1.0 / (1.0 - alpha)
            sc0 = tot_rgb[r, 0] - pc0
            sc1 = tot_rgb[r, 1] - pc1
            sc2 = tot_rgb[r, 2] - pc2
            sd = tot_depth[r] - pd
            sn0 = tot_norm[r, 0] - pn0
            sn1 = tot_norm[r, 1] - pn1
            sn2 = tot_norm[r, 2] - pn2
            # final transmittance: dT/dalpha_i = -T_final / (1 - alpha_i)
            dlda = (dl0 * (tr * col0 - sc0 * inv1a)
                    + dl1 * (tr * col1 - sc1 * inv1a)
                    + dl2 * (tr * col2 - sc2 * inv1a)
                    + dld * (tr * t - sd * inv1a)
                    + dln0 * (tr * fn0 - sn0 * inv1a)
                    + dln1 * (tr * fn1 - sn1 * inv1a)
                    + dln2 * (tr * fn2 - sn2 * inv1a)
                    - dlt * tot_t[r] * inv1a)

            if not clamped:
                # opacity logit through alpha = o * rho, o = sigmoid(logit)
                glog = dlda * rho * o * (1.0 - o)
                if np.isfinite(glog):
                    g_logit[gi] += glog
                else:
                    ndrop += 1

                # window response: vertices and smoothness
                dldrho = dlda * o
                px = ox + t * dx
                py = oy + t * dy
                pz = oz + t * dz
                l0 = edge_n[q, 0, 0] * px + edge_n[q, 0, 1] * py + edge_n[q, 0, 2] * pz + edge_d[q, 0]
                l1 = edge_n[q, 1, 0] * px + edge_n[q, 1, 1] * py + edge_n[q, 1, 2] * pz + edge_d[q, 1]
                l2 = edge_n[q, 2, 0] * px + edge_n[q, 2, 1] * py + edge_n[q, 2, 2] * pz + edge_d[q, 2]
                im = 0
                phi = l0
                if l1 > phi:
                    phi = l1
                    im = 1
                if l2 > phi:
                    phi = l2
                    im = 2
                ratio = phi / phi_s[q]

                gsig = dldrho * rho * np.log(max(ratio, RATIO_EPS))
                if np.isfinite(gsig):
                    g_sigma[gi] += gsig
                else:
                    ndrop += 1

                sg = sigma[q]
                didphi = sg * ratio ** (sg - 1.0) / phi_s[q]
                dldphi = dldrho * didphi

                i0 = im
                i1 = (im + 1) % 3
                i2 = (im + 2) % 3
                ax = verts[q, i0, 0] - verts[q, i2, 0]
                ay = verts[q, i0, 1] - verts[q, i2, 1]
                az = verts[q, i0, 2] - verts[q, i2, 2]
                bx = verts[q, i1, 0] - verts[q, i2, 0]
                by = verts[q, i1, 1] - verts[q, i2, 1]
                bz = verts[q, i1, 2] - verts[q, i2, 2]
                cx = verts[q, i0, 0] - verts[q, i1, 0]
                cy = verts[q, i0, 1] - verts[q, i1, 1]
                cz = verts[q, i0, 2] - verts[q, i1, 2]
                bc = bx * cx + by * cy + bz * cz
                ac = ax * cx + ay * cy + az * cz
                cc = cx * cx + cy * cy + cz * cz
                npx = bc * ax - ac * bx
                npy = bc * ay - ac * by
                npz = bc * az - ac * bz
                nn = np.sqrt(npx * npx + npy * npy + npz * npz)
                nux = edge_n[q, im, 0]
                nuy = edge_n[q, im, 1]
                nuz = edge_n[q, im, 2]
                sgn = 1.0 if npx * nux + npy * nuy + npz * nuz > 0.0 else -1.0
                pvx = px - verts[q, i0, 0]
                pvy = py - verts[q, i0, 1]
                pvz = pz - verts[q, i0, 2]
                pvn = pvx * nux + pvy * nuy + pvz * nuz
                scale = sgn * dldphi / nn
                ux = (pvx - pvn * nux) * scale
                uy = (pvy - pvn * nuy) * scale
                uz = (pvz - pvn * nuz) * scale
                ua = ux * ax + uy * ay + uz * az
                ub = ux * bx + uy * by + uz * bz
                uc = ux * cx + uy * cy + uz * cz
                abx = ay * bz - az * by
                aby = az * bx - ax * bz
                abz = ax * by - ay * bx
                # row-vector chains against dN/dv_j (see window gradient notes)
                tgv[i0, 0] = ua * bx + bc * ux - ub * (ax + cx) - dldphi * nux
                tgv[i0, 1] = ua * by + bc * uy - ub * (ay + cy) - dldphi * nuy
                tgv[i0, 2] = ua * bz + bc * uz - ub * (az + cz) - dldphi * nuz
                tgv[i1, 0] = ua * cx + (uy * abz - uz * aby) - ac * ux
                tgv[i1, 1] = ua * cy + (uz * abx - ux * abz) - ac * uy
                tgv[i1, 2] = ua * cz + (ux * aby - uy * abx) - ac * uz
                tgv[i2, 0] = cc * ux - uc * cx
                tgv[i2, 1] = cc * uy - uc * cy
                tgv[i2, 2] = cc * uz - uc * cz

                # normal-loss chain: composited normal -> face normal -> vertices
                mdl0 = dln0 - (dln0 * fn0 + dln1 * fn1 + dln2 * fn2) * fn0
                mdl1 = dln1 - (dln0 * fn0 + dln1 * fn1 + dln2 * fn2) * fn1
                mdl2 = dln2 - (dln0 * fn0 + dln1 * fn1 + dln2 * fn2) * fn2
                e0x = verts[q, 1, 0] - verts[q, 0, 0]
                e0y = verts[q, 1, 1] - verts[q, 0, 1]
                e0z = verts[q, 1, 2] - verts[q, 0, 2]
                e1x = verts[q, 2, 0] - verts[q, 0, 0]
                e1y = verts[q, 2, 1] - verts[q, 0, 1]
                e1z = verts[q, 2, 2] - verts[q, 0, 2]
                mx = e0y * e1z - e0z * e1y
                my = e0z * e1x - e0x * e1z
                mz = e0x * e1y - e0y * e1x
                mlen = np.sqrt(mx * mx + my * my + mz * mz)
                nw = w * sflip / mlen
                # dM/dv_j = [v_{j+2} - v_{j+1}]_x; row-chain gives cross(u2, e_j)
                for vj in range(3):
                    wjx = verts[q, (vj + 2) % 3, 0] - verts[q, (vj + 1) % 3, 0]
                    wjy = verts[q, (vj + 2) % 3, 1] - verts[q, (vj + 1) % 3, 1]
                    wjz = verts[q, (vj + 2) % 3, 2] - verts[q, (vj + 1) % 3, 2]
                    tgv[vj, 0] += nw * (mdl1 * wjz - mdl2 * wjy)
                    tgv[vj, 1] += nw * (mdl2 * wjx - mdl0 * wjz)
                    tgv[vj, 2] += nw * (mdl0 * wjy - mdl1 * wjx)

                ok = True
                for vj in range(3):
                    for vk in range(3):
                        if not np.isfinite(tgv[vj, vk]):
                            ok = False
                if ok:
                    for vj in range(3):
                        for vk in range(3):
                            g_vert[gi, vj, vk] += tgv[vj, vk]
                else:
                    ndrop += 1

            tr *= 1.0 - alpha
            last_t = t
            last_id = q
            if tr < t_term:
                stop = True
                break
        if stop:
            break
    drops[0] += ndrop


@njit(cache=True, parallel=True, error_model="numpy")
def render_backward(node_min, node_max, node_left, node_right, leaf_start,
                    leaf_count, prim_order, edge_n, edge_d, phi_s, sigma,
                    face_n, plane_d, opacity, sh, verts, tri_index,
                    ro, rd, t_max, k, t_term,
                    tot_rgb, tot_depth, tot_norm, tot_t,
                    dl_rgb, dl_depth, dl_norm, dl_t,
                    g_vert, g_sh, g_logit, g_sigma, drops, workers):
    n_rays = ro.shape[0]
    for wkr in prange(workers):
        lo = n_rays * wkr // workers
        hi = n_rays * (wkr + 1) // workers
        basis = np.empty(16, np.float64)
        t_buf = np.empty(k, np.float64)
        id_buf = np.empty(k, np.int64)
        rho_buf = np.empty(k, np.float64)
        stack = np.empty(STACK_CAP, np.int64)
        stack_t = np.empty(STACK_CAP, np.float64)
        tgv = np.empty((3, 3), np.float64)
        dr = drops[wkr:wkr + 1]
        gv = g_vert[wkr]
        gs = g_sh[wkr]
        gl = g_logit[wkr]
        gg = g_sigma[wkr]
        for r in range(lo, hi):
            _backward_one(node_min, node_max, node_left, node_right,
                          leaf_start, leaf_count, prim_order, edge_n, edge_d,
                          phi_s, sigma, face_n, plane_d, opacity, sh, verts,
                          tri_index, r,
                          ro[r, 0], ro[r, 1], ro[r, 2],
                          rd[r, 0], rd[r, 1], rd[r, 2],
                          t_max[r], k, t_term,
                          tot_rgb, tot_depth, tot_norm, tot_t,
                          dl_rgb, dl_depth, dl_norm, dl_t,
                          gv, gs, gl, gg, dr,
                          basis, t_buf, id_buf, rho_buf, stack, stack_t, tgv)
