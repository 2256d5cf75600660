"""numba kernels for hard and soft triangle rasterization.

All kernels take vertices already projected to the image: ``u, v`` in
continuous pixel coordinates and ``z`` the camera-space depth.  A face with
any vertex at or in front of the near plane is skipped.  Every loop runs in
a fixed order so results are bit-reproducible.
"""
import math

import numpy as np
from numba import njit

# influence is cut at a distance of 3*sqrt(sigma) and tapered to zero with a
# C1 smoothstep over the outer band so its derivative vanishes at the cut
TRUNC_X = -9.0
TAPER_X = -6.0
AREA_EPS = 1e-12


@njit(cache=True)
def _influence(x):
    """``(D, 1 - D, dD/dx)`` for sigmoid argument ``x > TRUNC_X``."""
    e = math.exp(-abs(x))
    if x >= 0:
        sp = 1.0 / (1.0 + e)
        sn = e / (1.0 + e)
    else:
        sp = e / (1.0 + e)
        sn = 1.0 / (1.0 + e)
    if x >= TAPER_X:
        return sp, sn, sp * sn
    s = (x - TRUNC_X) / (TAPER_X - TRUNC_X)
    w = s * s * (3.0 - 2.0 * s)
    dw = 6.0 * s * (1.0 - s) / (TAPER_X - TRUNC_X)
    D = sp * w
    return D, sn + sp * (1.0 - w), sp * sn * w + sp * dw


@njit(cache=True)
def rasterize_hard(u, v, z, faces, nocs_v, width, height, near):
    """Nearest-face z-buffer with perspective-correct NOCS interpolation."""
    depth = np.full((height, width), np.inf)
    nocs = np.zeros((height, width, 3))
    face_id = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[i0] <= near or z[i1] <= near or z[i2] <= near:
            continue
        x0, y0, x1, y1, x2, y2 = u[i0], v[i0], u[i1], v[i1], u[i2], v[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < AREA_EPS:
            continue
        cmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        cmax = min(int(math.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        rmin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        rmax = min(int(math.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for r in range(rmin, rmax + 1):
            py = r + 0.5
            for c in range(cmin, cmax + 1):
                px = c + 0.5
                w0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area
                w1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                q0 = w0 / z[i0]
                q1 = w1 / z[i1]
                q2 = w2 / z[i2]
                Q = q0 + q1 + q2
                zp = 1.0 / Q
                if zp < depth[r, c]:
                    depth[r, c] = zp
                    face_id[r, c] = f
                    b0, b1, b2 = q0 / Q, q1 / Q, q2 / Q
                    for k in range(3):
                        nocs[r, c, k] = b0 * nocs_v[i0, k] + b1 * nocs_v[i1, k] + b2 * nocs_v[i2, k]
    return depth, nocs, face_id


@njit(cache=True)
def _seg_d2(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    L = ex * ex + ey * ey
    t = 0.0
    if L > 0:
        t = ((px - ax) * ex + (py - ay) * ey) / L
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    qx = ax + t * ex
    qy = ay + t * ey
    return (px - qx) ** 2 + (py - qy) ** 2, t, px - qx, py - qy


@njit(cache=True)
def _line_d2(px, py, ax, ay, bx, by):
    """Squared distance to the infinite line through a, b, with its
    cross product and squared edge length."""
    ex = bx - ax
    ey = by - ay
    L = ex * ex + ey * ey
    cr = ex * (py - ay) - ey * (px - ax)
    return cr * cr / L, cr, L


@njit(cache=True)
def _face_pixel(px, py, x0, y0, x1, y1, x2, y2, area, sigma, cut2=0.0):
    """Signed-distance influence argument and screen barycentrics of a pixel.

    Outside the triangle the distance is the exact point-to-triangle
    distance; ``edge``/``t`` locate the closest boundary point,
    ``(dx, dy)`` is the pixel minus that point and the barycentrics are
    those of that point.  Inside, the squared
    distance is the harmonic combination of the squared distances to the
    three edge lines, which is smooth inside and meets the exact distance
    with a matching first derivative on the boundary.

    Returns ``(x, inside, d2, edge, t, dx, dy, w0, w1, w2)`` where ``x`` is
    the sigmoid argument.  With ``cut2 > 0``, pixels whose squared distance
    provably reaches ``cut2`` return early with ``x = TRUNC_X``.
    """
    w0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area
    w1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area
    w2 = ((x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)) / area
    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
    if not inside and cut2 > 0:
        # the distance to an edge's line bounds the distance to the triangle
        a2 = area * area
        if ((w0 < 0 and w0 * w0 * a2 >= cut2 * ((x2 - x1) ** 2 + (y2 - y1) ** 2))
                or (w1 < 0 and w1 * w1 * a2 >= cut2 * ((x0 - x2) ** 2 + (y0 - y2) ** 2))
                or (w2 < 0 and w2 * w2 * a2 >= cut2 * ((x1 - x0) ** 2 + (y1 - y0) ** 2))):
            return TRUNC_X, inside, cut2, 0, 0.0, 0.0, 0.0, w0, w1, w2
    if inside:
        L0 = _line_d2(px, py, x0, y0, x1, y1)[0]
        L1 = _line_d2(px, py, x1, y1, x2, y2)[0]
        L2 = _line_d2(px, py, x2, y2, x0, y0)[0]
        den = L1 * L2 + L0 * L2 + L0 * L1
        d2 = L0 * L1 * L2 / den if den > 0 else 0.0
        return d2 / sigma, inside, d2, -1, 0.0, 0.0, 0.0, w0, w1, w2
    d2, t, dx, dy = _seg_d2(px, py, x0, y0, x1, y1)
    edge = 0
    d2b, tb, dxb, dyb = _seg_d2(px, py, x1, y1, x2, y2)
    if d2b < d2:
        d2, t, dx, dy, edge = d2b, tb, dxb, dyb, 1
    d2b, tb, dxb, dyb = _seg_d2(px, py, x2, y2, x0, y0)
    if d2b < d2:
        d2, t, dx, dy, edge = d2b, tb, dxb, dyb, 2
    # barycentrics of the closest point on the triangle
    if edge == 0:
        w0, w1, w2 = 1.0 - t, t, 0.0
    elif edge == 1:
        w0, w1, w2 = 0.0, 1.0 - t, t
    else:
        w0, w1, w2 = t, 0.0, 1.0 - t
    return -d2 / sigma, inside, d2, edge, t, dx, dy, w0, w1, w2


@njit(cache=True)
def _line_d2_grad(px, py, ax, ay, bx, by, g):
    """Gradient of ``g * line_d2`` w.r.t. (ax, ay, bx, by)."""
    ex = bx - ax
    ey = by - ay
    L = ex * ex + ey * ey
    cr = ex * (py - ay) - ey * (px - ax)
    gc = g * 2.0 * cr / L
    gL = -g * cr * cr / (L * L)
    gax = gc * (by - py) - 2.0 * gL * ex
    gay = gc * (px - bx) - 2.0 * gL * ey
    gbx = gc * (py - ay) + 2.0 * gL * ex
    gby = gc * (ax - px) + 2.0 * gL * ey
    return gax, gay, gbx, gby


@njit(cache=True)
def _bbox(x0, y0, x1, y1, x2, y2, rad, width, height):
    cmin = max(int(math.floor(min(x0, x1, x2) - rad - 0.5)), 0)
    cmax = min(int(math.ceil(max(x0, x1, x2) + rad - 0.5)), width - 1)
    rmin = max(int(math.floor(min(y0, y1, y2) - rad - 0.5)), 0)
    rmax = min(int(math.ceil(max(y0, y1, y2) + rad - 0.5)), height - 1)
    return cmin, cmax, rmin, rmax


@njit(cache=True)
def _interp(w0, w1, w2, z0, z1, z2):
    """Perspective-correct screen barycentrics."""
    q0, q1, q2 = w0 / z0, w1 / z1, w2 / z2
    return q0, q1, q2, q0 + q1 + q2


@njit(cache=True)
def _face_ok(z, i0, i1, i2, near):
    return z[i0] > near and z[i1] > near and z[i2] > near


@njit(cache=True)
def soft_forward(u, v, z, faces, nocs_v, width, height, sigma, gamma, eps_bg, near, far):
    """Soft mask, face-blended NOCS and depth.

    Besides the images, returns the per-pixel aggregation state and the
    fragments (face-pixel pairs inside the influence radius, grouped by
    face) that :func:`soft_backward` reuses.
    """
    rad = 3.0 * math.sqrt(sigma)
    cut2 = -TRUNC_X * sigma
    nf = faces.shape[0]
    # upper bound on the fragment count from the expanded bounding boxes
    cap = 0
    for f in range(nf):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if not _face_ok(z, i0, i1, i2, near):
            continue
        cmin, cmax, rmin, rmax = _bbox(u[i0], v[i0], u[i1], v[i1], u[i2], v[i2], rad, width, height)
        if cmax >= cmin and rmax >= rmin:
            cap += (cmax - cmin + 1) * (rmax - rmin + 1)
    fstart = np.zeros(nf + 1, dtype=np.int64)
    fpix = np.empty(cap, dtype=np.int64)
    fx = np.empty(cap)
    fin = np.empty(cap, dtype=np.bool_)
    fedge = np.empty(cap, dtype=np.int64)
    fgeo = np.empty((cap, 6))     # t, dx, dy, w0, w1, w2

    zmax = np.full((height, width), eps_bg)
    prod = np.ones((height, width))
    nsat = np.zeros((height, width), dtype=np.int64)
    zrange = far - near
    n = 0
    for f in range(nf):
        fstart[f] = n
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if not _face_ok(z, i0, i1, i2, near):
            continue
        x0, y0, x1, y1, x2, y2 = u[i0], v[i0], u[i1], v[i1], u[i2], v[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < AREA_EPS:
            continue
        cmin, cmax, rmin, rmax = _bbox(x0, y0, x1, y1, x2, y2, rad, width, height)
        for r in range(rmin, rmax + 1):
            for c in range(cmin, cmax + 1):
                x, inside, d2, edge, t, dx, dy, w0, w1, w2 = _face_pixel(
                    c + 0.5, r + 0.5, x0, y0, x1, y1, x2, y2, area, sigma, cut2)
                if x <= TRUNC_X:
                    continue
                om = _influence(x)[1]
                if om > 0.0:
                    prod[r, c] *= om
                else:
                    nsat[r, c] += 1
                q0, q1, q2, Q = _interp(w0, w1, w2, z[i0], z[i1], z[i2])
                zb = (far - 1.0 / Q) / zrange
                zb = min(max(zb, 0.0), 1.0)
                if zb > zmax[r, c]:
                    zmax[r, c] = zb
                fpix[n] = r * width + c
                fx[n] = x
                fin[n] = inside
                fedge[n] = edge
                fgeo[n, 0] = t
                fgeo[n, 1] = dx
                fgeo[n, 2] = dy
                fgeo[n, 3] = w0
                fgeo[n, 4] = w1
                fgeo[n, 5] = w2
                n += 1
    fstart[nf] = n

    asum = np.zeros((height, width))
    csum = np.zeros((height, width, 3))
    dsum = np.zeros((height, width))
    for f in range(nf):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        for k in range(fstart[f], fstart[f + 1]):
            r = fpix[k] // width
            c = fpix[k] - r * width
            D = _influence(fx[k])[0]
            q0, q1, q2, Q = _interp(fgeo[k, 3], fgeo[k, 4], fgeo[k, 5], z[i0], z[i1], z[i2])
            zb = (far - 1.0 / Q) / zrange
            zb = min(max(zb, 0.0), 1.0)
            a = D * math.exp((zb - zmax[r, c]) / gamma)
            asum[r, c] += a
            dsum[r, c] += a / Q
            for j in range(3):
                csum[r, c, j] += a * (q0 * nocs_v[i0, j] + q1 * nocs_v[i1, j] + q2 * nocs_v[i2, j]) / Q
    mask = np.empty((height, width))
    nocs = np.empty((height, width, 3))
    depth = np.empty((height, width))
    for r in range(height):
        for c in range(width):
            fg = asum[r, c]
            asum[r, c] = fg + math.exp((eps_bg - zmax[r, c]) / gamma)
            for j in range(3):
                nocs[r, c, j] = csum[r, c, j] / asum[r, c]
            mask[r, c] = 1.0 - (prod[r, c] if nsat[r, c] == 0 else 0.0)
            depth[r, c] = dsum[r, c] / fg if fg > 0 else np.inf
    frags = (fstart, fpix[:n].copy(), fx[:n].copy(), fin[:n].copy(), fedge[:n].copy(),
             fgeo[:n].copy())
    return mask, nocs, depth, zmax, asum, prod, nsat, frags


@njit(cache=True)
def soft_backward(u, v, z, faces, nocs_v, width, height, sigma, gamma, eps_bg, near, far,
                  nocs, zmax, asum, prod, nsat, frags, g_nocs, g_mask):
    """Vector-Jacobian product of :func:`soft_forward` w.r.t. ``u, v, z``."""
    fstart, fpix, fx, fin, fedge, fgeo = frags
    nv = u.shape[0]
    gu = np.zeros(nv)
    gv = np.zeros(nv)
    gz = np.zeros(nv)
    zrange = far - near
    for f in range(faces.shape[0]):
        if fstart[f + 1] == fstart[f]:
            continue
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, x1, y1, x2, y2 = u[i0], v[i0], u[i1], v[i1], u[i2], v[i2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        # per-face accumulators for the 2D vertex positions and depths
        gx0 = gy0 = gx1 = gy1 = gx2 = gy2 = 0.0
        gz0 = gz1 = gz2 = 0.0
        for k in range(fstart[f], fstart[f + 1]):
            r = fpix[k] // width
            c = fpix[k] - r * width
            gm = g_mask[r, c]
            gn0, gn1, gn2 = g_nocs[r, c, 0], g_nocs[r, c, 1], g_nocs[r, c, 2]
            if gm == 0.0 and gn0 == 0.0 and gn1 == 0.0 and gn2 == 0.0:
                continue
            px = c + 0.5
            py = r + 0.5
            x = fx[k]
            inside = fin[k]
            edge = fedge[k]
            t, dx, dy, w0, w1, w2 = fgeo[k, 0], fgeo[k, 1], fgeo[k, 2], fgeo[k, 3], fgeo[k, 4], fgeo[k, 5]
            D, om, dD = _influence(x)
            q0, q1, q2, Q = _interp(w0, w1, w2, z0, z1, z2)
            zp = 1.0 / Q
            zb_raw = (far - zp) / zrange
            zb = min(max(zb_raw, 0.0), 1.0)
            E = math.exp((zb - zmax[r, c]) / gamma)
            a = D * E
            A = asum[r, c]
            b0, b1, b2 = q0 / Q, q1 / Q, q2 / Q
            c0 = b0 * nocs_v[i0, 0] + b1 * nocs_v[i1, 0] + b2 * nocs_v[i2, 0]
            c1 = b0 * nocs_v[i0, 1] + b1 * nocs_v[i1, 1] + b2 * nocs_v[i2, 1]
            c2 = b0 * nocs_v[i0, 2] + b1 * nocs_v[i1, 2] + b2 * nocs_v[i2, 2]
            dot = (gn0 * (c0 - nocs[r, c, 0]) + gn1 * (c1 - nocs[r, c, 1])
                   + gn2 * (c2 - nocs[r, c, 2]))
            # d mask / d D_j = product of (1 - D_k) over the other faces
            if nsat[r, c] == 0:
                dm = prod[r, c] / om
            elif nsat[r, c] == 1 and om == 0.0:
                dm = prod[r, c]
            else:
                dm = 0.0
            gD = gm * dm + E * dot / A
            gzb = a / gamma * dot / A if 0.0 < zb_raw < 1.0 else 0.0
            # influence -> squared distance -> closest edge endpoints
            gx = gD * dD
            gd2 = gx / sigma if inside else -gx / sigma
            if gd2 != 0.0 and inside:
                L0 = _line_d2(px, py, x0, y0, x1, y1)[0]
                L1 = _line_d2(px, py, x1, y1, x2, y2)[0]
                L2 = _line_d2(px, py, x2, y2, x0, y0)[0]
                den = L1 * L2 + L0 * L2 + L0 * L1
                if den > 0:
                    den2 = den * den
                    ga, gb, gc_, gd = _line_d2_grad(px, py, x0, y0, x1, y1, gd2 * (L1 * L2) ** 2 / den2)
                    gx0 += ga; gy0 += gb; gx1 += gc_; gy1 += gd
                    ga, gb, gc_, gd = _line_d2_grad(px, py, x1, y1, x2, y2, gd2 * (L0 * L2) ** 2 / den2)
                    gx1 += ga; gy1 += gb; gx2 += gc_; gy2 += gd
                    ga, gb, gc_, gd = _line_d2_grad(px, py, x2, y2, x0, y0, gd2 * (L0 * L1) ** 2 / den2)
                    gx2 += ga; gy2 += gb; gx0 += gc_; gy0 += gd
            elif gd2 != 0.0:
                ga = -2.0 * gd2 * (1.0 - t)
                gb = -2.0 * gd2 * t
                if edge == 0:
                    gx0 += ga * dx; gy0 += ga * dy; gx1 += gb * dx; gy1 += gb * dy
                elif edge == 1:
                    gx1 += ga * dx; gy1 += ga * dy; gx2 += gb * dx; gy2 += gb * dy
                else:
                    gx2 += ga * dx; gy2 += ga * dy; gx0 += gb * dx; gy0 += gb * dy
            # color path: c_j = sum_k b_k n_k
            wa = a / A
            gb0 = wa * (gn0 * nocs_v[i0, 0] + gn1 * nocs_v[i0, 1] + gn2 * nocs_v[i0, 2])
            gb1 = wa * (gn0 * nocs_v[i1, 0] + gn1 * nocs_v[i1, 1] + gn2 * nocs_v[i1, 2])
            gb2 = wa * (gn0 * nocs_v[i2, 0] + gn1 * nocs_v[i2, 1] + gn2 * nocs_v[i2, 2])
            sb = gb0 * b0 + gb1 * b1 + gb2 * b2
            gzp = -gzb / zrange
            gq0 = (gb0 - sb) / Q - gzp / (Q * Q)
            gq1 = (gb1 - sb) / Q - gzp / (Q * Q)
            gq2 = (gb2 - sb) / Q - gzp / (Q * Q)
            # q_k = w_k / z_k
            gz0 -= gq0 * w0 / (z0 * z0)
            gz1 -= gq1 * w1 / (z1 * z1)
            gz2 -= gq2 * w2 / (z2 * z2)
            gw0, gw1, gw2 = gq0 / z0, gq1 / z1, gq2 / z2
            if not inside:
                # barycentrics of the closest boundary point: only t moves
                if edge == 0:
                    gt = gw1 - gw0
                    ax, ay, bx, by = x0, y0, x1, y1
                elif edge == 1:
                    gt = gw2 - gw1
                    ax, ay, bx, by = x1, y1, x2, y2
                else:
                    gt = gw0 - gw2
                    ax, ay, bx, by = x2, y2, x0, y0
                if gt == 0.0 or t <= 0.0 or t >= 1.0:
                    continue
                ex, ey = bx - ax, by - ay
                L = ex * ex + ey * ey
                rx, ry = px - ax, py - ay
                gax = gt * ((-ex - rx) + 2.0 * t * ex) / L
                gay = gt * ((-ey - ry) + 2.0 * t * ey) / L
                gbx = gt * (rx - 2.0 * t * ex) / L
                gby = gt * (ry - 2.0 * t * ey) / L
                if edge == 0:
                    gx0 += gax; gy0 += gay; gx1 += gbx; gy1 += gby
                elif edge == 1:
                    gx1 += gax; gy1 += gay; gx2 += gbx; gy2 += gby
                else:
                    gx2 += gax; gy2 += gay; gx0 += gbx; gy0 += gby
                continue
            # w_k = A_k / sum(A)
            sw = gw0 * w0 + gw1 * w1 + gw2 * w2
            gA0 = (gw0 - sw) / area
            gA1 = (gw1 - sw) / area
            gA2 = (gw2 - sw) / area
            # A_0 = cross(p1 - P, p2 - P), A_1 = cross(p2 - P, p0 - P),
            # A_2 = cross(p0 - P, p1 - P); d cross(a, b) = (b_y, -b_x) da + (-a_y, a_x) db
            ax0, ay0 = x0 - px, y0 - py
            ax1, ay1 = x1 - px, y1 - py
            ax2, ay2 = x2 - px, y2 - py
            gx1 += gA0 * ay2; gy1 -= gA0 * ax2; gx2 -= gA0 * ay1; gy2 += gA0 * ax1
            gx2 += gA1 * ay0; gy2 -= gA1 * ax0; gx0 -= gA1 * ay2; gy0 += gA1 * ax2
            gx0 += gA2 * ay1; gy0 -= gA2 * ax1; gx1 -= gA2 * ay0; gy1 += gA2 * ax0
        gu[i0] += gx0; gv[i0] += gy0; gz[i0] += gz0
        gu[i1] += gx1; gv[i1] += gy1; gz[i1] += gz1
        gu[i2] += gx2; gv[i2] += gy2; gz[i2] += gz2
    return gu, gv, gz
