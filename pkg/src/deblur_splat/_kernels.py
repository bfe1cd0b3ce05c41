"""Numba kernels for the tile rasterizer.

Per-splat attribute layout shared by forward and backward:
    means2d (M, 2), conics (M, 3) as (a, b, c) of [[a, b], [b, c]],
    colors (M, 3), opacities (M,), depths (M,).
Backward writes one 9-wide gradient row per (tile, splat) pair:
    [d mean_x, d mean_y, d a, d b, d c, d r, d g, d b, d opacity]
where ``d b`` is the gradient of a single off-diagonal conic entry.
"""

import math

import numpy as np
from numba import njit, prange

PAIR_GRAD_WIDTH = 9


@njit(cache=True, inline="always")
def span_cut(op, alpha_min, maha_cut):
    """Largest Mahalanobis distance that can still pass both the cutoff and alpha_min."""
    if op < alpha_min:
        return -1.0
    return min(maha_cut, 2.0 * math.log(op / alpha_min)) * (1.0 + 1e-9) + 1e-9


@njit(cache=True, inline="always")
def row_span(a, b, c, mx, dy, cut, bx0, bx1):
    """Pixel columns of one row that can lie inside the ellipse ``maha <= cut``.

    Padded by a small margin; callers still test every pixel exactly.
    """
    disc = b * b * dy * dy - a * (c * dy * dy - cut)
    if disc < 0.0:
        return 1, 0
    r = math.sqrt(disc)
    lo = (-b * dy - r) / a
    hi = (-b * dy + r) / a
    # px = mx - dx, column x has centre x + 0.5
    x_lo = int(math.ceil(mx - hi - 0.5 - 1e-3))
    x_hi = int(math.floor(mx - lo - 0.5 + 1e-3))
    return max(x_lo, bx0), min(x_hi, bx1)


@njit(cache=True)
def bin_splats(order, tx0, tx1, ty0, ty1, tiles_x, n_tiles):
    """Bucket splats into tiles; within a tile, pairs keep ``order`` (depth order)."""
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for s in order:
        if tx0[s] > tx1[s]:
            continue
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    pairs = np.empty(offsets[-1], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for s in order:
        if tx0[s] > tx1[s]:
            continue
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                t = ty * tiles_x + tx
                pairs[cursor[t]] = s
                cursor[t] += 1
    return offsets, pairs


@njit(parallel=True, cache=True)
def forward_tiles(
    offsets, pairs, means2d, conics, colors, opacities, depths, extents,
    width, height, tile, tiles_x, background,
    alpha_max, alpha_min, t_stop, maha_cut,
    image, final_t, last, count, depth_out,
):
    """Splat-major scan per tile: each splat only visits the pixels inside its box.

    Per pixel the arithmetic and its order match a pixel-major front-to-back loop.
    """
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = offsets[t]
        end = offsets[t + 1]
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        y1 = min(y0 + tile, height)
        x1 = min(x0 + tile, width)
        th = y1 - y0
        tw = x1 - x0
        T = np.ones((th, tw))
        acc = np.zeros((th, tw, 4))
        lst = np.full((th, tw), -1, dtype=np.int64)
        n = np.zeros((th, tw), dtype=np.int32)
        done = np.zeros((th, tw), dtype=np.bool_)
        remaining = th * tw
        for k in range(start, end):
            if remaining == 0:
                break
            s = pairs[k]
            mx = means2d[s, 0]
            my = means2d[s, 1]
            bx0 = max(int(math.ceil(mx - extents[s, 0] - 0.5)), x0)
            bx1 = min(int(math.floor(mx + extents[s, 0] - 0.5)), x1 - 1)
            by0 = max(int(math.ceil(my - extents[s, 1] - 0.5)), y0)
            by1 = min(int(math.floor(my + extents[s, 1] - 0.5)), y1 - 1)
            a = conics[s, 0]
            b = conics[s, 1]
            c = conics[s, 2]
            op = opacities[s]
            cut = span_cut(op, alpha_min, maha_cut)
            for y in range(by0, by1 + 1):
                dy = my - (y + 0.5)
                ly = y - y0
                rx0, rx1 = row_span(a, b, c, mx, dy, cut, bx0, bx1)
                for x in range(rx0, rx1 + 1):
                    lx = x - x0
                    if done[ly, lx]:
                        continue
                    dx = mx - (x + 0.5)
                    maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    if maha > maha_cut:
                        continue
                    alpha = op * math.exp(-0.5 * maha)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    Tp = T[ly, lx]
                    w = alpha * Tp
                    acc[ly, lx, 0] += colors[s, 0] * w
                    acc[ly, lx, 1] += colors[s, 1] * w
                    acc[ly, lx, 2] += colors[s, 2] * w
                    acc[ly, lx, 3] += depths[s] * w
                    Tp *= 1.0 - alpha
                    T[ly, lx] = Tp
                    lst[ly, lx] = k
                    n[ly, lx] += 1
                    if Tp < t_stop:
                        done[ly, lx] = True
                        remaining -= 1
        for ly in range(th):
            for lx in range(tw):
                y = y0 + ly
                x = x0 + lx
                Tp = T[ly, lx]
                image[y, x, 0] = acc[ly, lx, 0] + Tp * background[0]
                image[y, x, 1] = acc[ly, lx, 1] + Tp * background[1]
                image[y, x, 2] = acc[ly, lx, 2] + Tp * background[2]
                final_t[y, x] = Tp
                last[y, x] = lst[ly, lx]
                count[y, x] = n[ly, lx]
                depth_out[y, x] = acc[ly, lx, 3] / (1.0 - Tp) if 1.0 - Tp > 1e-12 else 0.0


@njit(parallel=True, cache=True)
def backward_tiles(
    offsets, pairs, means2d, conics, colors, opacities, extents,
    width, height, tile, tiles_x, background,
    alpha_max, alpha_min, maha_cut,
    final_t, last, dl_dimage, pair_grads,
):
    """Back-to-front replay of ``forward_tiles``, again splat-major within a tile.

    Each pair row sums its pixels in raster order, as a pixel-major loop would.
    """
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = offsets[t]
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        y1 = min(y0 + tile, height)
        x1 = min(x0 + tile, width)
        th = y1 - y0
        tw = x1 - x0
        # per-pixel replay state: T, accumulated colour behind, previous alpha and colour
        T = np.empty((th, tw))
        acc = np.zeros((th, tw, 3))
        prev = np.zeros((th, tw, 4))
        top = start - 1
        for ly in range(th):
            for lx in range(tw):
                T[ly, lx] = final_t[y0 + ly, x0 + lx]
                if last[y0 + ly, x0 + lx] > top:
                    top = last[y0 + ly, x0 + lx]
        for k in range(top, start - 1, -1):
            s = pairs[k]
            mx = means2d[s, 0]
            my = means2d[s, 1]
            bx0 = max(int(math.ceil(mx - extents[s, 0] - 0.5)), x0)
            bx1 = min(int(math.floor(mx + extents[s, 0] - 0.5)), x1 - 1)
            by0 = max(int(math.ceil(my - extents[s, 1] - 0.5)), y0)
            by1 = min(int(math.floor(my + extents[s, 1] - 0.5)), y1 - 1)
            a = conics[s, 0]
            b = conics[s, 1]
            c = conics[s, 2]
            op = opacities[s]
            cr = colors[s, 0]
            cg = colors[s, 1]
            cb = colors[s, 2]
            g0 = g1 = g2 = g3 = g4 = g5 = g6 = g7 = g8 = 0.0
            cut = span_cut(op, alpha_min, maha_cut)
            for y in range(by0, by1 + 1):
                dy = my - (y + 0.5)
                ly = y - y0
                rx0, rx1 = row_span(a, b, c, mx, dy, cut, bx0, bx1)
                for x in range(rx0, rx1 + 1):
                    if k > last[y, x]:
                        continue
                    dx = mx - (x + 0.5)
                    maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    if maha > maha_cut:
                        continue
                    g = math.exp(-0.5 * maha)
                    alpha = op * g
                    clamped = False
                    if alpha > alpha_max:
                        alpha = alpha_max
                        clamped = True
                    if alpha < alpha_min:
                        continue
                    lx = x - x0
                    gr = dl_dimage[y, x, 0]
                    gg = dl_dimage[y, x, 1]
                    gb = dl_dimage[y, x, 2]
                    Tp = T[ly, lx] / (1.0 - alpha)
                    T[ly, lx] = Tp
                    # colour accumulated behind this splat, normalised to its own transmittance
                    pa = prev[ly, lx, 0]
                    ar = pa * prev[ly, lx, 1] + (1.0 - pa) * acc[ly, lx, 0]
                    ag = pa * prev[ly, lx, 2] + (1.0 - pa) * acc[ly, lx, 1]
                    ab = pa * prev[ly, lx, 3] + (1.0 - pa) * acc[ly, lx, 2]
                    acc[ly, lx, 0] = ar
                    acc[ly, lx, 1] = ag
                    acc[ly, lx, 2] = ab
                    prev[ly, lx, 0] = alpha
                    prev[ly, lx, 1] = cr
                    prev[ly, lx, 2] = cg
                    prev[ly, lx, 3] = cb
                    w = alpha * Tp
                    g5 += w * gr
                    g6 += w * gg
                    g7 += w * gb
                    if clamped:
                        continue
                    t_fin = final_t[y, x]
                    bg_dot = background[0] * gr + background[1] * gg + background[2] * gb
                    dl_dalpha = Tp * ((cr - ar) * gr + (cg - ag) * gg + (cb - ab) * gb)
                    dl_dalpha -= t_fin / (1.0 - alpha) * bg_dot
                    g8 += g * dl_dalpha
                    # alpha = o * exp(-maha / 2)
                    dl_dmaha = -0.5 * alpha * dl_dalpha
                    g0 += dl_dmaha * 2.0 * (a * dx + b * dy)
                    g1 += dl_dmaha * 2.0 * (b * dx + c * dy)
                    g2 += dl_dmaha * dx * dx
                    g3 += dl_dmaha * dx * dy
                    g4 += dl_dmaha * dy * dy
            pair_grads[k, 0] = g0
            pair_grads[k, 1] = g1
            pair_grads[k, 2] = g2
            pair_grads[k, 3] = g3
            pair_grads[k, 4] = g4
            pair_grads[k, 5] = g5
            pair_grads[k, 6] = g6
            pair_grads[k, 7] = g7
            pair_grads[k, 8] = g8


@njit(cache=True)
def reduce_pairs(pairs, pair_grads, n_splats):
    out = np.zeros((n_splats, pair_grads.shape[1]))
    for k in range(pairs.shape[0]):
        s = pairs[k]
        for j in range(pair_grads.shape[1]):
            out[s, j] += pair_grads[k, j]
    return out


@njit(parallel=True, cache=True)
def project_gaussians(
    positions, quats, scales, Rc, tc, fx, fy, cx, cy, near, far, gw, gh, width, height, dilation, cutoff,
    t_out, uv, R_out, M_out, cov3d, J_out, T_out, cov2d, conics, extents, status,
):
    """Per-Gaussian camera transform, EWA covariance and conic.

    ``status``: 0 kept, 1 culled (depth, guard band or degenerate 2D covariance),
    2 zero quaternion on an otherwise visible Gaussian.
    """
    n = positions.shape[0]
    for i in prange(n):
        status[i] = 1
        t = np.empty(3)
        for r in range(3):
            t[r] = Rc[r, 0] * positions[i, 0] + Rc[r, 1] * positions[i, 1] + Rc[r, 2] * positions[i, 2] + tc[r]
        tz = t[2]
        if not (tz > near and tz < far):
            continue
        u = fx * t[0] / tz + cx
        v = fy * t[1] / tz + cy
        if not (u > -gw and u < width + gw and v > -gh and v < height + gh):
            continue
        qn = math.sqrt(quats[i, 0] ** 2 + quats[i, 1] ** 2 + quats[i, 2] ** 2 + quats[i, 3] ** 2)
        if qn == 0.0:
            status[i] = 2
            continue
        w = quats[i, 0] / qn
        x = quats[i, 1] / qn
        y = quats[i, 2] / qn
        z = quats[i, 3] / qn
        R = R_out[i]
        R[0, 0] = 1 - 2 * (y * y + z * z)
        R[0, 1] = 2 * (x * y - w * z)
        R[0, 2] = 2 * (x * z + w * y)
        R[1, 0] = 2 * (x * y + w * z)
        R[1, 1] = 1 - 2 * (x * x + z * z)
        R[1, 2] = 2 * (y * z - w * x)
        R[2, 0] = 2 * (x * z - w * y)
        R[2, 1] = 2 * (y * z + w * x)
        R[2, 2] = 1 - 2 * (x * x + y * y)
        M = M_out[i]
        for r in range(3):
            for c in range(3):
                M[r, c] = R[r, c] * scales[i, c]
        S = cov3d[i]
        for r in range(3):
            for c in range(3):
                S[r, c] = M[r, 0] * M[c, 0] + M[r, 1] * M[c, 1] + M[r, 2] * M[c, 2]
        J = J_out[i]
        J[0, 0] = fx / tz
        J[0, 1] = 0.0
        J[0, 2] = -fx * t[0] / (tz * tz)
        J[1, 0] = 0.0
        J[1, 1] = fy / tz
        J[1, 2] = -fy * t[1] / (tz * tz)
        T = T_out[i]
        for r in range(2):
            for c in range(3):
                T[r, c] = J[r, 0] * Rc[0, c] + J[r, 1] * Rc[1, c] + J[r, 2] * Rc[2, c]
        TS = np.empty((2, 3))
        for r in range(2):
            for c in range(3):
                TS[r, c] = T[r, 0] * S[0, c] + T[r, 1] * S[1, c] + T[r, 2] * S[2, c]
        C2 = cov2d[i]
        for r in range(2):
            for c in range(2):
                C2[r, c] = TS[r, 0] * T[c, 0] + TS[r, 1] * T[c, 1] + TS[r, 2] * T[c, 2]
        C2[0, 0] += dilation
        C2[1, 1] += dilation
        A = C2[0, 0]
        B = C2[0, 1]
        C = C2[1, 1]
        det = A * C - B * B
        if not det > 1e-12:
            continue
        t_out[i, 0] = t[0]
        t_out[i, 1] = t[1]
        t_out[i, 2] = t[2]
        uv[i, 0] = u
        uv[i, 1] = v
        conics[i, 0] = C / det
        conics[i, 1] = -B / det
        conics[i, 2] = A / det
        extents[i, 0] = cutoff * math.sqrt(A) + 1e-9
        extents[i, 1] = cutoff * math.sqrt(C) + 1e-9
        status[i] = 0
