"""Scanline-free z-buffer kernel (numba).

Pixel (r, c) is sampled at its center (c + 0.5, r + 0.5). Screen y grows
downward. Ownership on shared edges follows the top-left rule; ``inclusive``
switches to closed triangles (every boundary sample belongs to the triangle),
which is what UV-space splatting wants.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _is_top_left(dx, dy):
    # edges of a triangle wound with positive area in (x right, y down)
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


@numba.njit(cache=True)
def rasterize_kernel(xy, inv_z, tris, height, width, inclusive):
    tri_id = np.full((height, width), -1, np.int64)
    zbuf = np.full((height, width), -np.inf)  # interpolated 1/z, larger wins
    bary = np.zeros((height, width, 3))
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        ax, ay = xy[ia, 0], xy[ia, 1]
        bx, by = xy[ib, 0], xy[ib, 1]
        cx, cy = xy[ic, 0], xy[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if not np.isfinite(area) or area == 0.0:
            continue
        flipped = area < 0.0
        if flipped:
            bx, by, cx, cy = cx, cy, bx, by
            area = -area
        za = inv_z[ia]
        zb = inv_z[ic] if flipped else inv_z[ib]
        zc = inv_z[ib] if flipped else inv_z[ic]

        c0 = max(int(np.ceil(min(ax, bx, cx) - 0.5)), 0)
        c1 = min(int(np.floor(max(ax, bx, cx) - 0.5)), width - 1)
        r0 = max(int(np.ceil(min(ay, by, cy) - 0.5)), 0)
        r1 = min(int(np.floor(max(ay, by, cy) - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        tl0 = _is_top_left(cx - bx, cy - by)  # edge b->c, opposite a
        tl1 = _is_top_left(ax - cx, ay - cy)  # edge c->a, opposite b
        tl2 = _is_top_left(bx - ax, by - ay)  # edge a->b, opposite c
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if inclusive:
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                else:
                    if w0 < 0.0 or (w0 == 0.0 and not tl0):
                        continue
                    if w1 < 0.0 or (w1 == 0.0 and not tl1):
                        continue
                    if w2 < 0.0 or (w2 == 0.0 and not tl2):
                        continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                iz = b0 * za + b1 * zb + b2 * zc
                if iz <= zbuf[r, c]:
                    continue
                zbuf[r, c] = iz
                tri_id[r, c] = t
                bary[r, c, 0] = b0
                if flipped:
                    bary[r, c, 1] = b2
                    bary[r, c, 2] = b1
                else:
                    bary[r, c, 1] = b1
                    bary[r, c, 2] = b2
    return tri_id, zbuf, bary
