"""Two-pass 3x3x3 chamfer distance kernel (weights 3/4/5 over 3)."""

import numpy as np
from numba import njit

FACE, EDGE, CORNER = 1.0, 4.0 / 3.0, 5.0 / 3.0


def neighbour_weights(voxel_size):
    """Return (offsets, weights) for the 13 raster-causal neighbours.

    Offsets are (dx, dy, dz) with a negative linear index in x-fastest order.
    Weights are the unit chamfer weight times the mm/voxel ratio of the offset.
    """
    sx, sy, sz = (float(s) for s in voxel_size)
    offsets, weights = [], []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx + 3 * dy + 9 * dz >= 0:
                    continue
                k = abs(dx) + abs(dy) + abs(dz)
                unit = (FACE, EDGE, CORNER)[k - 1]
                mm = np.sqrt((dx * sx) ** 2 + (dy * sy) ** 2 + (dz * sz) ** 2)
                offsets.append((dx, dy, dz))
                weights.append(unit * mm / np.sqrt(k))
    return np.array(offsets, dtype=np.int64), np.array(weights, dtype=np.float64)


@njit(cache=True)
def _two_pass(dist, offsets, weights):
    nx, ny, nz = dist.shape
    m = offsets.shape[0]
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                best = dist[x, y, z]
                if best == 0.0:
                    continue
                for i in range(m):
                    xx = x + offsets[i, 0]
                    yy = y + offsets[i, 1]
                    zz = z + offsets[i, 2]
                    if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                        cand = dist[xx, yy, zz] + weights[i]
                        if cand < best:
                            best = cand
                dist[x, y, z] = best
    for z in range(nz - 1, -1, -1):
        for y in range(ny - 1, -1, -1):
            for x in range(nx - 1, -1, -1):
                best = dist[x, y, z]
                if best == 0.0:
                    continue
                for i in range(m):
                    xx = x - offsets[i, 0]
                    yy = y - offsets[i, 1]
                    zz = z - offsets[i, 2]
                    if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                        cand = dist[xx, yy, zz] + weights[i]
                        if cand < best:
                            best = cand
                dist[x, y, z] = best
    return dist


def chamfer_distance(obj, voxel_size):
    """Chamfer distance (mm) from every voxel to the nearest nonzero voxel of `obj`."""
    obj = np.asarray(obj)
    if not obj.any():
        raise ValueError("chamfer distance undefined: no object voxel")
    dist = np.where(obj != 0, 0.0, np.inf)
    offsets, weights = neighbour_weights(voxel_size)
    return _two_pass(np.ascontiguousarray(dist), offsets, weights)
