"""Vectorized numpy fallback for the ray-cast hot kernels.

The compiled extension (_ckernels) implements the same functions with the
same double-precision arithmetic in the same order, so both backends
produce bit-identical images. Keep any formula change mirrored there.

Packed scene arrays (all float64, C-contiguous):
  room_lo, room_hi : (3,) axis-aligned room box
  walls            : (6, 8) per wall [ca(3), cb(3), mode, scale]
                     wall order x-lo, x-hi, y-lo, y-hi, z-lo, z-hi
                     mode 0 solid, 1 checker, 2 gradient
  boxes            : (Kb, 14) [lo(3), hi(3), ca(3), cb(3), mode, scale]
                     mode 0 solid, 1 3-D checker
  spheres          : (Ks, 12) [center(3), radius, ca(3), cb(3), mode, scale]
  light            : (3,) unit vector pointing toward the light
  ambient          : scalar ambient term in [0, 1)
"""

import numpy as np

EPS = 1e-9

# In-plane texture axes per wall normal axis: (first, second).
_WALL_UV = ((1, 2), (0, 2), (0, 1))


def _room_exit(origins, dirs, room_lo, room_hi):
    """Exit distance and wall index for rays starting inside the room."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    wall = np.zeros(n, dtype=np.int64)
    for axis in range(3):
        o = origins[:, axis]
        d = dirs[:, axis]
        with np.errstate(divide="ignore"):
            t_hi = (room_hi[axis] - o) / d
            t_lo = (room_lo[axis] - o) / d
        t = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
        w = np.where(d > 0, 2 * axis + 1, 2 * axis)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        wall = np.where(closer, w, wall)
    return best_t, wall


def _box_hit(origins, dirs, lo, hi):
    """Slab test. Returns (t, hit_mask, axis, inside_mask)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - origins) / dirs
        t2 = (hi[None, :] - origins) / dirs
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Entry axis: first axis attaining the maximum of near.
    tmin = near[:, 0]
    axis_in = np.zeros(origins.shape[0], dtype=np.int64)
    for axis in (1, 2):
        better = near[:, axis] > tmin
        tmin = np.where(better, near[:, axis], tmin)
        axis_in = np.where(better, axis, axis_in)
    tmax = far[:, 0]
    axis_out = np.zeros(origins.shape[0], dtype=np.int64)
    for axis in (1, 2):
        better = far[:, axis] < tmax
        tmax = np.where(better, far[:, axis], tmax)
        axis_out = np.where(better, axis, axis_out)
    hit = (tmax >= tmin) & (tmax > EPS)
    inside = tmin <= EPS
    t = np.where(inside, tmax, tmin)
    hit = hit & (t > EPS)
    axis = np.where(inside, axis_out, axis_in)
    return t, hit, axis, inside


def _dot3(a, b):
    # Explicit left-to-right sum so the compiled twin matches bit-for-bit.
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2]


def _sphere_hit(origins, dirs, center, radius):
    oc = origins - center[None, :]
    b = _dot3(oc, dirs)
    c = _dot3(oc, oc) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    t = np.where(t > EPS, t, -b + sq)
    hit = ok & (t > EPS)
    return np.where(hit, t, np.inf), hit


def _checker3d(p, scale):
    k = (np.floor(p / scale)).astype(np.int64)
    return (k[:, 0] + k[:, 1] + k[:, 2]) & 1


def _shade(albedo, normal, light, ambient):
    lam = normal[:, 0] * light[0] + normal[:, 1] * light[1] + normal[:, 2] * light[2]
    lam = np.where(lam > 0.0, lam, 0.0)
    return albedo * (ambient + (1.0 - ambient) * lam)[:, None]


def render(origins, dirs, room_lo, room_hi, walls, boxes, spheres, light, ambient):
    """Nearest-hit Lambert shading for a batch of rays.

    origins, dirs: (N, 3) float64, dirs unit length.
    Returns (colors (N, 3), depth (N,)); depth is the hit distance.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]

    best_t, wall = _room_exit(origins, dirs, room_lo, room_hi)
    kind = np.zeros(n, dtype=np.int64)  # 0 wall, 1 box, 2 sphere
    index = wall.copy()
    inside_flag = np.zeros(n, dtype=bool)
    axis_arr = np.zeros(n, dtype=np.int64)

    for i in range(boxes.shape[0]):
        t, hit, axis, inside = _box_hit(origins, dirs, boxes[i, 0:3], boxes[i, 3:6])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        kind = np.where(closer, 1, kind)
        index = np.where(closer, i, index)
        axis_arr = np.where(closer, axis, axis_arr)
        inside_flag = np.where(closer, inside, inside_flag)

    for i in range(spheres.shape[0]):
        t, hit = _sphere_hit(origins, dirs, spheres[i, 0:3], spheres[i, 3])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        kind = np.where(closer, 2, kind)
        index = np.where(closer, i, index)

    p = origins + best_t[:, None] * dirs
    colors = np.zeros((n, 3))

    for w in range(6):
        sel = (kind == 0) & (index == w)
        if not sel.any():
            continue
        axis = w // 2
        a1, a2 = _WALL_UV[axis]
        ca = walls[w, 0:3]
        cb = walls[w, 3:6]
        mode = int(walls[w, 6])
        scale = walls[w, 7]
        ps = p[sel]
        if mode == 1:
            k1 = np.floor(ps[:, a1] / scale).astype(np.int64)
            k2 = np.floor(ps[:, a2] / scale).astype(np.int64)
            par = (k1 + k2) & 1
            albedo = np.where(par[:, None] == 0, ca[None, :], cb[None, :])
        elif mode == 2:
            tt = (ps[:, a1] - room_lo[a1]) / (room_hi[a1] - room_lo[a1])
            albedo = ca[None, :] + tt[:, None] * (cb - ca)[None, :]
        else:
            albedo = np.broadcast_to(ca, (ps.shape[0], 3))
        normal = np.zeros((ps.shape[0], 3))
        normal[:, axis] = 1.0 if w % 2 == 0 else -1.0  # inward
        colors[sel] = _shade(albedo, normal, light, ambient)

    for i in range(boxes.shape[0]):
        sel = (kind == 1) & (index == i)
        if not sel.any():
            continue
        ca = boxes[i, 6:9]
        cb = boxes[i, 9:12]
        mode = int(boxes[i, 12])
        scale = boxes[i, 13]
        ps = p[sel]
        if mode == 1:
            par = _checker3d(ps, scale)
            albedo = np.where(par[:, None] == 0, ca[None, :], cb[None, :])
        else:
            albedo = np.broadcast_to(ca, (ps.shape[0], 3))
        normal = np.zeros((ps.shape[0], 3))
        ax = axis_arr[sel]
        sign = np.where(dirs[sel, :][np.arange(ax.size), ax] > 0, 1.0, -1.0)
        # Outside hits face against the ray; inside hits face back along it.
        normal[np.arange(ax.size), ax] = -sign
        colors[sel] = _shade(albedo, normal, light, ambient)

    for i in range(spheres.shape[0]):
        sel = (kind == 2) & (index == i)
        if not sel.any():
            continue
        center = spheres[i, 0:3]
        radius = spheres[i, 3]
        ca = spheres[i, 4:7]
        cb = spheres[i, 7:10]
        mode = int(spheres[i, 10])
        scale = spheres[i, 11]
        ps = p[sel]
        normal = (ps - center[None, :]) / radius
        facing = _dot3(normal, dirs[sel]) > 0
        normal = np.where(facing[:, None], -normal, normal)
        if mode == 1:
            par = _checker3d(ps, scale)
            albedo = np.where(par[:, None] == 0, ca[None, :], cb[None, :])
        else:
            albedo = np.broadcast_to(ca, (ps.shape[0], 3))
        colors[sel] = _shade(albedo, normal, light, ambient)

    return colors, best_t


def trace_depth(origins, dirs, room_lo, room_hi, boxes, spheres):
    """Nearest-hit distance only (visibility queries)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    best_t, _ = _room_exit(origins, dirs, room_lo, room_hi)
    for i in range(boxes.shape[0]):
        t, hit, _, _ = _box_hit(origins, dirs, boxes[i, 0:3], boxes[i, 3:6])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
    for i in range(spheres.shape[0]):
        t, hit = _sphere_hit(origins, dirs, spheres[i, 0:3], spheres[i, 3])
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
    return best_t
