# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-cast kernels: per-ray nearest hit with Lambert shading.

Mirror of pykernels.py. Double arithmetic is kept in the same order as the
numpy fallback (and the extension is built with -ffp-contract=off) so both
backends produce bit-identical results.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, floor, sqrt

cnp.import_array()

cdef double EPS = 1e-9


cdef inline long _parity2(double u, double v, double scale) nogil:
    return (<long> floor(u / scale) + <long> floor(v / scale)) & 1


cdef inline long _parity3(double x, double y, double z, double scale) nogil:
    return ((<long> floor(x / scale)) + (<long> floor(y / scale))
            + (<long> floor(z / scale))) & 1


cdef inline double _room_exit(const double* o, const double* d,
                              const double* room_lo, const double* room_hi,
                              long* wall) nogil:
    cdef double best_t = INFINITY
    cdef double t
    cdef long w
    cdef int axis
    best_t = INFINITY
    wall[0] = 0
    for axis in range(3):
        if d[axis] > 0:
            t = (room_hi[axis] - o[axis]) / d[axis]
            w = 2 * axis + 1
        elif d[axis] < 0:
            t = (room_lo[axis] - o[axis]) / d[axis]
            w = 2 * axis
        else:
            continue
        if t < best_t:
            best_t = t
            wall[0] = w
    return best_t


cdef inline double _box_hit(const double* o, const double* d,
                            const double* lo, const double* hi,
                            long* axis_out, bint* inside_out) nogil:
    """Returns hit distance or INFINITY; axis/inside describe the hit face."""
    cdef double near[3]
    cdef double far[3]
    cdef double t1, t2, tmin, tmax, t
    cdef int axis, ax_in, ax_out
    for axis in range(3):
        t1 = (lo[axis] - o[axis]) / d[axis]
        t2 = (hi[axis] - o[axis]) / d[axis]
        if t1 < t2:
            near[axis] = t1
            far[axis] = t2
        else:
            near[axis] = t2
            far[axis] = t1
    tmin = near[0]
    ax_in = 0
    if near[1] > tmin:
        tmin = near[1]
        ax_in = 1
    if near[2] > tmin:
        tmin = near[2]
        ax_in = 2
    tmax = far[0]
    ax_out = 0
    if far[1] < tmax:
        tmax = far[1]
        ax_out = 1
    if far[2] < tmax:
        tmax = far[2]
        ax_out = 2
    if not (tmax >= tmin and tmax > EPS):
        return INFINITY
    if tmin <= EPS:
        t = tmax
        axis_out[0] = ax_out
        inside_out[0] = True
    else:
        t = tmin
        axis_out[0] = ax_in
        inside_out[0] = False
    if t <= EPS:
        return INFINITY
    return t


cdef inline double _sphere_hit(const double* o, const double* d,
                               const double* center, double radius) nogil:
    cdef double ocx = o[0] - center[0]
    cdef double ocy = o[1] - center[1]
    cdef double ocz = o[2] - center[2]
    cdef double b = ocx * d[0] + ocy * d[1] + ocz * d[2]
    cdef double c = (ocx * ocx + ocy * ocy + ocz * ocz) - radius * radius
    cdef double disc = b * b - c
    cdef double sq, t
    if disc < 0:
        return INFINITY
    sq = sqrt(disc)
    t = -b - sq
    if t <= EPS:
        t = -b + sq
    if t <= EPS:
        return INFINITY
    return t


def render(cnp.ndarray[double, ndim=2] origins_in,
           cnp.ndarray[double, ndim=2] dirs_in,
           cnp.ndarray[double, ndim=1] room_lo_in,
           cnp.ndarray[double, ndim=1] room_hi_in,
           cnp.ndarray[double, ndim=2] walls_in,
           cnp.ndarray[double, ndim=2] boxes_in,
           cnp.ndarray[double, ndim=2] spheres_in,
           cnp.ndarray[double, ndim=1] light_in,
           double ambient):
    cdef double[:, ::1] origins = np.ascontiguousarray(origins_in)
    cdef double[:, ::1] dirs = np.ascontiguousarray(dirs_in)
    cdef double[::1] room_lo = np.ascontiguousarray(room_lo_in)
    cdef double[::1] room_hi = np.ascontiguousarray(room_hi_in)
    cdef double[:, ::1] walls = np.ascontiguousarray(walls_in)
    cdef double[:, ::1] boxes = np.ascontiguousarray(boxes_in)
    cdef double[:, ::1] spheres = np.ascontiguousarray(spheres_in)
    cdef double[::1] light = np.ascontiguousarray(light_in)

    cdef Py_ssize_t n = origins.shape[0]
    cdef Py_ssize_t kb = boxes.shape[0]
    cdef Py_ssize_t ks = spheres.shape[0]
    colors_arr = np.zeros((n, 3))
    depth_arr = np.empty(n)
    cdef double[:, ::1] colors = colors_arr
    cdef double[::1] depth = depth_arr

    cdef Py_ssize_t i, j
    cdef long kind, index, wall, axis, par, baxis
    cdef bint inside, binside
    cdef double best_t, t, scale, tt, lam, shade, nx, ny, nz, sign, radius
    cdef double albedo[3]
    cdef double px, py, pz
    cdef int a1, a2, k
    cdef const double* o
    cdef const double* d

    with nogil:
        for i in range(n):
            o = &origins[i, 0]
            d = &dirs[i, 0]
            best_t = _room_exit(o, d, &room_lo[0], &room_hi[0], &wall)
            kind = 0
            index = wall
            axis = 0
            inside = False
            for j in range(kb):
                t = _box_hit(o, d, &boxes[j, 0], &boxes[j, 3], &baxis, &binside)
                if t < best_t:
                    best_t = t
                    kind = 1
                    index = j
                    axis = baxis
                    inside = binside
            for j in range(ks):
                t = _sphere_hit(o, d, &spheres[j, 0], spheres[j, 3])
                if t < best_t:
                    best_t = t
                    kind = 2
                    index = j
            depth[i] = best_t

            px = o[0] + best_t * d[0]
            py = o[1] + best_t * d[1]
            pz = o[2] + best_t * d[2]

            if kind == 0:
                axis = index // 2
                if axis == 0:
                    a1 = 1; a2 = 2
                elif axis == 1:
                    a1 = 0; a2 = 2
                else:
                    a1 = 0; a2 = 1
                scale = walls[index, 7]
                if walls[index, 6] == 1:
                    par = _parity2(_coord(px, py, pz, a1), _coord(px, py, pz, a2), scale)
                    for k in range(3):
                        albedo[k] = walls[index, k] if par == 0 else walls[index, 3 + k]
                elif walls[index, 6] == 2:
                    tt = (_coord(px, py, pz, a1) - room_lo[a1]) / (room_hi[a1] - room_lo[a1])
                    for k in range(3):
                        albedo[k] = walls[index, k] + tt * (walls[index, 3 + k] - walls[index, k])
                else:
                    for k in range(3):
                        albedo[k] = walls[index, k]
                nx = 0.0; ny = 0.0; nz = 0.0
                sign = 1.0 if index % 2 == 0 else -1.0
                if axis == 0:
                    nx = sign
                elif axis == 1:
                    ny = sign
                else:
                    nz = sign
            elif kind == 1:
                scale = boxes[index, 13]
                if boxes[index, 12] == 1:
                    par = _parity3(px, py, pz, scale)
                    for k in range(3):
                        albedo[k] = boxes[index, 6 + k] if par == 0 else boxes[index, 9 + k]
                else:
                    for k in range(3):
                        albedo[k] = boxes[index, 6 + k]
                sign = 1.0 if d[axis] > 0 else -1.0
                nx = 0.0; ny = 0.0; nz = 0.0
                if axis == 0:
                    nx = -sign
                elif axis == 1:
                    ny = -sign
                else:
                    nz = -sign
            else:
                radius = spheres[index, 3]
                nx = (px - spheres[index, 0]) / radius
                ny = (py - spheres[index, 1]) / radius
                nz = (pz - spheres[index, 2]) / radius
                if nx * d[0] + ny * d[1] + nz * d[2] > 0:
                    nx = -nx; ny = -ny; nz = -nz
                scale = spheres[index, 11]
                if spheres[index, 10] == 1:
                    par = _parity3(px, py, pz, scale)
                    for k in range(3):
                        albedo[k] = spheres[index, 4 + k] if par == 0 else spheres[index, 7 + k]
                else:
                    for k in range(3):
                        albedo[k] = spheres[index, 4 + k]

            lam = nx * light[0] + ny * light[1] + nz * light[2]
            if lam < 0.0:
                lam = 0.0
            shade = ambient + (1.0 - ambient) * lam
            for k in range(3):
                colors[i, k] = albedo[k] * shade

    return colors_arr, depth_arr


cdef inline double _coord(double px, double py, double pz, int axis) nogil:
    if axis == 0:
        return px
    if axis == 1:
        return py
    return pz


def trace_depth(cnp.ndarray[double, ndim=2] origins_in,
                cnp.ndarray[double, ndim=2] dirs_in,
                cnp.ndarray[double, ndim=1] room_lo_in,
                cnp.ndarray[double, ndim=1] room_hi_in,
                cnp.ndarray[double, ndim=2] boxes_in,
                cnp.ndarray[double, ndim=2] spheres_in):
    cdef double[:, ::1] origins = np.ascontiguousarray(origins_in)
    cdef double[:, ::1] dirs = np.ascontiguousarray(dirs_in)
    cdef double[::1] room_lo = np.ascontiguousarray(room_lo_in)
    cdef double[::1] room_hi = np.ascontiguousarray(room_hi_in)
    cdef double[:, ::1] boxes = np.ascontiguousarray(boxes_in)
    cdef double[:, ::1] spheres = np.ascontiguousarray(spheres_in)

    cdef Py_ssize_t n = origins.shape[0]
    cdef Py_ssize_t kb = boxes.shape[0]
    cdef Py_ssize_t ks = spheres.shape[0]
    depth_arr = np.empty(n)
    cdef double[::1] depth = depth_arr

    cdef Py_ssize_t i, j
    cdef long wall, baxis
    cdef bint binside
    cdef double best_t, t

    with nogil:
        for i in range(n):
            best_t = _room_exit(&origins[i, 0], &dirs[i, 0],
                                &room_lo[0], &room_hi[0], &wall)
            for j in range(kb):
                t = _box_hit(&origins[i, 0], &dirs[i, 0],
                             &boxes[j, 0], &boxes[j, 3], &baxis, &binside)
                if t < best_t:
                    best_t = t
            for j in range(ks):
                t = _sphere_hit(&origins[i, 0], &dirs[i, 0],
                                &spheres[j, 0], spheres[j, 3])
                if t < best_t:
                    best_t = t
            depth[i] = best_t

    return depth_arr
