# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, cos, sqrt, pow
from libc.stdint cimport uint64_t
from libc.string cimport memcpy

cnp.import_array()

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t splitmix(uint64_t x) nogil:
    cdef uint64_t z = x + <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double box_iou(const double[:, ::1] a, Py_ssize_t i,
                           const double[:, ::1] b, Py_ssize_t j) nogil:
    cdef double iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
    cdef double ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
    cdef double inter, union
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = ((a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
             + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter)
    if union > 0:
        return inter / union
    return 0.0


def pairwise_iou(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(m):
                ov[i, j] = box_iou(av, i, bv, j)
    return out


def nms(boxes, scores, double iou_thresh):
    cdef const double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const cnp.int64_t[::1] order = np.argsort(-sc, kind="stable").astype(np.int64)
    cdef Py_ssize_t n = order.shape[0], p, q, k = 0
    supp = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] sv = supp
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] kv = keep
    with nogil:
        for p in range(n):
            if sv[p]:
                continue
            kv[k] = order[p]
            k += 1
            for q in range(p + 1, n):
                if not sv[q] and box_iou(bv, order[p], bv, order[q]) > iou_thresh:
                    sv[q] = 1
    return keep[:k].copy()


def crop_mix(boxes, obj_boxes, obj_app, bg, double power):
    cdef const double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] ob = np.ascontiguousarray(obj_boxes, dtype=np.float64).reshape(-1, 4)
    cdef const double[::1] bgv = np.ascontiguousarray(bg, dtype=np.float64)
    cdef Py_ssize_t n = bx.shape[0], nm = ob.shape[0], d = bgv.shape[0]
    app_arr = np.ascontiguousarray(obj_app, dtype=np.float64).reshape(nm, d)
    cdef const double[:, ::1] app = app_arr
    out = np.empty((n, d + 4), dtype=np.float64)
    cdef double[:, ::1] ov = out
    acc_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    cdef Py_ssize_t i, m, k
    cdef double bw, bh, area_b, bcx, bcy, ow, oh, area_o, iw, ih, inter, iou, a, v
    cdef double s_a, s_v, covered, u, g0, g1, g2, g3, den
    with nogil:
        for i in range(n):
            bw = bx[i, 2] - bx[i, 0]
            bh = bx[i, 3] - bx[i, 1]
            area_b = bw * bh
            bcx = bx[i, 0] + 0.5 * bw
            bcy = bx[i, 1] + 0.5 * bh
            for k in range(d):
                acc[k] = 0.0
            s_a = 0.0
            s_v = 0.0
            covered = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            g3 = 0.0
            for m in range(nm):
                ow = ob[m, 2] - ob[m, 0]
                oh = ob[m, 3] - ob[m, 1]
                area_o = ow * oh
                iw = min(bx[i, 2], ob[m, 2]) - max(bx[i, 0], ob[m, 0])
                ih = min(bx[i, 3], ob[m, 3]) - max(bx[i, 1], ob[m, 1])
                if iw > 0 and ih > 0:
                    inter = iw * ih
                    iou = inter / (area_b + area_o - inter)
                    a = pow(iou, power)
                    v = inter / area_o
                    for k in range(d):
                        acc[k] += a * app[m, k]
                    s_a += a
                    covered += inter
                    # the cue describes only the visible part of the object
                    g0 += v * ((max(bx[i, 0], ob[m, 0]) + 0.5 * iw - bcx) / bw)
                    g1 += v * ((max(bx[i, 1], ob[m, 1]) + 0.5 * ih - bcy) / bh)
                    g2 += v * log(iw / bw)
                    g3 += v * log(ih / bh)
                    s_v += v
            u = 1.0 - covered / area_b
            if u < 0.0:
                u = 0.0
            den = s_a + u
            for k in range(d):
                ov[i, k] = (acc[k] + u * bgv[k]) / den
            den = s_v + u
            ov[i, d] = g0 / den
            ov[i, d + 1] = g1 / den
            ov[i, d + 2] = g2 / den
            ov[i, d + 3] = g3 / den
    return out


def hashed_normal(seed, boxes, Py_ssize_t dim):
    arr = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4) + 0.0
    cdef const double[:, ::1] bx = arr
    cdef Py_ssize_t n = bx.shape[0], i, c, j
    cdef uint64_t s = <uint64_t>int(seed)
    cdef uint64_t h, bits, ra, rb
    cdef double u1, u2, coord
    out = np.empty((n, dim), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            h = splitmix(s)
            for c in range(4):
                coord = bx[i, c]
                memcpy(&bits, &coord, 8)
                h = splitmix(h ^ bits)
            for j in range(dim):
                ra = splitmix(h + <uint64_t>(2 * j + 1))
                rb = splitmix(h + <uint64_t>(2 * j + 2))
                u1 = (<double>(ra >> 11) + 1.0) * INV_2_53
                u2 = <double>(rb >> 11) * INV_2_53
                ov[i, j] = sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)
    return out
